#include "snapdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <zlib.h>

namespace snapdiff {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }

  void record(const std::string& name, const Shape& shape, const void* data, std::size_t words) {
    if (name.size() > 0xffff) throw CheckpointError("record name too long: " + name);
    if (shape.size() > 0xff) throw CheckpointError("too many dimensions in record " + name);
    u16(static_cast<std::uint16_t>(name.size()));
    bytes(name.data(), name.size());
    u8(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) {
      if (d > 0xffffffffULL) throw CheckpointError("dimension too large in record " + name);
      u32(static_cast<std::uint32_t>(d));
    }
    bytes(data, words * 4);
  }
  void floats(const std::string& name, const Shape& shape, const std::vector<float>& v) {
    record(name, shape, v.data(), v.size());
  }
  void text(const std::string& name, const std::string& s) {
    std::vector<std::uint32_t> words((s.size() + 3) / 4, 0);
    std::memcpy(words.data(), s.data(), s.size());
    record(name, {words.size()}, words.data(), words.size());
  }
  void counter(const std::string& name, std::uint64_t v) {
    const std::uint32_t w[2] = {static_cast<std::uint32_t>(v), static_cast<std::uint32_t>(v >> 32)};
    record(name, {2}, w, 2);
  }

  std::vector<std::uint8_t> out;
};

struct Record {
  Shape shape;
  std::vector<std::uint32_t> words;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  bool done() const { return pos_ == n_; }
  void bytes(void* dst, std::size_t n) {
    if (n > n_ - pos_) throw CheckpointError("checkpoint truncated");
    std::memcpy(dst, p_ + pos_, n);
    pos_ += n;
  }
  template <class U>
  U get() {
    U v;
    bytes(&v, sizeof v);
    return v;
  }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

std::string record_text(const Record& r) {
  std::string s(r.words.size() * 4, '\0');
  std::memcpy(s.data(), r.words.data(), s.size());
  while (!s.empty() && s.back() == '\0') s.pop_back();
  return s;
}

std::uint64_t record_counter(const Record& r) {
  if (r.words.size() != 2) throw CheckpointError("malformed counter record");
  return static_cast<std::uint64_t>(r.words[0]) | (static_cast<std::uint64_t>(r.words[1]) << 32);
}

std::vector<float> record_floats(const Record& r) {
  std::vector<float> v(r.words.size());
  std::memcpy(v.data(), r.words.data(), v.size() * 4);
  return v;
}

const Record& find(const std::map<std::string, Record>& records, const std::string& name) {
  auto it = records.find(name);
  if (it == records.end()) throw CheckpointError("checkpoint lacks record '" + name + "'");
  return it->second;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const RunConfig& cfg, const TrainState& state) {
  Writer w;
  w.bytes("SVCK", 4);
  w.u32(kCheckpointVersion);
  w.text("meta/config", serialize_config(cfg));
  std::ostringstream rng;
  rng << state.rng;
  w.text("meta/rng", rng.str());
  w.counter("meta/step", state.step);
  w.counter("meta/opt_step", state.opt.step);
  const auto& names = state.params.names();
  const auto& tensors = state.params.tensors();
  if (state.opt.m.size() != names.size() || state.ema.shadow.size() != names.size()) {
    throw CheckpointError("optimizer or EMA state does not match the parameters");
  }
  for (std::size_t i = 0; i < names.size(); ++i) w.floats("param/" + names[i], tensors[i].shape(), tensors[i].values());
  for (std::size_t i = 0; i < names.size(); ++i) w.floats("opt/m/" + names[i], tensors[i].shape(), state.opt.m[i]);
  for (std::size_t i = 0; i < names.size(); ++i) w.floats("opt/v/" + names[i], tensors[i].shape(), state.opt.v[i]);
  for (std::size_t i = 0; i < names.size(); ++i) w.floats("ema/" + names[i], tensors[i].shape(), state.ema.shadow[i]);
  const auto crc = static_cast<std::uint32_t>(crc32(0L, w.out.data(), static_cast<uInt>(w.out.size())));
  w.u32(crc);
  return std::move(w.out);
}

CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12) throw CheckpointError("checkpoint truncated");
  if (std::memcmp(bytes.data(), "SVCK", 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, 4);
  const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));
  if (crc != stored) throw CheckpointError("checkpoint CRC mismatch (file corrupt)");

  Reader r(bytes.data() + 4, body - 4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  std::map<std::string, Record> records;
  while (!r.done()) {
    const auto len = r.get<std::uint16_t>();
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    const auto ndim = r.get<std::uint8_t>();
    Record rec;
    for (std::size_t d = 0; d < ndim; ++d) rec.shape.push_back(r.get<std::uint32_t>());
    rec.words.resize(shape_size(rec.shape));
    r.bytes(rec.words.data(), rec.words.size() * 4);
    if (!records.emplace(name, std::move(rec)).second) throw CheckpointError("duplicate record '" + name + "'");
  }

  CheckpointData out;
  try {
    out.config = parse_config(record_text(find(records, "meta/config")));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  auto& s = out.state;
  s = init_train_state(out.config.fit, out.config.train);
  std::istringstream rng(record_text(find(records, "meta/rng")));
  rng >> s.rng;
  if (!rng) throw CheckpointError("malformed RNG state");
  s.step = record_counter(find(records, "meta/step"));
  s.opt.step = record_counter(find(records, "meta/opt_step"));

  const auto& names = s.params.names();
  std::size_t expected = 4;
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto& t = s.params.tensors()[i];
    auto load = [&](const std::string& prefix) {
      const auto& rec = find(records, prefix + names[i]);
      if (rec.shape != t.shape()) {
        throw CheckpointError("record '" + prefix + names[i] + "' has shape " + shape_str(rec.shape) +
                              ", expected " + shape_str(t.shape()));
      }
      return record_floats(rec);
    };
    const auto values = load("param/");
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
    s.opt.m[i] = load("opt/m/");
    s.opt.v[i] = load("opt/v/");
    s.ema.shadow[i] = load("ema/");
    expected += 4;
  }
  if (records.size() != expected) throw CheckpointError("checkpoint has records for unknown parameters");
  return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for '" + path + "'");
}

void save_checkpoint(const std::string& path, const RunConfig& cfg, const TrainState& state) {
  write_file(path, encode_checkpoint(cfg, state));
}

CheckpointData load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace snapdiff
