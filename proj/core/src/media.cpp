#include "snapdiff/media.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace snapdiff {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void require_video(const Tensor32& v) {
  if (v.rank() != 4) throw std::invalid_argument("expected a (T, H, W, C) video, got " + shape_str(v.shape()));
}

}  // namespace

std::vector<std::uint8_t> encode_video(const Tensor32& video) {
  require_video(video);
  const std::size_t t = video.dim(0), h = video.dim(1), w = video.dim(2), c = video.dim(3);
  std::vector<std::uint8_t> out;
  out.reserve(16 + video.size() * 4);
  for (auto d : {t, h, w, c}) put_u32(out, static_cast<std::uint32_t>(d));
  const auto& v = video.values();
  for (std::size_t f = 0; f < t; ++f)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t col = 0; col < w; ++col) {
          std::uint32_t bits;
          std::memcpy(&bits, &v[((f * h + r) * w + col) * c + ch], 4);
          put_u32(out, bits);
        }
  return out;
}

Tensor32 decode_video(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw std::runtime_error("video file truncated");
  const std::size_t t = get_u32(bytes.data()), h = get_u32(bytes.data() + 4), w = get_u32(bytes.data() + 8),
                    c = get_u32(bytes.data() + 12);
  const std::size_t n = t * h * w * c;
  if (bytes.size() != 16 + 4 * n) throw std::runtime_error("video file size does not match its header");
  std::vector<float> v(n);
  const std::uint8_t* p = bytes.data() + 16;
  for (std::size_t f = 0; f < t; ++f)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t col = 0; col < w; ++col, p += 4) {
          const std::uint32_t bits = get_u32(p);
          std::memcpy(&v[((f * h + r) * w + col) * c + ch], &bits, 4);
        }
  return Tensor32::from_vector({t, h, w, c}, std::move(v));
}

void write_video(const std::string& path, const Tensor32& video) {
  const auto bytes = encode_video(video);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor32 read_video(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_video(bytes);
}

std::string encode_ppm(const Tensor32& frame) {
  if (frame.rank() != 3 || (frame.dim(2) != 1 && frame.dim(2) != 3)) {
    throw std::invalid_argument("encode_ppm: expected (H, W, 1) or (H, W, 3)");
  }
  const std::size_t h = frame.dim(0), w = frame.dim(1), c = frame.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const auto& v = frame.values();
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      const float x = v[i * c + (c == 1 ? 0 : k)];
      const double level = std::clamp((static_cast<double>(x) + 1.0) * 127.5, 0.0, 255.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(level))));
    }
  }
  return out;
}

std::vector<std::string> write_frames_ppm(const std::string& prefix, const Tensor32& video) {
  require_video(video);
  const std::size_t t = video.dim(0), per = video.size() / std::max<std::size_t>(t, 1);
  std::vector<std::string> paths;
  for (std::size_t f = 0; f < t; ++f) {
    std::vector<float> frame(video.values().begin() + f * per, video.values().begin() + (f + 1) * per);
    const auto ppm = encode_ppm(Tensor32::from_vector({video.dim(1), video.dim(2), video.dim(3)}, std::move(frame)));
    std::ostringstream name;
    name << prefix << '_' << std::setw(3) << std::setfill('0') << f << ".ppm";
    std::ofstream out(name.str(), std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + name.str() + "'");
    out << ppm;
    paths.push_back(name.str());
  }
  return paths;
}

}  // namespace snapdiff
