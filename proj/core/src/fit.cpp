#include "snapdiff/fit.hpp"

#include <cmath>
#include <stdexcept>

#include "snapdiff/diffusion.hpp"

namespace snapdiff {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("FitConfig: " + what);
}

}  // namespace

void FitConfig::validate() const {
  require(frames > 0 && height > 0 && width > 0 && channels > 0, "input dimensions must be positive");
  require(patch.t == 1, "patches must span a single frame");
  require(patch.h > 0 && patch.w > 0, "patch size must be positive");
  require(height % patch.h == 0 && width % patch.w == 0, "frame size not divisible by patch size");
  require(group.t == grid_t(), "groups must cover all frames");
  require(group.h > 0 && group.w > 0, "group size must be positive");
  require(grid_h() % group.h == 0 && grid_w() % group.w == 0, "patch grid not divisible by group size");
  require(latent_count > 0 && latent_count % group_count() == 0,
          "latent count not divisible by group count");
  require(patch_channels > 0 && latent_channels > 0 && cond_channels > 0, "channel counts must be positive");
  require(patch_head_channels > 0 && patch_channels % patch_head_channels == 0,
          "patch channels not divisible by head channels");
  require(latent_head_channels > 0 && latent_channels % latent_head_channels == 0,
          "latent channels not divisible by head channels");
  require(embed_channels >= 4 && embed_channels % 2 == 0, "embed channels must be even and >= 4");
  require(ff_mult > 0, "ff_mult must be positive");
  require(blocks > 0, "need at least one block");
  require(self_cond_prob >= 0 && self_cond_prob <= 1, "self_cond_prob outside [0, 1]");
  require(dropout >= 0 && dropout < 1, "dropout outside [0, 1)");
}

std::size_t FitConfig::group_count() const {
  if (group.t == 0 || group.h == 0 || group.w == 0) return 0;
  return (grid_t() / group.t) * (grid_h() / group.h) * (grid_w() / group.w);
}

FitConfig FitConfig::toy() {
  FitConfig c;
  c.frames = 8;
  c.height = 16;
  c.width = 16;
  c.channels = 1;
  c.patch = {1, 4, 4};
  c.group = {8, 2, 2};
  c.patch_channels = 64;
  c.latent_count = 32;
  c.latent_channels = 64;
  c.blocks = 2;
  c.global_layers = 2;
  c.patch_head_channels = 16;
  c.latent_head_channels = 16;
  c.cond_channels = 64;
  c.embed_channels = 32;
  c.ff_mult = 2;
  c.n_classes = 4;
  c.self_cond_prob = 0.9;
  c.dropout = 0.1;
  return c;
}

FitConfig FitConfig::paper_500m() {
  FitConfig c;
  c.frames = 16;
  c.height = 40;
  c.width = 64;
  c.channels = 3;
  c.patch = {1, 4, 4};
  c.group = {16, 5, 4};
  c.patch_channels = 512;
  c.latent_count = 512;
  c.latent_channels = 1024;
  c.blocks = 6;
  c.global_layers = 4;
  c.patch_head_channels = 64;
  c.latent_head_channels = 64;
  c.cond_channels = 1024;
  return c;
}

FitConfig FitConfig::paper_3_9b() {
  FitConfig c = paper_500m();
  c.latent_count = 768;
  c.latent_channels = 3072;
  c.patch_head_channels = 128;
  c.latent_head_channels = 128;
  c.cond_channels = 3072;
  return c;
}

FitConfig FitConfig::paper_3_9b_upsampler() {
  FitConfig c = paper_3_9b();
  c.height = 288;
  c.width = 512;
  c.lowres_channels = 3;
  c.group = {16, 18, 16};
  return c;
}

std::size_t patch_token_count(std::size_t frames, std::size_t height, std::size_t width,
                              const PatchSize& patch) {
  if (patch.t == 0 || patch.h == 0 || patch.w == 0) throw std::invalid_argument("patch size must be positive");
  if (frames % patch.t || height % patch.h || width % patch.w) {
    throw std::invalid_argument("input not divisible by patch size");
  }
  return (frames / patch.t) * (height / patch.h) * (width / patch.w);
}

// ---------------------------------------------------------------------------
// Parameter store

template <class T>
Tensor<T>& FitParams<T>::add(const std::string& name, Tensor<T> value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  index_.emplace(name, tensors_.size());
  names_.push_back(name);
  tensors_.push_back(std::move(value));
  return tensors_.back();
}

template <class T>
const Tensor<T>& FitParams<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return tensors_[it->second];
}

template <class T>
Tensor<T>& FitParams<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return tensors_[it->second];
}

template <class T>
std::size_t FitParams<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

template <class T>
void FitParams<T>::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

template <class T>
void FitParams<T>::set_requires_grad(bool flag) {
  for (auto& t : tensors_) t.set_requires_grad(flag);
}

template <class T>
FitParams<T> FitParams<T>::clone() const {
  FitParams<T> out;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    auto c = tensors_[i].clone();
    c.set_requires_grad(tensors_[i].requires_grad());
    out.add(names_[i], c);
  }
  return out;
}

template <class T>
template <class U>
FitParams<U> FitParams<T>::cast() const {
  FitParams<U> out;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    std::vector<U> v(tensors_[i].values().begin(), tensors_[i].values().end());
    auto c = Tensor<U>::from_vector(tensors_[i].shape(), std::move(v));
    c.set_requires_grad(tensors_[i].requires_grad());
    out.add(names_[i], c);
  }
  return out;
}

namespace {

template <class T>
class Initializer {
 public:
  Initializer(FitParams<T>& p, std::uint64_t seed) : p_(p), rng_(seed) {}

  void normal(const std::string& name, Shape shape, double std) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = static_cast<T>(std * dist(rng_));
    p_.add(name, Tensor<T>::from_vector(std::move(shape), std::move(v))).set_requires_grad(true);
  }
  void constant(const std::string& name, Shape shape, double value) {
    p_.add(name, Tensor<T>::full(std::move(shape), static_cast<T>(value))).set_requires_grad(true);
  }
  void weight(const std::string& name, std::size_t in, std::size_t out) {
    normal(name, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  }
  void norm(const std::string& name, std::size_t c) {
    constant(name + ".gain", {c}, 1.0);
    constant(name + ".bias", {c}, 0.0);
  }
  void linear(const std::string& name, std::size_t in, std::size_t out) {
    weight(name + ".weight", in, out);
    constant(name + ".bias", {out}, 0.0);
  }
  void cross_attention(const std::string& name, std::size_t q, std::size_t kv) {
    norm(name + ".norm_q", q);
    norm(name + ".norm_kv", kv);
    weight(name + ".wq", q, q);
    weight(name + ".wk", kv, q);
    weight(name + ".wv", kv, q);
    weight(name + ".wo", q, q);
  }
  void self_attention(const std::string& name, std::size_t c) {
    norm(name + ".norm", c);
    weight(name + ".wq", c, c);
    weight(name + ".wk", c, c);
    weight(name + ".wv", c, c);
    weight(name + ".wo", c, c);
  }
  void feed_forward(const std::string& name, std::size_t c, std::size_t mult) {
    norm(name + ".norm", c);
    linear(name + ".fc1", c, c * mult);
    linear(name + ".fc2", c * mult, c);
  }
  void mlp(const std::string& name, std::size_t in, std::size_t out) {
    linear(name + ".fc1", in, out);
    linear(name + ".fc2", out, out);
  }

 private:
  FitParams<T>& p_;
  std::mt19937_64 rng_;
};

std::string block_prefix(std::size_t b) { return "blocks." + std::to_string(b) + "."; }

std::size_t cross_attention_count(std::size_t q, std::size_t kv) {
  return 2 * q + 2 * kv + q * q + 2 * kv * q + q * q;
}
std::size_t self_attention_count(std::size_t c) { return 2 * c + 4 * c * c; }
std::size_t feed_forward_count(std::size_t c, std::size_t m) {
  return 2 * c + (c * c * m + c * m) + (c * m * c + c);
}
std::size_t linear_count(std::size_t in, std::size_t out) { return in * out + out; }
std::size_t mlp_count(std::size_t in, std::size_t out) { return linear_count(in, out) + linear_count(out, out); }

}  // namespace

template <class T>
FitParams<T> init_fit_params(const FitConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  FitParams<T> p;
  Initializer<T> init(p, seed);
  const std::size_t cp = cfg.patch_channels, cl = cfg.latent_channels, cc = cfg.cond_channels;
  const std::size_t e = cfg.embed_channels;

  init.linear("patch_embed", cfg.patch_dim_in(), cp);
  init.normal("pos_embed", {cfg.patch_tokens(), cp}, 0.2);
  init.normal("latents.init", {cfg.latent_count, cl}, 1.0);
  init.norm("self_cond.norm", cl);
  init.constant("self_cond.proj.weight", {cl, cl}, 0.0);

  init.mlp("cond.sigma", e, cc);
  init.mlp("cond.framerate", e, cc);
  init.normal("cond.framerate.infinite", {1, cc}, 1.0);
  init.mlp("cond.resolution", 2 * e, cc);
  init.normal("cond.class_table", {cfg.n_classes + 1, cc}, 1.0);
  if (cfg.lowres_channels > 0) init.mlp("cond.aug_sigma", e, cc);

  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const auto pre = block_prefix(b);
    init.cross_attention(pre + "cond_read", cl, cc);
    init.cross_attention(pre + "read", cl, cp);
    init.feed_forward(pre + "read_ff", cl, cfg.ff_mult);
    for (std::size_t j = 0; j < cfg.global_layers; ++j) {
      const auto g = pre + "global." + std::to_string(j);
      init.self_attention(g + ".attn", cl);
      init.feed_forward(g + ".ff", cl, cfg.ff_mult);
    }
    init.cross_attention(pre + "write", cp, cl);
    init.feed_forward(pre + "write_ff", cp, cfg.ff_mult);
  }

  init.norm("out.norm", cp);
  init.linear("out.proj", cp, cfg.patch_dim_out());
  return p;
}

std::size_t fit_param_count(const FitConfig& cfg) {
  cfg.validate();
  const std::size_t cp = cfg.patch_channels, cl = cfg.latent_channels, cc = cfg.cond_channels;
  const std::size_t e = cfg.embed_channels, m = cfg.ff_mult;
  std::size_t n = 0;
  n += linear_count(cfg.patch_dim_in(), cp);
  n += cfg.patch_tokens() * cp;
  n += cfg.latent_count * cl;
  n += 2 * cl + cl * cl;
  n += 2 * mlp_count(e, cc) + cc + mlp_count(2 * e, cc) + (cfg.n_classes + 1) * cc;
  if (cfg.lowres_channels > 0) n += mlp_count(e, cc);
  const std::size_t block = cross_attention_count(cl, cc) + cross_attention_count(cl, cp) +
                            feed_forward_count(cl, m) +
                            cfg.global_layers * (self_attention_count(cl) + feed_forward_count(cl, m)) +
                            cross_attention_count(cp, cl) + feed_forward_count(cp, m);
  n += cfg.blocks * block;
  n += 2 * cp + linear_count(cp, cfg.patch_dim_out());
  return n;
}

std::uint64_t fit_forward_macs(const FitConfig& cfg, bool finite_framerate, bool self_conditioned) {
  cfg.validate();
  const std::uint64_t n = cfg.patch_tokens(), l = cfg.latent_count;
  const std::uint64_t p = cfg.tokens_per_group(), lg = cfg.latents_per_group();
  const std::uint64_t cp = cfg.patch_channels, cl = cfg.latent_channels, cc = cfg.cond_channels;
  const std::uint64_t e = cfg.embed_channels, m = cfg.ff_mult;
  const std::uint64_t k = cfg.cond_token_count();

  std::uint64_t macs = n * cfg.patch_dim_in() * cp;
  const std::uint64_t mlp = e * cc + cc * cc;
  macs += mlp;                            // sigma
  if (finite_framerate) macs += mlp;      // frame rate
  macs += 2 * e * cc + cc * cc;           // resolution
  if (cfg.lowres_channels > 0) macs += mlp;
  if (self_conditioned) macs += l * cl * cl;

  std::uint64_t block = 0;
  block += 2 * l * cl * cl + 2 * k * cc * cl + 2 * l * k * cl;  // conditioning read
  block += 2 * l * cl * cl + 2 * n * cp * cl + 2 * l * p * cl;  // group read
  block += 2 * l * cl * cl * m;                                 // read feed-forward
  block += cfg.global_layers * (4 * l * cl * cl + 2 * l * l * cl + 2 * l * cl * cl * m);
  block += 2 * n * cp * cp + 2 * l * cl * cp + 2 * n * lg * cp;  // group write
  block += 2 * n * cp * cp * m;                                  // write feed-forward
  macs += cfg.blocks * block;
  macs += n * cp * cfg.patch_dim_out();
  return macs;
}

// ---------------------------------------------------------------------------
// Layers

namespace {

template <class T>
Tensor<T> linear(const Tensor<T>& x, const FitParams<T>& p, const std::string& name) {
  return add(matmul(x, p.at(name + ".weight")), p.at(name + ".bias"));
}

template <class T>
Tensor<T> norm(const Tensor<T>& x, const FitParams<T>& p, const std::string& name) {
  return layer_norm(x, p.at(name + ".gain"), p.at(name + ".bias"));
}

// q: (B, n, Cq), kv: (B' , m, Ckv) with B' == B or 1. Inner width equals Cq.
template <class T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& kv, const FitParams<T>& p, const std::string& name,
                 std::size_t head_channels) {
  const std::size_t b = q.dim(0), n = q.dim(1), c = q.dim(2);
  const std::size_t bk = kv.dim(0), mk = kv.dim(1);
  const std::size_t heads = c / head_channels;
  auto qh = permute(reshape(matmul(q, p.at(name + ".wq")), {b, n, heads, head_channels}), {0, 2, 1, 3});
  auto kh = permute(reshape(matmul(kv, p.at(name + ".wk")), {bk, mk, heads, head_channels}), {0, 2, 3, 1});
  auto vh = permute(reshape(matmul(kv, p.at(name + ".wv")), {bk, mk, heads, head_channels}), {0, 2, 1, 3});
  auto scores = scale(matmul(qh, kh), static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_channels))));
  auto out = matmul(softmax(scores, -1), vh);
  out = reshape(permute(out, {0, 2, 1, 3}), {b, n, c});
  return matmul(out, p.at(name + ".wo"));
}

template <class T>
Tensor<T> cross_attention_residual(const Tensor<T>& q, const Tensor<T>& kv, const FitParams<T>& p,
                                   const std::string& name, std::size_t head_channels) {
  return add(q, attend(norm(q, p, name + ".norm_q"), norm(kv, p, name + ".norm_kv"), p, name, head_channels));
}

template <class T>
Tensor<T> self_attention_residual(const Tensor<T>& x, const FitParams<T>& p, const std::string& name,
                                  std::size_t head_channels) {
  const auto h = norm(x, p, name + ".norm");
  return add(x, attend(h, h, p, name, head_channels));
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, const ForwardOptions& opts) {
  if (!opts.train || rate <= 0) return x;
  if (!opts.rng) throw std::invalid_argument("dropout in training mode needs an rng");
  std::bernoulli_distribution keep(1.0 - rate);
  const T kept = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  for (auto& v : mask) v = keep(*opts.rng) ? kept : T(0);
  return mul(x, Tensor<T>::from_vector(x.shape(), std::move(mask)));
}

template <class T>
Tensor<T> feed_forward_residual(const Tensor<T>& x, const FitParams<T>& p, const std::string& name,
                                double rate = 0, const ForwardOptions& opts = {}) {
  auto h = gelu(linear(norm(x, p, name + ".norm"), p, name + ".fc1"));
  h = dropout(h, rate, opts);
  return add(x, linear(h, p, name + ".fc2"));
}

template <class T>
Tensor<T> sinusoidal(const std::vector<double>& values, std::size_t channels) {
  const std::size_t half = channels / 2;
  std::vector<T> out;
  out.reserve(values.size() * channels);
  for (double v : values) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(std::log(100.0) * static_cast<double>(i) / static_cast<double>(half - 1));
      out.push_back(static_cast<T>(std::cos(v * freq)));
    }
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(std::log(100.0) * static_cast<double>(i) / static_cast<double>(half - 1));
      out.push_back(static_cast<T>(std::sin(v * freq)));
    }
  }
  return Tensor<T>::from_vector({1, values.size() * channels}, std::move(out));
}

template <class T>
Tensor<T> embed_mlp(const Tensor<T>& features, const FitParams<T>& p, const std::string& name) {
  return linear(gelu(linear(features, p, name + ".fc1")), p, name + ".fc2");
}

template <class T>
void check_input(const Tensor<T>& x, const FitConfig& cfg, std::size_t channels, const char* op) {
  const Shape want{cfg.frames, cfg.height, cfg.width, channels};
  if (x.shape() != want) {
    throw TensorError(std::string(op) + ": expected " + shape_str(want) + ", got " + shape_str(x.shape()));
  }
}

}  // namespace

template <class T>
Tensor<T> extract_patches(const Tensor<T>& x, const FitConfig& cfg) {
  cfg.validate();
  const std::size_t ch = x.rank() == 4 ? x.dim(3) : 0;
  check_input(x, cfg, ch, "extract_patches");
  const std::size_t gh = cfg.grid_h(), gw = cfg.grid_w();
  // (T, gh, ph, gw, pw, C) -> (T, gh, gw, ph, pw, C)
  auto r = reshape(x, {cfg.frames, gh, cfg.patch.h, gw, cfg.patch.w, ch});
  r = permute(r, {0, 1, 3, 2, 4, 5});
  return reshape(r, {cfg.frames * gh * gw, cfg.patch.h * cfg.patch.w * ch});
}

template <class T>
Tensor<T> assemble_patches(const Tensor<T>& tokens, const FitConfig& cfg, std::size_t channels) {
  cfg.validate();
  const std::size_t gh = cfg.grid_h(), gw = cfg.grid_w();
  const Shape want{cfg.patch_tokens(), cfg.patch.h * cfg.patch.w * channels};
  if (tokens.shape() != want) {
    throw TensorError("assemble_patches: expected " + shape_str(want) + ", got " + shape_str(tokens.shape()));
  }
  auto r = reshape(tokens, {cfg.frames, gh, gw, cfg.patch.h, cfg.patch.w, channels});
  r = permute(r, {0, 1, 3, 2, 4, 5});
  return reshape(r, {cfg.frames, cfg.height, cfg.width, channels});
}

template <class T>
Tensor<T> patchify(const Tensor<T>& x, const FitParams<T>& params, const FitConfig& cfg) {
  check_input(x, cfg, cfg.channels + cfg.lowres_channels, "patchify");
  return add(linear(extract_patches(x, cfg), params, "patch_embed"), params.at("pos_embed"));
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, const FitParams<T>& params, const FitConfig& cfg) {
  auto out = linear(norm(tokens, params, "out.norm"), params, "out.proj");
  return assemble_patches(out, cfg, cfg.channels);
}

template <class T>
Tensor<T> group_tokens(const Tensor<T>& tokens, const FitConfig& cfg) {
  cfg.validate();
  if (tokens.rank() != 2 || tokens.dim(0) != cfg.patch_tokens()) {
    throw TensorError("group_tokens: expected (" + std::to_string(cfg.patch_tokens()) + ", C), got " +
                      shape_str(tokens.shape()));
  }
  const std::size_t c = tokens.dim(1);
  const std::size_t nh = cfg.grid_h() / cfg.group.h, nw = cfg.grid_w() / cfg.group.w;
  // (T, nh, gh, nw, gw, C) -> (nh, nw, T, gh, gw, C)
  auto r = reshape(tokens, {cfg.grid_t(), nh, cfg.group.h, nw, cfg.group.w, c});
  r = permute(r, {1, 3, 0, 2, 4, 5});
  return reshape(r, {cfg.group_count(), cfg.tokens_per_group(), c});
}

template <class T>
Tensor<T> ungroup_tokens(const Tensor<T>& grouped, const FitConfig& cfg) {
  cfg.validate();
  if (grouped.rank() != 3 || grouped.dim(0) != cfg.group_count() || grouped.dim(1) != cfg.tokens_per_group()) {
    throw TensorError("ungroup_tokens: unexpected shape " + shape_str(grouped.shape()));
  }
  const std::size_t c = grouped.dim(2);
  const std::size_t nh = cfg.grid_h() / cfg.group.h, nw = cfg.grid_w() / cfg.group.w;
  auto r = reshape(grouped, {nh, nw, cfg.grid_t(), cfg.group.h, cfg.group.w, c});
  r = permute(r, {2, 0, 3, 1, 4, 5});
  return reshape(r, {cfg.patch_tokens(), c});
}

template <class T>
Tensor<T> build_cond_tokens(const FitConditioning& cond, const FitParams<T>& params, const FitConfig& cfg) {
  if (!(cond.sigma > 0)) throw std::invalid_argument("conditioning sigma must be positive");
  if (cond.cond_id > cfg.n_classes) throw std::out_of_range("condition id out of range");
  if (!(cond.orig_height > 0) || !(cond.orig_width > 0)) {
    throw std::invalid_argument("original resolution must be positive");
  }
  const std::size_t e = cfg.embed_channels;
  std::vector<Tensor<T>> tokens;
  tokens.push_back(embed_mlp(sinusoidal<T>({std::log(cond.sigma) / 4}, e), params, "cond.sigma"));
  if (std::isinf(cond.framerate)) {
    tokens.push_back(params.at("cond.framerate.infinite"));
  } else {
    if (!(cond.framerate > 0)) throw std::invalid_argument("frame rate must be positive or infinite");
    tokens.push_back(embed_mlp(sinusoidal<T>({std::log(cond.framerate) / 4}, e), params, "cond.framerate"));
  }
  tokens.push_back(embed_mlp(
      sinusoidal<T>({std::log(cond.orig_height) / 4, std::log(cond.orig_width) / 4}, e), params,
      "cond.resolution"));
  tokens.push_back(gather_rows(params.at("cond.class_table"), {cond.cond_id}));
  if (cfg.lowres_channels > 0) {
    if (!cond.aug_sigma) throw std::invalid_argument("cascade model needs an augmentation sigma");
    tokens.push_back(embed_mlp(sinusoidal<T>({*cond.aug_sigma}, e), params, "cond.aug_sigma"));
  } else if (cond.aug_sigma) {
    throw std::invalid_argument("augmentation sigma given to a model without low-res input");
  }
  return reshape(concat(tokens, 0), {1, tokens.size(), cfg.cond_channels});
}

template <class T>
Tensor<T> group_read(const Tensor<T>& patches, const Tensor<T>& latents, const FitParams<T>& params,
                     const FitConfig& cfg, std::size_t block) {
  return cross_attention_residual(latents, patches, params, block_prefix(block) + "read",
                                  cfg.latent_head_channels);
}

template <class T>
BlockState<T> fit_block(const BlockState<T>& in, const Tensor<T>& cond, const FitParams<T>& params,
                        const FitConfig& cfg, std::size_t block, const ForwardOptions& opts) {
  const std::size_t g = cfg.group_count(), lg = cfg.latents_per_group(), cl = cfg.latent_channels;
  const Shape patch_shape{g, cfg.tokens_per_group(), cfg.patch_channels};
  const Shape latent_shape{g, lg, cl};
  if (in.patches.shape() != patch_shape || in.latents.shape() != latent_shape) {
    throw TensorError("fit_block: got patches " + shape_str(in.patches.shape()) + " and latents " +
                      shape_str(in.latents.shape()));
  }
  const auto pre = block_prefix(block);
  const std::size_t hl = cfg.latent_head_channels;

  auto lat = reshape(in.latents, {1, cfg.latent_count, cl});
  lat = cross_attention_residual(lat, cond, params, pre + "cond_read", hl);

  lat = group_read(in.patches, reshape(lat, latent_shape), params, cfg, block);
  lat = feed_forward_residual(lat, params, pre + "read_ff");

  lat = reshape(lat, {1, cfg.latent_count, cl});
  for (std::size_t j = 0; j < cfg.global_layers; ++j) {
    const auto name = pre + "global." + std::to_string(j);
    lat = self_attention_residual(lat, params, name + ".attn", hl);
    lat = feed_forward_residual(lat, params, name + ".ff", cfg.dropout, opts);
  }
  lat = reshape(lat, latent_shape);

  auto patches = cross_attention_residual(in.patches, lat, params, pre + "write", cfg.patch_head_channels);
  patches = feed_forward_residual(patches, params, pre + "write_ff");
  return {patches, lat};
}

template <class T>
FitOutput<T> fit_forward(const Tensor<T>& x_in, const FitConditioning& cond,
                         const std::optional<Tensor<T>>& prev_latents, const FitParams<T>& params,
                         const FitConfig& cfg, const ForwardOptions& opts) {
  cfg.validate();
  const std::size_t cl = cfg.latent_channels;
  auto tokens = group_tokens(patchify(x_in, params, cfg), cfg);
  const auto cond_tokens = build_cond_tokens(cond, params, cfg);

  auto lat = params.at("latents.init");
  if (prev_latents) {
    const Shape want{cfg.latent_count, cl};
    if (prev_latents->shape() != want) {
      throw TensorError("fit_forward: prev_latents must be " + shape_str(want) + ", got " +
                        shape_str(prev_latents->shape()));
    }
    const auto adapted = matmul(norm(prev_latents->detach(), params, "self_cond.norm"),
                                params.at("self_cond.proj.weight"));
    lat = add(lat, adapted);
  }

  BlockState<T> state{tokens, reshape(lat, {cfg.group_count(), cfg.latents_per_group(), cl})};
  for (std::size_t b = 0; b < cfg.blocks; ++b) state = fit_block(state, cond_tokens, params, cfg, b, opts);

  FitOutput<T> out;
  out.f_out = unpatchify(ungroup_tokens(state.patches, cfg), params, cfg);
  out.latents = reshape(state.latents, {cfg.latent_count, cl});
  return out;
}

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t height, std::size_t width) {
  if (x.rank() != 4) throw TensorError("upsample_nearest: expected (T, h, w, C)");
  const std::size_t t = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h == 0 || w == 0 || height % h || width % w) {
    throw std::invalid_argument("upsample_nearest: target size must be a multiple of the input size");
  }
  const std::size_t sh = height / h, sw = width / w;
  std::vector<std::size_t> rows;
  rows.reserve(t * height * width);
  for (std::size_t f = 0; f < t; ++f)
    for (std::size_t r = 0; r < height; ++r)
      for (std::size_t col = 0; col < width; ++col) rows.push_back((f * h + r / sh) * w + col / sw);
  return reshape(gather_rows(reshape(x, {t * h * w, c}), rows), {t, height, width, c});
}

template <class T>
CascadeInput<T> cascade_condition(const Tensor<T>& x_in, const Tensor<T>& low_res, double aug_sigma,
                                  std::mt19937_64& rng) {
  if (x_in.rank() != 4 || low_res.rank() != 4) throw TensorError("cascade_condition: expected rank-4 videos");
  if (low_res.dim(0) != x_in.dim(0)) throw TensorError("cascade_condition: frame counts differ");
  if (aug_sigma < 0) throw std::invalid_argument("cascade_condition: aug_sigma must be >= 0");
  auto up = upsample_nearest(low_res, x_in.dim(1), x_in.dim(2));
  if (aug_sigma > 0) up = add(up, scale(standard_normal<T>(up.shape(), rng), static_cast<T>(aug_sigma)));
  return {concat<T>({x_in, up}, 3), aug_sigma};
}

#define SNAPDIFF_INSTANTIATE(T)                                                                     \
  template class FitParams<T>;                                                                      \
  template FitParams<T> init_fit_params<T>(const FitConfig&, std::uint64_t);                        \
  template Tensor<T> extract_patches(const Tensor<T>&, const FitConfig&);                           \
  template Tensor<T> assemble_patches(const Tensor<T>&, const FitConfig&, std::size_t);             \
  template Tensor<T> patchify(const Tensor<T>&, const FitParams<T>&, const FitConfig&);             \
  template Tensor<T> unpatchify(const Tensor<T>&, const FitParams<T>&, const FitConfig&);           \
  template Tensor<T> group_tokens(const Tensor<T>&, const FitConfig&);                              \
  template Tensor<T> ungroup_tokens(const Tensor<T>&, const FitConfig&);                            \
  template Tensor<T> build_cond_tokens(const FitConditioning&, const FitParams<T>&, const FitConfig&); \
  template Tensor<T> group_read(const Tensor<T>&, const Tensor<T>&, const FitParams<T>&,            \
                                const FitConfig&, std::size_t);                                     \
  template BlockState<T> fit_block(const BlockState<T>&, const Tensor<T>&, const FitParams<T>&,     \
                                   const FitConfig&, std::size_t, const ForwardOptions&);           \
  template FitOutput<T> fit_forward(const Tensor<T>&, const FitConditioning&,                       \
                                    const std::optional<Tensor<T>>&, const FitParams<T>&,           \
                                    const FitConfig&, const ForwardOptions&);                       \
  template Tensor<T> upsample_nearest(const Tensor<T>&, std::size_t, std::size_t);                  \
  template CascadeInput<T> cascade_condition(const Tensor<T>&, const Tensor<T>&, double,            \
                                             std::mt19937_64&);

SNAPDIFF_INSTANTIATE(float)
SNAPDIFF_INSTANTIATE(double)
#undef SNAPDIFF_INSTANTIATE

template FitParams<double> FitParams<float>::cast<double>() const;
template FitParams<float> FitParams<double>::cast<float>() const;
template FitParams<float> FitParams<float>::cast<float>() const;
template FitParams<double> FitParams<double>::cast<double>() const;

}  // namespace snapdiff
