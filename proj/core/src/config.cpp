#include "snapdiff/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <type_traits>

namespace snapdiff {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class V>
V parse_value(const std::string& s);

template <>
double parse_value<double>(const std::string& s) {
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError("expected a finite number, got '" + s + "'");
  }
  return v;
}

template <>
std::uint64_t parse_value<std::uint64_t>(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

template <>
bool parse_value<bool>(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

template <>
Variant parse_value<Variant>(const std::string& s) {
  try {
    return parse_variant(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

template <>
GuidanceMode parse_value<GuidanceMode>(const std::string& s) {
  try {
    return parse_guidance_mode(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

template <>
OptimizerMode parse_value<OptimizerMode>(const std::string& s) {
  try {
    return parse_optimizer_mode(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

template <>
std::vector<std::size_t> parse_value<std::vector<std::size_t>>(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_value<std::uint64_t>(trim(item)));
  if (out.empty()) throw ConfigError("expected a comma-separated list of integers");
  return out;
}

std::string format_value(double v) { return format_double(v); }
std::string format_value(std::size_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(Variant v) { return to_string(v); }
std::string format_value(GuidanceMode v) { return to_string(v); }
std::string format_value(OptimizerMode v) { return to_string(v); }
std::string format_value(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  ConfigKey key;
  std::function<std::string(RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class Ref>
Field field(const char* name, const char* doc, Ref ref) {
  using V = std::remove_cvref_t<decltype(ref(std::declval<RunConfig&>()))>;
  using P = std::conditional_t<std::is_same_v<V, std::size_t>, std::uint64_t, V>;
  return {{name, doc},
          [ref](RunConfig& c) { return format_value(ref(c)); },
          [ref](RunConfig& c, const std::string& s) { ref(c) = static_cast<V>(parse_value<P>(s)); }};
}

#define SNAPDIFF_FIELD(name, doc, expr) field(name, doc, [](RunConfig& c) -> auto& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      SNAPDIFF_FIELD("diffusion.sigma_data", "data standard deviation", c.diffusion.sigma_data),
      SNAPDIFF_FIELD("diffusion.sigma_in", "input scaling factor, s*sqrt(T)", c.diffusion.sigma_in),
      SNAPDIFF_FIELD("diffusion.sigma_min", "smallest noise level", c.diffusion.sigma_min),
      SNAPDIFF_FIELD("diffusion.sigma_max", "largest noise level", c.diffusion.sigma_max),
      SNAPDIFF_FIELD("diffusion.variant", "snap_video or edm", c.diffusion.variant),
      SNAPDIFF_FIELD("diffusion.p_mean", "mean of log sigma during training", c.diffusion.train_noise.mean),
      SNAPDIFF_FIELD("diffusion.p_std", "std of log sigma during training", c.diffusion.train_noise.std),
      SNAPDIFF_FIELD("fit.frames", "frames per sample", c.fit.frames),
      SNAPDIFF_FIELD("fit.height", "frame height", c.fit.height),
      SNAPDIFF_FIELD("fit.width", "frame width", c.fit.width),
      SNAPDIFF_FIELD("fit.channels", "pixel channels", c.fit.channels),
      SNAPDIFF_FIELD("fit.lowres_channels", "extra low-resolution input channels", c.fit.lowres_channels),
      SNAPDIFF_FIELD("fit.patch_h", "patch height", c.fit.patch.h),
      SNAPDIFF_FIELD("fit.patch_w", "patch width", c.fit.patch.w),
      SNAPDIFF_FIELD("fit.group_t", "group extent in frames (must equal fit.frames)", c.fit.group.t),
      SNAPDIFF_FIELD("fit.group_h", "group height in patches", c.fit.group.h),
      SNAPDIFF_FIELD("fit.group_w", "group width in patches", c.fit.group.w),
      SNAPDIFF_FIELD("fit.patch_channels", "patch token width", c.fit.patch_channels),
      SNAPDIFF_FIELD("fit.latent_count", "total latent tokens", c.fit.latent_count),
      SNAPDIFF_FIELD("fit.latent_channels", "latent token width", c.fit.latent_channels),
      SNAPDIFF_FIELD("fit.blocks", "FIT blocks", c.fit.blocks),
      SNAPDIFF_FIELD("fit.global_layers", "latent self-attention layers per block", c.fit.global_layers),
      SNAPDIFF_FIELD("fit.patch_head_channels", "channels per patch attention head", c.fit.patch_head_channels),
      SNAPDIFF_FIELD("fit.latent_head_channels", "channels per latent attention head", c.fit.latent_head_channels),
      SNAPDIFF_FIELD("fit.cond_channels", "conditioning token width", c.fit.cond_channels),
      SNAPDIFF_FIELD("fit.embed_channels", "sinusoidal embedding width", c.fit.embed_channels),
      SNAPDIFF_FIELD("fit.ff_mult", "feed-forward expansion", c.fit.ff_mult),
      SNAPDIFF_FIELD("fit.n_classes", "condition classes (0 is the null class)", c.fit.n_classes),
      SNAPDIFF_FIELD("fit.self_cond_prob", "probability of a self-conditioning pass", c.fit.self_cond_prob),
      SNAPDIFF_FIELD("fit.dropout", "dropout after latent self-attention", c.fit.dropout),
      SNAPDIFF_FIELD("train.steps", "length of the learning-rate schedule", c.train.steps),
      SNAPDIFF_FIELD("train.batch_videos", "videos per batch", c.train.batch_videos),
      SNAPDIFF_FIELD("train.batch_images", "images per batch", c.train.batch_images),
      SNAPDIFF_FIELD("train.lr", "peak learning rate", c.train.lr),
      SNAPDIFF_FIELD("train.warmup", "warmup steps", c.train.warmup),
      SNAPDIFF_FIELD("train.ema_halflife", "EMA halflife in steps", c.train.ema_halflife),
      SNAPDIFF_FIELD("train.label_dropout", "probability of dropping the class label", c.train.label_dropout),
      SNAPDIFF_FIELD("train.optimizer", "lamb or adam", c.train.optimizer.mode),
      SNAPDIFF_FIELD("train.beta1", "first moment decay", c.train.optimizer.beta1),
      SNAPDIFF_FIELD("train.beta2", "second moment decay", c.train.optimizer.beta2),
      SNAPDIFF_FIELD("train.eps", "optimizer epsilon", c.train.optimizer.eps),
      SNAPDIFF_FIELD("train.weight_decay", "weight decay", c.train.optimizer.weight_decay),
      SNAPDIFF_FIELD("train.clip_norm", "global gradient norm limit, 0 disables", c.train.optimizer.clip_norm),
      SNAPDIFF_FIELD("train.max_trust_ratio", "LAMB trust ratio upper clamp", c.train.optimizer.max_trust_ratio),
      SNAPDIFF_FIELD("train.seed", "initialization and noise seed", c.train.seed),
      SNAPDIFF_FIELD("train.checkpoint_every", "checkpoint interval in steps, 0 for end only", c.checkpoint_every),
      SNAPDIFF_FIELD("data.seed", "dataset seed", c.data.seed),
      SNAPDIFF_FIELD("data.n_videos", "videos in the pool", c.data.n_videos),
      SNAPDIFF_FIELD("data.n_images", "images in the pool", c.data.n_images),
      SNAPDIFF_FIELD("data.base_framerate", "frame rate of unsubsampled videos", c.data.base_framerate),
      SNAPDIFF_FIELD("data.rates", "frame subsampling factors", c.data.rate_choices),
      SNAPDIFF_FIELD("sampler.steps", "sampling steps", c.sampler.steps),
      SNAPDIFF_FIELD("sampler.rho", "schedule exponent", c.sampler.rho),
      SNAPDIFF_FIELD("sampler.guidance", "classifier-free guidance weight", c.sampler.guidance),
      SNAPDIFF_FIELD("sampler.guidance_mode", "constant or oscillating", c.sampler.guidance_mode),
      SNAPDIFF_FIELD("sampler.dynamic_threshold", "enable dynamic thresholding", c.sampler.dynamic_threshold),
      SNAPDIFF_FIELD("sampler.threshold_percentile", "thresholding percentile", c.sampler.threshold_percentile),
      SNAPDIFF_FIELD("sampler.recon_weight", "reconstruction guidance weight", c.sampler.recon_weight),
      SNAPDIFF_FIELD("sampler.seed", "sampling seed", c.sampler.seed),
  };
  return f;
}

#undef SNAPDIFF_FIELD

}  // namespace

RunConfig RunConfig::toy() {
  RunConfig c;
  c.fit = FitConfig::toy();
  c.diffusion.sigma_in = input_scale_for(c.fit.frames, 1.0);
  c.sampler.steps = 16;
  c.finalize();
  return c;
}

void RunConfig::finalize() {
  data.frames = fit.frames;
  data.height = fit.height;
  data.width = fit.width;
  data.n_classes = fit.n_classes;
  try {
    diffusion.validate();
    fit.validate();
    train.validate();
    data.validate();
    sampler.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = "line " + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const Field* f = nullptr;
    for (const auto& candidate : fields()) {
      if (candidate.key.name == key) f = &candidate;
    }
    if (!f) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "repeated key '" + key + "'");
    try {
      f->set(base, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  base.finalize();
  return base;
}

RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string serialize_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::string out;
  for (const auto& f : fields()) out += f.key.name + " = " + f.get(copy) + "\n";
  return out;
}

}  // namespace snapdiff
