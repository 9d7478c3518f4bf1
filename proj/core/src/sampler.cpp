#include "snapdiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace snapdiff {

std::string to_string(GuidanceMode m) { return m == GuidanceMode::constant ? "constant" : "oscillating"; }

GuidanceMode parse_guidance_mode(const std::string& text) {
  if (text == "constant") return GuidanceMode::constant;
  if (text == "oscillating") return GuidanceMode::oscillating;
  throw std::invalid_argument("unknown guidance mode '" + text + "'");
}

void SamplerConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
  if (!(rho > 0)) throw std::invalid_argument("sampler: rho must be positive");
  if (!(guidance >= 0)) throw std::invalid_argument("sampler: guidance weight must be >= 0");
  if (!(threshold_percentile > 0 && threshold_percentile <= 100)) {
    throw std::invalid_argument("sampler: threshold percentile must lie in (0, 100]");
  }
  if (!(recon_weight >= 0)) throw std::invalid_argument("sampler: reconstruction weight must be >= 0");
}

template <class T>
double GaussianDenoiser<T>::gain(double sigma, const DiffusionConfig& dcfg) {
  const double sd2 = dcfg.sigma_data * dcfg.sigma_data;
  const double si = dcfg.sigma_in;
  return si * sd2 / (sd2 + si * si * sigma * sigma);
}

template <class T>
Tensor<T> GaussianDenoiser<T>::denoise(const Tensor<T>& x_sigma, double sigma, bool) {
  return scale(x_sigma, static_cast<T>(gain(sigma, dcfg_)));
}

template <class T>
FitDenoiser<T>::FitDenoiser(const FitParams<T>& params, FitConfig cfg, DiffusionConfig dcfg,
                            std::size_t cond_id, bool self_condition)
    : params_(params), cfg_(cfg), dcfg_(dcfg), cond_id_(cond_id), self_condition_(self_condition) {
  cfg_.validate();
  dcfg_.validate();
  if (cond_id > cfg_.n_classes) throw std::out_of_range("condition id out of range");
}

template <class T>
void FitDenoiser<T>::begin_trajectory(double framerate) {
  framerate_ = framerate;
  latents_[0].reset();
  latents_[1].reset();
}

template <class T>
Tensor<T> FitDenoiser<T>::denoise(const Tensor<T>& x_sigma, double sigma, bool conditional) {
  NoGradGuard no_grad;
  const auto c = scalings(sigma, dcfg_);
  FitConditioning cond;
  cond.sigma = sigma;
  cond.framerate = framerate_;
  cond.orig_height = static_cast<double>(cfg_.height);
  cond.orig_width = static_cast<double>(cfg_.width);
  cond.cond_id = conditional ? cond_id_ : 0;
  auto& slot = latents_[conditional ? 1 : 0];
  const std::optional<Tensor<T>> prev = self_condition_ ? slot : std::nullopt;
  auto out = fit_forward(scale(x_sigma, static_cast<T>(c.c_in)), cond, prev, params_, cfg_);
  slot = out.latents;
  ++evaluations_;
  return snapdiff::denoise(out.f_out, x_sigma, sigma, dcfg_);
}

template <class T>
bool FrameMask<T>::empty() const {
  return std::none_of(frames.begin(), frames.end(), [](bool b) { return b; });
}

std::vector<double> karras_schedule(std::size_t steps, double sigma_min, double sigma_max, double rho) {
  if (steps < 1) throw std::invalid_argument("karras_schedule: steps must be >= 1");
  if (!(sigma_min > 0) || !(sigma_min < sigma_max)) {
    throw std::invalid_argument("karras_schedule: need 0 < sigma_min < sigma_max");
  }
  std::vector<double> s;
  s.reserve(steps + 1);
  if (steps == 1) {
    s.push_back(sigma_max);
  } else {
    const double a = std::pow(sigma_max, 1.0 / rho), b = std::pow(sigma_min, 1.0 / rho);
    for (std::size_t i = 0; i < steps; ++i) {
      const double f = static_cast<double>(i) / static_cast<double>(steps - 1);
      s.push_back(std::pow(a + f * (b - a), rho));
    }
    s.front() = sigma_max;
    s[steps - 1] = sigma_min;
  }
  s.push_back(0.0);
  return s;
}

std::vector<double> karras_schedule(const SamplerConfig& cfg, const DiffusionConfig& dcfg) {
  return karras_schedule(cfg.steps, dcfg.sigma_min, dcfg.sigma_max, cfg.rho);
}

template <class T>
Tensor<T> cfg_combine(const Tensor<T>& d_cond, const Tensor<T>& d_uncond, double g) {
  if (d_cond.shape() != d_uncond.shape()) throw TensorError("cfg_combine: shape mismatch");
  return add(d_uncond, scale(sub(d_cond, d_uncond), static_cast<T>(g)));
}

template <class T>
Tensor<T> dynamic_threshold(const Tensor<T>& x0, double percentile) {
  if (!(percentile > 0 && percentile <= 100)) {
    throw std::invalid_argument("dynamic_threshold: percentile must lie in (0, 100]");
  }
  if (x0.size() == 0) return x0;
  std::vector<double> mags(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) mags[i] = std::abs(static_cast<double>(x0[i]));
  std::sort(mags.begin(), mags.end());
  const double rank = percentile / 100.0 * static_cast<double>(mags.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, mags.size() - 1);
  const double q = mags[lo] + (rank - static_cast<double>(lo)) * (mags[hi] - mags[lo]);
  const double s = std::max(1.0, q);
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    out[i] = static_cast<T>(std::clamp(static_cast<double>(x0[i]), -s, s) / s);
  }
  return Tensor<T>::from_vector(x0.shape(), std::move(out));
}

double guidance_weight_at(std::size_t step, const SamplerConfig& cfg) {
  if (step >= cfg.steps) throw std::out_of_range("guidance_weight_at: step past the schedule");
  if (cfg.guidance_mode == GuidanceMode::constant) return cfg.guidance;
  if (step < cfg.steps / 4) return cfg.guidance;
  return step % 2 == 0 ? cfg.guidance : 1.0;
}

template <class T>
Tensor<T> reconstruction_guide(const Tensor<T>& d, const FrameMask<T>& mask, double w_r) {
  if (mask.frames.empty() || w_r == 0.0) return d;
  if (d.rank() == 0 || mask.frames.size() != d.dim(0)) {
    throw TensorError("reconstruction_guide: mask length must equal the frame count");
  }
  if (mask.known.shape() != d.shape()) throw TensorError("reconstruction_guide: known frames have the wrong shape");
  const std::size_t per = d.size() / d.dim(0);
  std::vector<T> out = d.values();
  const T w = static_cast<T>(w_r);
  for (std::size_t t = 0; t < mask.frames.size(); ++t) {
    if (!mask.frames[t]) continue;
    for (std::size_t i = t * per; i < (t + 1) * per; ++i) {
      out[i] = w_r == 1.0 ? mask.known[i] : out[i] + w * (mask.known[i] - out[i]);
    }
  }
  return Tensor<T>::from_vector(d.shape(), std::move(out));
}

template <class T>
Tensor<T> guided_denoise(Denoiser<T>& model, const Tensor<T>& x, double sigma, std::size_t step,
                         const SamplerConfig& cfg, const FrameMask<T>* mask) {
  const double g = guidance_weight_at(step, cfg);
  Tensor<T> d;
  if (g == 0.0) {
    d = model.denoise(x, sigma, false);
  } else {
    d = model.denoise(x, sigma, true);
    if (g != 1.0) d = cfg_combine(d, model.denoise(x, sigma, false), g);
  }
  if (cfg.dynamic_threshold) d = dynamic_threshold(d, cfg.threshold_percentile);
  if (mask) d = reconstruction_guide(d, *mask, cfg.recon_weight);
  return d;
}

template <class T>
Tensor<T> heun_step(Denoiser<T>& model, const Tensor<T>& x, double sigma, double sigma_next,
                    std::size_t step, const SamplerConfig& cfg, const DiffusionConfig& dcfg,
                    const FrameMask<T>* mask) {
  if (!(sigma > 0)) throw std::invalid_argument("heun_step: sigma must be positive");
  const T inv_in = static_cast<T>(1.0 / dcfg.sigma_in);
  const auto d = scale(sub(x, scale(guided_denoise(model, x, sigma, step, cfg, mask), inv_in)),
                       static_cast<T>(1.0 / sigma));
  const T h = static_cast<T>(sigma_next - sigma);
  auto x_next = add(x, scale(d, h));
  if (sigma_next > 0) {
    const auto d2 = scale(sub(x_next, scale(guided_denoise(model, x_next, sigma_next, step, cfg, mask), inv_in)),
                          static_cast<T>(1.0 / sigma_next));
    x_next = add(x, scale(add(d, d2), static_cast<T>(0.5 * (sigma_next - sigma))));
  }
  return x_next;
}

template <class T>
Tensor<T> sample_from_noise(Denoiser<T>& model, const Tensor<T>& noise, const SamplerConfig& cfg,
                            const DiffusionConfig& dcfg, const FrameMask<T>* mask, double framerate) {
  cfg.validate();
  dcfg.validate();
  NoGradGuard no_grad;
  const auto sigmas = karras_schedule(cfg, dcfg);
  model.begin_trajectory(framerate);
  auto x = scale(noise, static_cast<T>(sigmas.front()));
  for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) {
    x = heun_step(model, x, sigmas[i], sigmas[i + 1], i, cfg, dcfg, mask);
  }
  return scale(x, static_cast<T>(dcfg.sigma_in));
}

template <class T>
Tensor<T> sample(Denoiser<T>& model, const Shape& shape, const SamplerConfig& cfg, const DiffusionConfig& dcfg,
                 const FrameMask<T>* mask, double framerate) {
  std::mt19937_64 rng(cfg.seed);
  return sample_from_noise(model, standard_normal<T>(shape, rng), cfg, dcfg, mask, framerate);
}

namespace {

void validate_hierarchy(const HierarchyConfig& h) {
  if (h.levels.empty()) throw std::invalid_argument("hierarchy: need at least one level");
  if (h.window < 1) throw std::invalid_argument("hierarchy: window must be >= 1");
  if (h.total_frames < 1) throw std::invalid_argument("hierarchy: total_frames must be >= 1");
  if (h.levels.front() < 1) throw std::invalid_argument("hierarchy: rates must be positive");
  for (std::size_t i = 1; i < h.levels.size(); ++i) {
    if (h.levels[i] <= h.levels[i - 1]) throw std::invalid_argument("hierarchy: rates must be strictly increasing");
    if (h.levels[i] % h.levels[i - 1] != 0) throw std::invalid_argument("hierarchy: frame grids do not nest");
  }
}

}  // namespace

std::vector<std::size_t> level_positions(const HierarchyConfig& h, std::size_t level) {
  validate_hierarchy(h);
  if (level >= h.levels.size()) throw std::out_of_range("hierarchy: level index out of range");
  const std::size_t stride = h.levels.back() / h.levels[level];
  std::vector<std::size_t> pos;
  for (std::size_t p = 0; p < h.total_frames; p += stride) pos.push_back(p);
  return pos;
}

template <class T>
Tensor<T> hierarchical_generate(Denoiser<T>& model, const HierarchyConfig& h, const Shape& frame_shape,
                                const SamplerConfig& cfg, const DiffusionConfig& dcfg,
                                std::vector<HierarchyPass<T>>* trace) {
  validate_hierarchy(h);
  cfg.validate();
  const std::size_t per = shape_size(frame_shape);
  Shape window_shape{h.window};
  window_shape.insert(window_shape.end(), frame_shape.begin(), frame_shape.end());

  std::vector<T> video(h.total_frames * per, T(0));
  std::vector<bool> have(h.total_frames, false);
  std::mt19937_64 rng(cfg.seed);

  for (std::size_t level = 0; level < h.levels.size(); ++level) {
    const auto pos = level_positions(h, level);
    if (pos.size() < h.window) {
      throw std::invalid_argument("hierarchy: level " + std::to_string(level) + " has fewer frames than one window");
    }
    const double framerate = h.base_framerate * static_cast<double>(h.levels[level]);
    std::size_t start = 0;
    while (true) {
      const std::size_t end = std::min(start + h.window, pos.size());
      start = end - h.window;
      FrameMask<T> mask;
      mask.frames.resize(h.window);
      std::vector<T> known(h.window * per, T(0));
      for (std::size_t k = 0; k < h.window; ++k) {
        const std::size_t p = pos[start + k];
        mask.frames[k] = have[p];
        if (have[p]) std::copy_n(video.begin() + p * per, per, known.begin() + k * per);
      }
      mask.known = Tensor<T>::from_vector(window_shape, std::move(known));
      const bool all_known = std::all_of(mask.frames.begin(), mask.frames.end(), [](bool b) { return b; });
      if (!all_known) {
        const auto noise = standard_normal<T>(window_shape, rng);
        const auto out = sample_from_noise(model, noise, cfg, dcfg, mask.empty() ? nullptr : &mask, framerate);
        for (std::size_t k = 0; k < h.window; ++k) {
          const std::size_t p = pos[start + k];
          if (have[p]) continue;
          std::copy_n(out.values().begin() + k * per, per, video.begin() + p * per);
          have[p] = true;
        }
        if (trace) {
          std::vector<std::size_t> window_pos(pos.begin() + start, pos.begin() + start + h.window);
          trace->push_back({level, std::move(window_pos), mask, out});
        }
      }
      if (end == pos.size()) break;
      start = end - 1;
    }
  }
  Shape out_shape{h.total_frames};
  out_shape.insert(out_shape.end(), frame_shape.begin(), frame_shape.end());
  return Tensor<T>::from_vector(out_shape, std::move(video));
}

#define SNAPDIFF_INSTANTIATE(T)                                                                       \
  template class GaussianDenoiser<T>;                                                                 \
  template class FitDenoiser<T>;                                                                      \
  template struct FrameMask<T>;                                                                       \
  template Tensor<T> cfg_combine(const Tensor<T>&, const Tensor<T>&, double);                         \
  template Tensor<T> dynamic_threshold(const Tensor<T>&, double);                                     \
  template Tensor<T> reconstruction_guide(const Tensor<T>&, const FrameMask<T>&, double);             \
  template Tensor<T> guided_denoise(Denoiser<T>&, const Tensor<T>&, double, std::size_t,              \
                                    const SamplerConfig&, const FrameMask<T>*);                       \
  template Tensor<T> heun_step(Denoiser<T>&, const Tensor<T>&, double, double, std::size_t,           \
                               const SamplerConfig&, const DiffusionConfig&, const FrameMask<T>*);    \
  template Tensor<T> sample_from_noise(Denoiser<T>&, const Tensor<T>&, const SamplerConfig&,          \
                                       const DiffusionConfig&, const FrameMask<T>*, double);          \
  template Tensor<T> sample(Denoiser<T>&, const Shape&, const SamplerConfig&, const DiffusionConfig&, \
                            const FrameMask<T>*, double);                                             \
  template Tensor<T> hierarchical_generate(Denoiser<T>&, const HierarchyConfig&, const Shape&,        \
                                           const SamplerConfig&, const DiffusionConfig&,              \
                                           std::vector<HierarchyPass<T>>*);

SNAPDIFF_INSTANTIATE(float)
SNAPDIFF_INSTANTIATE(double)
#undef SNAPDIFF_INSTANTIATE

}  // namespace snapdiff
