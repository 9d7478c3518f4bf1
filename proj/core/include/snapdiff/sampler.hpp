#pragma once

// Deterministic second-order sampler for the input-scaled process.
//
// The trajectory lives in the scaled domain (x_sigma = x / sigma_in + sigma eps),
// so every derivative divides the denoised estimate by sigma_in, and the final
// sample is multiplied back by sigma_in. With sigma_in = 1 this is the
// standard EDM Heun sampler.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "snapdiff/diffusion.hpp"
#include "snapdiff/fit.hpp"
#include "snapdiff/tensor.hpp"

namespace snapdiff {

enum class GuidanceMode { constant, oscillating };

std::string to_string(GuidanceMode m);
GuidanceMode parse_guidance_mode(const std::string& text);

struct SamplerConfig {
  std::size_t steps = 64;
  double rho = 7.0;
  double guidance = 1.0;
  GuidanceMode guidance_mode = GuidanceMode::constant;
  bool dynamic_threshold = false;
  double threshold_percentile = 99.5;
  double recon_weight = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

// Denoised estimates of the clean data x (not x / sigma_in).
template <class T>
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Tensor<T> denoise(const Tensor<T>& x_sigma, double sigma, bool conditional) = 0;
  // Called once before every trajectory; resets per-trajectory state.
  virtual void begin_trajectory(double framerate) { (void)framerate; }
};

// Exact posterior mean for data ~ N(0, sigma_data^2 I).
template <class T>
class GaussianDenoiser final : public Denoiser<T> {
 public:
  explicit GaussianDenoiser(DiffusionConfig dcfg) : dcfg_(dcfg) {}
  Tensor<T> denoise(const Tensor<T>& x_sigma, double sigma, bool conditional) override;
  static double gain(double sigma, const DiffusionConfig& dcfg);

 private:
  DiffusionConfig dcfg_;
};

// Wraps a FIT network: applies c_in, runs the network, combines with c_skip
// and c_out, and threads final latents from one evaluation into the next as
// self-conditioning (separately per guidance branch).
template <class T>
class FitDenoiser final : public Denoiser<T> {
 public:
  FitDenoiser(const FitParams<T>& params, FitConfig cfg, DiffusionConfig dcfg, std::size_t cond_id,
              bool self_condition = true);
  Tensor<T> denoise(const Tensor<T>& x_sigma, double sigma, bool conditional) override;
  void begin_trajectory(double framerate) override;
  void set_cond_id(std::size_t id) { cond_id_ = id; }
  std::size_t evaluations() const { return evaluations_; }

 private:
  const FitParams<T>& params_;
  FitConfig cfg_;
  DiffusionConfig dcfg_;
  std::size_t cond_id_;
  bool self_condition_;
  double framerate_ = kInfiniteFramerate;
  std::optional<Tensor<T>> latents_[2];
  std::size_t evaluations_ = 0;
};

// Per-frame conditioning along axis 0 of the sample tensor.
template <class T>
struct FrameMask {
  std::vector<bool> frames;
  Tensor<T> known;  // same shape as the sample; read where frames[t] is set

  bool empty() const;
};

// [sigma_0 .. sigma_{n-1}, 0], strictly decreasing, sigma_0 = sigma_max.
std::vector<double> karras_schedule(std::size_t steps, double sigma_min, double sigma_max, double rho);
std::vector<double> karras_schedule(const SamplerConfig& cfg, const DiffusionConfig& dcfg);

template <class T>
Tensor<T> cfg_combine(const Tensor<T>& d_cond, const Tensor<T>& d_uncond, double g);

// s = max(1, percentile of |x0|) (linear interpolation between order
// statistics); returns clamp(x0, -s, s) / s.
template <class T>
Tensor<T> dynamic_threshold(const Tensor<T>& x0, double percentile);

// Oscillating mode: g on the first floor(steps / 4) steps, then g on even and
// 1 on odd step indices.
double guidance_weight_at(std::size_t step, const SamplerConfig& cfg);

// d'[t] = d[t] + w_r (known[t] - d[t]) for masked frames t.
template <class T>
Tensor<T> reconstruction_guide(const Tensor<T>& d, const FrameMask<T>& mask, double w_r);

// Guided, thresholded and reconstruction-guided estimate of x at one step.
template <class T>
Tensor<T> guided_denoise(Denoiser<T>& model, const Tensor<T>& x, double sigma, std::size_t step,
                         const SamplerConfig& cfg, const FrameMask<T>* mask);

template <class T>
Tensor<T> heun_step(Denoiser<T>& model, const Tensor<T>& x, double sigma, double sigma_next,
                    std::size_t step, const SamplerConfig& cfg, const DiffusionConfig& dcfg,
                    const FrameMask<T>* mask = nullptr);

// Runs the full schedule from sigma_max * noise, where noise is standard
// normal. Returns x_0 * sigma_in.
template <class T>
Tensor<T> sample_from_noise(Denoiser<T>& model, const Tensor<T>& noise, const SamplerConfig& cfg,
                            const DiffusionConfig& dcfg, const FrameMask<T>* mask = nullptr,
                            double framerate = kInfiniteFramerate);

// Draws the initial noise from cfg.seed.
template <class T>
Tensor<T> sample(Denoiser<T>& model, const Shape& shape, const SamplerConfig& cfg,
                 const DiffusionConfig& dcfg, const FrameMask<T>* mask = nullptr,
                 double framerate = kInfiniteFramerate);

struct HierarchyConfig {
  std::size_t total_frames = 16;      // at the highest rate
  std::vector<std::size_t> levels{1};  // strictly increasing rate multipliers, each dividing the next
  std::size_t window = 8;             // frames per model call
  double base_framerate = 4.0;        // frame rate of level multiplier 1
};

// Frame positions (at the top rate) produced by one level.
std::vector<std::size_t> level_positions(const HierarchyConfig& h, std::size_t level);

// One model call inside hierarchical generation, kept for inspection.
template <class T>
struct HierarchyPass {
  std::size_t level = 0;
  std::vector<std::size_t> positions;  // top-rate frame index of each window frame
  FrameMask<T> mask;
  Tensor<T> output;  // raw sampler output, masked frames included
};

// frame_shape is the per-frame shape; the result is (total_frames, frame_shape...).
// Already-generated frames keep their first values. Windows overlap by one
// frame; the last window of a level is shifted back to end on the last frame.
template <class T>
Tensor<T> hierarchical_generate(Denoiser<T>& model, const HierarchyConfig& h, const Shape& frame_shape,
                                const SamplerConfig& cfg, const DiffusionConfig& dcfg,
                                std::vector<HierarchyPass<T>>* trace = nullptr);

}  // namespace snapdiff
