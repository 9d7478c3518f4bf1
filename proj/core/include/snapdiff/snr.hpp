#pragma once

// Monte-Carlo check of how block averaging raises SNR on redundant video.
//
// The synthetic signal is exactly constant over every T x s x s block, so the
// averaged clean frame equals the original-resolution frame. The T*s^2 gain
// is exact only under that premise; natural video is merely close to it.

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "snapdiff/tensor.hpp"

namespace snapdiff {

// video: (T, s*H, s*W) -> (1, H, W), each output the mean of one T x s x s block.
Tensor64 block_average(const Tensor64& video, std::size_t frames, std::size_t upsample);

// mean(clean^2) / mean((noisy - clean)^2). Throws std::domain_error when the
// noise power is zero.
double empirical_snr(const Tensor64& clean, const Tensor64& noisy);

struct SnrReport {
  std::size_t frames = 1;
  std::size_t upsample = 1;
  double sigma = 1.0;
  bool scaled = false;
  double snr_full = 0;       // SNR of x_sigma at full resolution
  double snr_avg = 0;        // SNR of the block-averaged frame
  double snr_reference = 0;  // single unscaled frame at original resolution, same sigma
  double ratio = 0;          // snr_avg / snr_full
  double predicted_ratio = 0;  // T * s^2
  double averaged_noise_var = 0;  // variance of the noise left after averaging
};

struct SnrExperiment {
  std::size_t frames = 16;
  std::size_t upsample = 1;
  double sigma = 1.0;
  bool scale_input = false;
  std::size_t trials = 400;
  std::size_t height = 16;  // original-resolution frame size
  std::size_t width = 16;
  double sigma_data = 1.0;
  std::uint64_t seed = 0;
};

// Throws std::invalid_argument for trials < 1 or zero-sized geometry.
SnrReport snr_scaling_experiment(const SnrExperiment& exp);

// Cartesian grid over frames x upsample, one report each.
std::vector<SnrReport> snr_grid(const std::vector<std::size_t>& frames,
                                const std::vector<std::size_t>& upsample, double sigma,
                                bool scale_input, std::size_t trials, std::uint64_t seed);

// Columns: T,s,sigma,scaled,snr_full,snr_avg,ratio,predicted_ratio
void write_snr_csv(std::ostream& os, const std::vector<SnrReport>& rows);

}  // namespace snapdiff
