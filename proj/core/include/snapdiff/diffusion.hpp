#pragma once

// Variance-exploding diffusion with an input scaling factor sigma_in.
//
// Forward process: x_sigma = x / sigma_in + sigma * eps.
// Denoiser:        D(x_sigma) = c_out * F(c_in * x_sigma) + c_skip * x_sigma.
// Objectives:      lambda * |D - x|^2  ==  w * |F - c_nrm * F_tgt|^2.
//
// Variant::edm keeps the original EDM scalings, so for sigma_in != 1 its
// training target picks up the term sigma_data^2 (sigma_in - 1) / (sigma_in sigma) x
// which diverges as sigma -> 0. Variant::snap_video rescales c_in, c_skip,
// c_out and w so that F_tgt stays the velocity target sigma_data^2 eps - sigma x
// for every sigma_in. EDM's network predicts the negated velocity, so at
// sigma_in = 1 the two variants agree on D and on both losses while c_out and
// F_tgt differ by sign.

#include <cstddef>
#include <random>
#include <string>

#include "snapdiff/tensor.hpp"

namespace snapdiff {

enum class Variant { edm, snap_video };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

// Log-normal training distribution for sigma (EDM defaults).
struct NoiseDistribution {
  double mean = -1.2;
  double std = 1.2;
};

struct DiffusionConfig {
  double sigma_data = 1.0;
  double sigma_in = 1.0;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  Variant variant = Variant::snap_video;
  NoiseDistribution train_noise;

  // Throws std::invalid_argument on non-positive sigmas or sigma_min >= sigma_max.
  void validate() const;
};

// sigma_in = s * sqrt(T) restores the designed SNR at original resolution for
// T frames upsampled by s.
double input_scale_for(std::size_t frames, double upsample);

struct Scalings {
  double c_in = 0;
  double c_out = 0;
  double c_skip = 0;
  double c_nrm = 0;
  double w = 0;
  double lambda = 0;
};

// Throws std::invalid_argument for sigma <= 0.
Scalings scalings(double sigma, const DiffusionConfig& cfg);

// Tensor-level operations. Losses treat axis 0 as the batch axis: mean over
// it, sum over everything else.

template <class T>
Tensor<T> forward_process(const Tensor<T>& x, double sigma, const Tensor<T>& eps,
                          const DiffusionConfig& cfg);

template <class T>
Tensor<T> train_target(const Tensor<T>& x, const Tensor<T>& eps, double sigma,
                       const DiffusionConfig& cfg);

// c_nrm * F_tgt: the output of a perfect network.
template <class T>
Tensor<T> ideal_network_output(const Tensor<T>& x, const Tensor<T>& eps, double sigma,
                               const DiffusionConfig& cfg);

template <class T>
Tensor<T> denoise(const Tensor<T>& f_out, const Tensor<T>& x_sigma, double sigma,
                  const DiffusionConfig& cfg);

template <class T>
Tensor<T> loss_d(const Tensor<T>& d, const Tensor<T>& x, double sigma, const DiffusionConfig& cfg);

template <class T>
Tensor<T> loss_f(const Tensor<T>& f_out, const Tensor<T>& x, const Tensor<T>& eps, double sigma,
                 const DiffusionConfig& cfg);

// Velocity <-> data recovery for the input-scaled forward process.
template <class T>
Tensor<T> x_from_v(const Tensor<T>& x_sigma, const Tensor<T>& v, double sigma,
                   const DiffusionConfig& cfg);

// Throws std::invalid_argument for sigma == 0.
template <class T>
Tensor<T> v_from_x(const Tensor<T>& x_sigma, const Tensor<T>& x, double sigma,
                   const DiffusionConfig& cfg);

// sigma = exp(N(mean, std)) clamped to [sigma_min, sigma_max].
double sample_sigma(std::mt19937_64& rng, const DiffusionConfig& cfg);

// Fills a tensor with standard normal draws.
template <class T>
Tensor<T> standard_normal(Shape shape, std::mt19937_64& rng);

}  // namespace snapdiff
