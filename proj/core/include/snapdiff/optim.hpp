#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "snapdiff/fit.hpp"
#include "snapdiff/tensor.hpp"

namespace snapdiff {

enum class OptimizerMode { adam, lamb };

std::string to_string(OptimizerMode m);
OptimizerMode parse_optimizer_mode(const std::string& text);

struct OptimizerConfig {
  OptimizerMode mode = OptimizerMode::lamb;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // global gradient norm limit; 0 disables clipping
  double max_trust_ratio = 10.0;
};

template <class T>
struct OptimizerState {
  OptimizerConfig cfg;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;  // one buffer per parameter, same order as FitParams
  std::vector<std::vector<T>> v;
};

template <class T>
OptimizerState<T> make_optimizer(const FitParams<T>& params, OptimizerConfig cfg);

struct UpdateStats {
  double grad_norm = 0;     // before clipping
  double clipped_norm = 0;  // after clipping
};

// Scales all gradients in place so their joint L2 norm is at most max_norm.
// Returns the norm before scaling.
template <class T>
double clip_global_norm(std::vector<std::vector<T>>& grads, double max_norm);

// Clips, then applies one Adam (decoupled weight decay) or LAMB step. grads
// must hold one buffer per parameter, sized like it.
template <class T>
UpdateStats optimizer_update(OptimizerState<T>& opt, FitParams<T>& params, std::vector<std::vector<T>> grads,
                             double lr);

// Linear warmup to peak, then half-cosine decay to zero at `total`.
double cosine_lr(std::uint64_t step, std::uint64_t warmup, std::uint64_t total, double peak);

// 0.5^(1 / halflife); halflife <= 0 gives 0 (shadow tracks parameters exactly).
double ema_decay(double halflife);

template <class T>
struct EmaState {
  double halflife = 0;
  std::vector<std::vector<T>> shadow;
};

template <class T>
EmaState<T> make_ema(const FitParams<T>& params, double halflife);

// shadow <- d * shadow + (1 - d) * param, kept inside [min, max] of the two.
template <class T>
void ema_update(EmaState<T>& ema, const FitParams<T>& params);

// A parameter set holding the shadow values under the original names.
template <class T>
FitParams<T> ema_params(const EmaState<T>& ema, const FitParams<T>& like);

}  // namespace snapdiff
