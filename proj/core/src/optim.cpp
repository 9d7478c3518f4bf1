#include "snapdiff/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace snapdiff {

std::string to_string(OptimizerMode m) { return m == OptimizerMode::adam ? "adam" : "lamb"; }

OptimizerMode parse_optimizer_mode(const std::string& text) {
  if (text == "adam") return OptimizerMode::adam;
  if (text == "lamb") return OptimizerMode::lamb;
  throw std::invalid_argument("unknown optimizer '" + text + "'");
}

template <class T>
OptimizerState<T> make_optimizer(const FitParams<T>& params, OptimizerConfig cfg) {
  OptimizerState<T> s;
  s.cfg = cfg;
  for (const auto& p : params.tensors()) {
    s.m.emplace_back(p.size(), T(0));
    s.v.emplace_back(p.size(), T(0));
  }
  return s;
}

template <class T>
double clip_global_norm(std::vector<std::vector<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (T& x : g) x *= f;
  }
  return norm;
}

template <class T>
UpdateStats optimizer_update(OptimizerState<T>& opt, FitParams<T>& params, std::vector<std::vector<T>> grads,
                             double lr) {
  if (grads.size() != params.size() || opt.m.size() != params.size()) {
    throw std::invalid_argument("optimizer_update: one gradient buffer per parameter required");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params.tensors()[i].size()) {
      throw std::invalid_argument("optimizer_update: gradient for '" + params.names()[i] + "' has the wrong size");
    }
  }
  const auto& c = opt.cfg;
  UpdateStats stats;
  stats.grad_norm = clip_global_norm(grads, c.clip_norm);
  double sq = 0;
  for (const auto& g : grads)
    for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  stats.clipped_norm = std::sqrt(sq);

  ++opt.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  std::vector<double> u;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params.tensors()[i].mutable_data();
    auto& m = opt.m[i];
    auto& v = opt.v[i];
    const auto& g = grads[i];
    u.resize(w.size());
    double w_sq = 0, u_sq = 0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<T>(c.beta1 * m[j] + (1.0 - c.beta1) * gj);
      v[j] = static_cast<T>(c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      u[j] = mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * w[j];
      w_sq += static_cast<double>(w[j]) * static_cast<double>(w[j]);
      u_sq += u[j] * u[j];
    }
    double step = lr;
    if (c.mode == OptimizerMode::lamb) {
      const double wn = std::sqrt(w_sq), un = std::sqrt(u_sq);
      const double ratio = (wn == 0 || un == 0) ? 1.0 : std::clamp(wn / un, 0.0, c.max_trust_ratio);
      step *= ratio;
    }
    for (std::size_t j = 0; j < w.size(); ++j) w[j] = static_cast<T>(w[j] - step * u[j]);
  }
  return stats;
}

double cosine_lr(std::uint64_t step, std::uint64_t warmup, std::uint64_t total, double peak) {
  if (step > total) throw std::invalid_argument("cosine_lr: step past the schedule");
  if (warmup > total) throw std::invalid_argument("cosine_lr: warmup longer than the schedule");
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return peak;
  const double f = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * f));
}

double ema_decay(double halflife) { return halflife > 0 ? std::pow(0.5, 1.0 / halflife) : 0.0; }

template <class T>
EmaState<T> make_ema(const FitParams<T>& params, double halflife) {
  EmaState<T> e;
  e.halflife = halflife;
  for (const auto& p : params.tensors()) e.shadow.push_back(p.values());
  return e;
}

template <class T>
void ema_update(EmaState<T>& ema, const FitParams<T>& params) {
  if (ema.shadow.size() != params.size()) throw std::invalid_argument("ema_update: parameter count changed");
  const double d = ema_decay(ema.halflife);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& w = params.tensors()[i].values();
    auto& s = ema.shadow[i];
    if (s.size() != w.size()) throw std::invalid_argument("ema_update: parameter shape changed");
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double mixed = d * s[j] + (1.0 - d) * w[j];
      const double lo = std::min<double>(s[j], w[j]), hi = std::max<double>(s[j], w[j]);
      s[j] = static_cast<T>(std::clamp(mixed, lo, hi));
    }
  }
}

template <class T>
FitParams<T> ema_params(const EmaState<T>& ema, const FitParams<T>& like) {
  if (ema.shadow.size() != like.size()) throw std::invalid_argument("ema_params: parameter count differs");
  FitParams<T> out;
  for (std::size_t i = 0; i < like.size(); ++i) {
    out.add(like.names()[i], Tensor<T>::from_vector(like.tensors()[i].shape(), ema.shadow[i]));
  }
  return out;
}

#define SNAPDIFF_INSTANTIATE(T)                                                                        \
  template OptimizerState<T> make_optimizer(const FitParams<T>&, OptimizerConfig);                     \
  template double clip_global_norm(std::vector<std::vector<T>>&, double);                              \
  template UpdateStats optimizer_update(OptimizerState<T>&, FitParams<T>&, std::vector<std::vector<T>>, \
                                        double);                                                       \
  template EmaState<T> make_ema(const FitParams<T>&, double);                                          \
  template void ema_update(EmaState<T>&, const FitParams<T>&);                                         \
  template FitParams<T> ema_params(const EmaState<T>&, const FitParams<T>&);

SNAPDIFF_INSTANTIATE(float)
SNAPDIFF_INSTANTIATE(double)
#undef SNAPDIFF_INSTANTIATE

}  // namespace snapdiff
