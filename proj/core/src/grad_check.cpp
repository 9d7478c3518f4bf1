#include "snapdiff/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace snapdiff {

namespace {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

void track(GradCheckResult& r, std::size_t i, double analytic, double numeric) {
  const double e = relative_error(analytic, numeric);
  if (i == 0 || e > r.max_rel_error) {
    r.max_rel_error = e;
    r.worst_index = i;
    r.analytic = analytic;
    r.numeric = numeric;
  }
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor64(const Tensor64&)>& f, const Tensor64& x,
                           double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step h must be positive");

  auto leaf = x.detach();
  leaf.set_requires_grad(true);
  f(leaf).backward();
  const auto analytic = leaf.grad_copy();

  GradCheckResult result;
  std::vector<double> probe(x.values());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(Tensor64::from_vector(x.shape(), probe)).item();
    probe[i] = orig - h;
    const double fm = f(Tensor64::from_vector(x.shape(), probe)).item();
    probe[i] = orig;
    track(result, i, analytic[i], (fp - fm) / (2.0 * h));
  }
  return result;
}

GradCheckResult grad_check_params(const std::function<Tensor64()>& loss,
                                  std::vector<Tensor64>& params,
                                  const std::vector<ParamProbe>& probes, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step h must be positive");
  for (auto& p : params) p.zero_grad();
  loss().backward();
  std::vector<double> analytic;
  analytic.reserve(probes.size());
  for (const auto& pr : probes) analytic.push_back(params.at(pr.tensor).grad()[pr.index]);

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    auto data = params[probes[i].tensor].mutable_data();
    const double orig = data[probes[i].index];
    data[probes[i].index] = orig + h;
    const double fp = loss().item();
    data[probes[i].index] = orig - h;
    const double fm = loss().item();
    data[probes[i].index] = orig;
    track(result, i, analytic[i], (fp - fm) / (2.0 * h));
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

}  // namespace snapdiff
