#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "snapdiff/tensor.hpp"

namespace snapdiff {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

// Central differences against backward(). Relative error per coordinate is
// |a - b| / max(|a|, |b|, 1e-8). Throws std::invalid_argument for h <= 0.
GradCheckResult grad_check(const std::function<Tensor64(const Tensor64&)>& f, const Tensor64& x,
                           double h = 1e-6);

// A coordinate inside one of several parameter tensors.
struct ParamProbe {
  std::size_t tensor = 0;
  std::size_t index = 0;
};

// Variant for models: `loss` rebuilds the graph from `params` (leaves with
// requires_grad) on every call; the probed coordinates are perturbed in place.
GradCheckResult grad_check_params(const std::function<Tensor64()>& loss,
                                  std::vector<Tensor64>& params,
                                  const std::vector<ParamProbe>& probes, double h = 1e-4);

}  // namespace snapdiff
