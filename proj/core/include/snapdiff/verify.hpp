#pragma once

// Self-check suite behind `snapdiff verify`: the diffusion identities, the
// SNR law and finite-difference checks of every differentiable primitive.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "snapdiff/tensor.hpp"

namespace snapdiff {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0;  // measured quantity
  double limit = 0;  // bound it was compared against
  std::string detail;
  double seconds = 0;
};

struct VerifyOptions {
  // Drops sigma_in from c_skip inside the loss-equivalence check, which must
  // then fail. Used as a negative control.
  bool inject_bug = false;
  std::uint64_t seed = 1234;
  std::size_t snr_trials = 400;
};

std::vector<CheckResult> run_verify(const VerifyOptions& opts = {});

void print_check_table(std::ostream& os, const std::vector<CheckResult>& results);
// Columns: name,passed,value,limit,seconds,detail
void write_check_csv(std::ostream& os, const std::vector<CheckResult>& results);

struct PrimitiveCase {
  std::string name;
  std::function<Tensor64(const Tensor64&)> f;  // scalar-valued
  Tensor64 x;
};

// One scalar-valued probe per differentiable primitive, on seeded 64-bit inputs.
std::vector<PrimitiveCase> primitive_grad_cases(std::uint64_t seed);

}  // namespace snapdiff
