#include "snapdiff/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include "snapdiff/diffusion.hpp"
#include "snapdiff/grad_check.hpp"
#include "snapdiff/snr.hpp"

namespace snapdiff {

namespace {

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

Tensor64 randn(Shape s, std::mt19937_64& rng) { return standard_normal<double>(std::move(s), rng); }

double max_rel(const Tensor64& a, const Tensor64& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), 1e-12}));
  return m;
}

std::vector<double> log_grid(double lo, double hi, std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(n - 1));
  return g;
}

template <class F>
CheckResult timed(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r = body();
  r.name = name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

CheckResult check_reduction(std::uint64_t seed) {
  DiffusionConfig snap, edm;
  snap.sigma_in = edm.sigma_in = 1.0;
  edm.variant = Variant::edm;
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (double sigma : log_grid(0.002, 80.0, 100)) {
    const auto a = scalings(sigma, snap), b = scalings(sigma, edm);
    for (auto [p, q] : {std::pair{a.c_in, b.c_in}, {a.c_skip, b.c_skip}, {-a.c_out, b.c_out}, {a.c_nrm, b.c_nrm},
                        {a.w, b.w}, {a.lambda, b.lambda}}) {
      worst = std::max(worst, rel(p, q));
    }
    const auto x = randn({4, 8}, rng), eps = randn({4, 8}, rng), f = randn({4, 8}, rng);
    const auto xs = forward_process(x, sigma, eps, snap);
    worst = std::max(worst, max_rel(xs, forward_process(x, sigma, eps, edm)));
    worst = std::max(worst, max_rel(train_target(x, eps, sigma, snap), scale(train_target(x, eps, sigma, edm), -1.0)));
    const auto ds = denoise(f, xs, sigma, snap), de = denoise(scale(f, -1.0), xs, sigma, edm);
    worst = std::max(worst, max_rel(ds, de));
    worst = std::max(worst, rel(loss_d(ds, x, sigma, snap).item(), loss_d(de, x, sigma, edm).item()));
    worst = std::max(worst, rel(loss_f(f, x, eps, sigma, snap).item(), loss_f(scale(f, -1.0), x, eps, sigma, edm).item()));
  }
  return {"", worst <= 1e-12, worst, 1e-12, "sigma_in=1 vs EDM, 100-point sigma grid"};
}

CheckResult check_loss_equivalence(std::uint64_t seed, bool inject_bug) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> log_sigma(std::log(0.002), std::log(80.0));
  double worst = 0;
  for (double si : {1.0, 2.0, 4.0, 32.0}) {
    DiffusionConfig cfg;
    cfg.sigma_in = si;
    for (int i = 0; i < 1000; ++i) {
      const double sigma = std::exp(log_sigma(rng));
      const auto x = randn({2, 3}, rng), eps = randn({2, 3}, rng), f = randn({2, 3}, rng);
      const auto xs = forward_process(x, sigma, eps, cfg);
      Tensor64 d = denoise(f, xs, sigma, cfg);
      if (inject_bug) {
        const auto c = scalings(sigma, cfg);
        const double sd2 = cfg.sigma_data * cfg.sigma_data;
        d = add(scale(f, c.c_out), scale(xs, sd2 / (sigma * sigma + sd2)));
      }
      worst = std::max(worst, rel(loss_d(d, x, sigma, cfg).item(), loss_f(f, x, eps, sigma, cfg).item()));
    }
  }
  return {"", worst <= 1e-8, worst, 1e-8, "lambda|D-x|^2 vs w|F-c_nrm F_tgt|^2, sigma_in in {1,2,4,32}"};
}

CheckResult check_oracle(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (double si : {1.0, 2.0, 4.0, 32.0}) {
    DiffusionConfig cfg;
    cfg.sigma_in = si;
    for (double sigma : log_grid(0.002, 80.0, 50)) {
      const auto x = randn({16}, rng), eps = randn({16}, rng);
      const auto d = denoise(ideal_network_output(x, eps, sigma, cfg), forward_process(x, sigma, eps, cfg), sigma, cfg);
      for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(d[i] - x[i]));
    }
  }
  return {"", worst <= 1e-9, worst, 1e-9, "ideal network output denoises to x"};
}

CheckResult check_v_prediction(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  DiffusionConfig cfg;
  cfg.sigma_in = 4.0;
  double worst = 0;
  for (double sigma : log_grid(0.002, 80.0, 100)) {
    const auto x = randn({8}, rng), eps = randn({8}, rng);
    const auto t = train_target(x, eps, sigma, cfg);
    for (std::size_t i = 0; i < 8; ++i) worst = std::max(worst, std::abs(t[i] - (eps[i] - sigma * x[i])));
    worst = std::max(worst, std::abs(scalings(sigma, cfg).lambda - (1.0 + 1.0 / (sigma * sigma))));
  }
  return {"", worst == 0.0, worst, 0.0, "sigma_data=1: F_tgt = eps - sigma x, lambda = 1 + 1/sigma^2"};
}

CheckResult check_divergence() {
  DiffusionConfig edm, snap;
  edm.variant = Variant::edm;
  edm.sigma_in = snap.sigma_in = 4.0;
  const auto one = Tensor64::full({1}, 1.0), zero = Tensor64::zeros({1});
  const double ratio = std::abs(train_target(one, zero, 1e-3, edm)[0]) / std::abs(train_target(one, zero, 0.1, edm)[0]);
  double worst_bound = 0;
  for (double sigma : log_grid(snap.sigma_min, snap.sigma_max, 200)) {
    for (double e : {-1.0, 0.0, 1.0}) {
      const double t = train_target(one, Tensor64::full({1}, e), sigma, snap)[0];
      worst_bound = std::max(worst_bound, std::abs(t) / (snap.sigma_data * snap.sigma_data * std::abs(e) + snap.sigma_max));
    }
  }
  std::ostringstream d;
  d << "EDM target ratio " << ratio << ", bounded target max |t|/bound " << worst_bound;
  return {"", ratio >= 70.0 && worst_bound <= 1.0, ratio, 70.0, d.str()};
}

CheckResult check_xv_roundtrip(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (double si : {1.0, 4.0, 32.0}) {
    DiffusionConfig cfg;
    cfg.sigma_in = si;
    for (double sigma : log_grid(0.002, 80.0, 40)) {
      const auto x = randn({8}, rng), eps = randn({8}, rng);
      const auto xs = forward_process(x, sigma, eps, cfg);
      worst = std::max(worst, max_rel(x_from_v(xs, v_from_x(xs, x, sigma, cfg), sigma, cfg), x));
      worst = std::max(worst, max_rel(x_from_v(xs, train_target(x, eps, sigma, cfg), sigma, cfg), x));
    }
  }
  return {"", worst <= 1e-10, worst, 1e-10, "x -> v -> x and v = F_tgt recovers x"};
}

CheckResult check_unit_variance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  DiffusionConfig cfg;
  cfg.sigma_in = 4.0;
  double worst = 0;
  for (double sigma : {0.01, 0.3, 1.0, 5.0}) {
    const auto c = scalings(sigma, cfg);
    double s_in = 0, s_out = 0;
    const int samples = 1'000'000;
    for (int i = 0; i < samples; ++i) {
      const double x = cfg.sigma_data * n(rng), e = n(rng);
      const double in = c.c_in * (x / cfg.sigma_in + sigma * e);
      const double out = c.c_nrm * (cfg.sigma_data * cfg.sigma_data * e - sigma * x);
      s_in += in * in;
      s_out += out * out;
    }
    worst = std::max({worst, std::abs(s_in / samples - 1.0), std::abs(s_out / samples - 1.0)});
  }
  return {"", worst <= 0.02, worst, 0.02, "Var[c_in x_sigma] and Var[c_nrm F_tgt] at 1e6 samples"};
}

CheckResult check_snr(std::uint64_t seed, std::size_t trials) {
  double worst = 0;
  for (auto r : snr_grid({1, 2, 4, 16}, {1, 2, 4}, 1.0, false, trials, seed)) {
    worst = std::max(worst, std::abs(r.ratio / r.predicted_ratio - 1.0));
  }
  SnrExperiment e;
  e.frames = 16;
  e.upsample = 1;
  e.scale_input = true;
  e.trials = trials;
  e.seed = seed;
  const auto s = snr_scaling_experiment(e);
  const double match = std::abs(s.snr_avg / s.snr_reference - 1.0);
  std::ostringstream d;
  d << "max |ratio/(T s^2) - 1| = " << worst << ", scaled T=16 rel diff " << match;
  return {"", worst <= 0.05 && match <= 0.10, worst, 0.05, d.str()};
}

Tensor64 weigh(const Tensor64& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed + t.size());
  return sum(mul(t, standard_normal<double>(t.shape(), rng)));
}

}  // namespace

std::vector<PrimitiveCase> primitive_grad_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto R = [&](Shape s) { return standard_normal<double>(std::move(s), rng); };
  const auto c234 = R({2, 3, 4}), c45 = R({4, 5}), c234b = R({2, 3, 4}), c3 = R({3, 4});
  const auto gain = R({4}), bias = R({4});
  std::vector<PrimitiveCase> v;
  v.push_back({"add", [=](const Tensor64& x) { return weigh(add(c234, x), 1); }, R({3, 1})});
  v.push_back({"sub", [=](const Tensor64& x) { return weigh(sub(x, c234), 2); }, R({1, 4})});
  v.push_back({"mul", [=](const Tensor64& x) { return weigh(mul(x, mul(x, c3)), 3); }, R({3, 4})});
  v.push_back({"mul_broadcast", [=](const Tensor64& x) { return weigh(mul(c234b, x), 4); }, R({2, 1, 4})});
  v.push_back({"scale", [=](const Tensor64& x) { return weigh(scale(x, -1.7), 5); }, R({3, 4})});
  v.push_back({"add_scalar", [=](const Tensor64& x) { return weigh(mul(add_scalar(x, 0.3), x), 6); }, R({3, 4})});
  v.push_back({"gelu", [=](const Tensor64& x) { return weigh(gelu(x), 7); }, R({4, 5})});
  v.push_back({"matmul_a", [=](const Tensor64& x) { return weigh(matmul(x, c45), 8); }, R({2, 3, 4})});
  v.push_back({"matmul_b", [=](const Tensor64& x) { return weigh(matmul(c234, x), 9); }, R({4, 5})});
  v.push_back({"matmul_batched", [=](const Tensor64& x) { return weigh(matmul(x, permute(c234b, {0, 2, 1})), 10); },
               R({2, 1, 3, 4})});
  v.push_back({"softmax", [=](const Tensor64& x) { return weigh(softmax(x, -1), 11); }, R({3, 5})});
  v.push_back({"softmax_axis0", [=](const Tensor64& x) { return weigh(softmax(x, 0), 12); }, R({4, 3})});
  v.push_back({"layer_norm_x", [=](const Tensor64& x) { return weigh(layer_norm(x, gain, bias), 13); }, R({3, 4})});
  v.push_back({"layer_norm_gain", [=](const Tensor64& g) { return weigh(layer_norm(c3, g, bias), 14); }, R({4})});
  v.push_back({"layer_norm_bias", [=](const Tensor64& b) { return weigh(mul(layer_norm(c3, gain, b), c3), 15); }, R({4})});
  v.push_back({"sum", [=](const Tensor64& x) { return sum(mul(x, x)); }, R({3, 4})});
  v.push_back({"mean", [=](const Tensor64& x) { return mul(mean(x), mean(mul(x, x))); }, R({3, 4})});
  v.push_back({"reshape", [=](const Tensor64& x) { return weigh(mul(reshape(x, {4, 3}), reshape(x, {4, 3})), 16); }, R({3, 4})});
  v.push_back({"permute", [=](const Tensor64& x) { return weigh(mul(permute(x, {2, 0, 1}), permute(c234, {2, 0, 1})), 17); },
               R({2, 3, 4})});
  v.push_back({"concat", [=](const Tensor64& x) { return weigh(mul(concat<double>({x, c3, x}, 0), concat<double>({x, x, c3}, 0)), 18); },
               R({3, 4})});
  v.push_back({"gather_rows", [=](const Tensor64& x) { return weigh(mul(gather_rows(x, {2, 0, 2, 1}), gather_rows(x, {0, 0, 1, 2})), 19); },
               R({3, 4})});
  v.push_back({"slice_rows", [=](const Tensor64& x) { return weigh(mul(slice_rows(x, 1, 3), slice_rows(x, 0, 2)), 20); },
               R({3, 4})});
  return v;
}

std::vector<CheckResult> run_verify(const VerifyOptions& opts) {
  std::vector<CheckResult> out;
  out.push_back(timed("reduction_to_edm", [&] { return check_reduction(opts.seed); }));
  out.push_back(timed("loss_equivalence", [&] { return check_loss_equivalence(opts.seed + 1, opts.inject_bug); }));
  out.push_back(timed("oracle_denoise", [&] { return check_oracle(opts.seed + 2); }));
  out.push_back(timed("v_prediction", [&] { return check_v_prediction(opts.seed + 3); }));
  out.push_back(timed("spurious_term_divergence", [&] { return check_divergence(); }));
  out.push_back(timed("x_v_roundtrip", [&] { return check_xv_roundtrip(opts.seed + 4); }));
  out.push_back(timed("unit_variance", [&] { return check_unit_variance(opts.seed + 5); }));
  out.push_back(timed("snr_law", [&] { return check_snr(opts.seed + 6, opts.snr_trials); }));
  for (const auto& c : primitive_grad_cases(opts.seed + 7)) {
    out.push_back(timed("grad/" + c.name, [&] {
      const auto r = grad_check(c.f, c.x);
      return CheckResult{"", r.max_rel_error <= 1e-5, r.max_rel_error, 1e-5, "central differences, h=1e-6"};
    }));
  }
  return out;
}

void print_check_table(std::ostream& os, const std::vector<CheckResult>& results) {
  std::size_t width = 5;
  for (const auto& r : results) width = std::max(width, r.name.size());
  std::size_t failed = 0;
  for (const auto& r : results) {
    os << (r.passed ? "PASS  " : "FAIL  ") << std::left << std::setw(static_cast<int>(width)) << r.name << "  "
       << std::setw(12) << std::setprecision(4) << r.value << " (limit " << r.limit << ")  " << r.detail << '\n';
    if (!r.passed) ++failed;
  }
  os << std::right << results.size() - failed << "/" << results.size() << " checks passed\n";
}

void write_check_csv(std::ostream& os, const std::vector<CheckResult>& results) {
  os << "name,passed,value,limit,seconds,detail\n";
  const auto old = os.precision(10);
  for (const auto& r : results) {
    std::string detail = r.detail;
    std::replace(detail.begin(), detail.end(), ',', ';');
    os << r.name << ',' << (r.passed ? 1 : 0) << ',' << r.value << ',' << r.limit << ',' << r.seconds << ',' << detail << '\n';
  }
  os.precision(old);
}

}  // namespace snapdiff
