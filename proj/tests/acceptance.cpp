// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// Reference quantities are recomputed here from closed forms (EDM scalings,
// Gaussian posterior, exact probability-flow map, token arithmetic, a
// nearest-template classifier) rather than taken from the library.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "snapdiff/checkpoint.hpp"
#include "snapdiff/config.hpp"
#include "snapdiff/dataset.hpp"
#include "snapdiff/diffusion.hpp"
#include "snapdiff/fit.hpp"
#include "snapdiff/grad_check.hpp"
#include "snapdiff/sampler.hpp"
#include "snapdiff/snr.hpp"
#include "snapdiff/train.hpp"
#include "snapdiff/verify.hpp"

using namespace snapdiff;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

int g_failures = 0;

void report(int id, const std::string& title, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit_s > 0 && s > limit_s) {
    o.passed = false;
    o.detail += "; runtime over " + std::to_string(limit_s) + " s";
  }
  if (!o.passed) ++g_failures;
  std::printf("%s [%02d] %s: %s (%.2f s)\n", o.passed ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str(), s);
  std::fflush(stdout);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

double rel(double a, double b) {
  const double m = std::max(std::abs(a), std::abs(b));
  return m == 0 ? 0.0 : std::abs(a - b) / m;
}

std::vector<double> log_grid(double lo, double hi, std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(n - 1));
  return g;
}

// ---- EDM written from scratch (sigma_in = 1) --------------------------------

struct Edm {
  double sd = 1.0;
  double c_skip(double s) const { return sd * sd / (s * s + sd * sd); }
  double c_out(double s) const { return s * sd / std::sqrt(s * s + sd * sd); }
  double c_in(double s) const { return 1.0 / std::sqrt(s * s + sd * sd); }
  double lambda(double s) const { return (s * s + sd * sd) / (s * s * sd * sd); }
  // target such that D = x exactly, (x - c_skip x_sigma) / c_out, expanded so
  // that nothing cancels at small sigma
  double target(double x, double eps, double s) const {
    return (s * x - sd * sd * eps) / (sd * std::sqrt(s * s + sd * sd));
  }
  double denoise(double f, double xs, double s) const { return c_skip(s) * xs + c_out(s) * f; }
};

// A smooth stand-in network shared by both sides of the sampler comparison.
double toy_net(double xin, double s) { return std::tanh(0.7 * xin) + 0.1 * std::log(s); }

class LibraryToyDenoiser final : public Denoiser<double> {
 public:
  explicit LibraryToyDenoiser(DiffusionConfig d) : d_(d) {}
  Tensor64 denoise(const Tensor64& xs, double s, bool) override {
    const auto c = scalings(s, d_);
    std::vector<double> f(xs.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = -toy_net(c.c_in * xs[i], s);  // output sign convention
    return snapdiff::denoise(Tensor64::from_vector(xs.shape(), std::move(f)), xs, s, d_);
  }

 private:
  DiffusionConfig d_;
};

Outcome criterion_reduction() {
  const Edm ref;
  DiffusionConfig d;
  d.sigma_in = 1.0;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  double worst = 0;
  for (double s : log_grid(0.002, 80.0, 100)) {
    const auto c = scalings(s, d);
    for (auto [a, b] : {std::pair{c.c_skip, ref.c_skip(s)}, {std::abs(c.c_out), ref.c_out(s)}, {c.c_in, ref.c_in(s)},
                        {c.lambda, ref.lambda(s)}, {c.w, ref.lambda(s) * ref.c_out(s) * ref.c_out(s)},
                        {c.c_nrm, ref.c_in(s) / ref.sd}}) {
      worst = std::max(worst, rel(a, b));
    }
    const double x = n(rng), e = n(rng), f = n(rng);
    const auto X = Tensor64::from_vector({1, 1}, {x}), E = Tensor64::from_vector({1, 1}, {e}),
               F = Tensor64::from_vector({1, 1}, {f});
    const double xs = x + s * e;
    worst = std::max(worst, rel(forward_process(X, s, E, d)[0], xs));
    // the library regresses c_nrm F_tgt with c_out of opposite sign; undo both to compare
    worst = std::max(worst, rel(-train_target(X, E, s, d)[0] * c.c_nrm, ref.target(x, e, s)));
    const double dref = ref.denoise(f, xs, s);
    const auto D = snapdiff::denoise(Tensor64::from_vector({1, 1}, {-f}), forward_process(X, s, E, d), s, d);
    worst = std::max(worst, rel(D[0], dref));
    worst = std::max(worst, rel(loss_d(D, X, s, d).item(), ref.lambda(s) * (dref - x) * (dref - x)));
    const double tgt = ref.target(x, e, s);
    worst = std::max(worst, rel(loss_f(Tensor64::from_vector({1, 1}, {-f}), X, E, s, d).item(), (f - tgt) * (f - tgt)));
  }

  // Heun sampler: library trajectory vs a from-scratch EDM Heun loop
  SamplerConfig sc;
  sc.steps = 32;
  LibraryToyDenoiser model(d);
  double sampler_worst = 0;
  for (double z : {-1.3, 0.2, 0.9}) {
    const double lib = sample_from_noise<double>(model, Tensor64::from_vector({1}, {z}), sc, d)[0];
    std::vector<double> sig(sc.steps + 1);
    const double a = std::pow(d.sigma_max, 1 / sc.rho), b = std::pow(d.sigma_min, 1 / sc.rho);
    for (std::size_t i = 0; i < sc.steps; ++i) {
      sig[i] = std::pow(a + static_cast<double>(i) / static_cast<double>(sc.steps - 1) * (b - a), sc.rho);
    }
    sig[sc.steps] = 0;
    auto D = [&](double x, double s) { return ref.denoise(toy_net(ref.c_in(s) * x, s), x, s); };
    double x = z * sig[0];
    for (std::size_t i = 0; i < sc.steps; ++i) {
      const double di = (x - D(x, sig[i])) / sig[i];
      double xn = x + (sig[i + 1] - sig[i]) * di;
      if (sig[i + 1] > 0) xn = x + (sig[i + 1] - sig[i]) * 0.5 * (di + (xn - D(xn, sig[i + 1])) / sig[i + 1]);
      x = xn;
    }
    sampler_worst = std::max(sampler_worst, rel(lib, x));
  }
  const bool ok = worst <= 1e-12 && sampler_worst <= 1e-12;
  return {ok, "functions max rel " + fmt(worst) + ", sampler max rel " + fmt(sampler_worst) + " (limit 1e-12)"};
}

// ---- Table-1 scalings written from scratch for general sigma_in -------------

struct Snap {
  double sd, si;
  double c_in(double s) const { return 1.0 / std::sqrt(sd * sd / (si * si) + s * s); }
  double c_out(double s) const {
    return -si * s * sd * std::sqrt(s * s + sd * sd) / (sd * sd + si * s * s);
  }
  double c_skip(double s) const { return si * sd * sd / (si * s * s + sd * sd); }
  double c_nrm(double s) const { return 1.0 / (sd * std::sqrt(s * s + sd * sd)); }
  double w(double s) const {
    const double a = s * s + sd * sd, b = s * s + sd * sd / si;
    return a * a / (b * b);
  }
  double lambda(double s) const { return 1.0 / (sd * sd) + 1.0 / (s * s); }
};

Outcome criterion_loss_equivalence() {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> ls(std::log(0.002), std::log(80.0));
  double worst = 0, worst_ref = 0;
  std::size_t tuples = 0;
  for (double si : {1.0, 2.0, 4.0, 32.0}) {
    DiffusionConfig d;
    d.sigma_in = si;
    const Snap ref{d.sigma_data, si};
    for (int i = 0; i < 1000; ++i, ++tuples) {
      const double s = std::exp(ls(rng));
      const auto x = standard_normal<double>({1, 4}, rng), e = standard_normal<double>({1, 4}, rng),
                 f = standard_normal<double>({1, 4}, rng);
      const auto D = snapdiff::denoise(f, forward_process(x, s, e, d), s, d);
      const double a = loss_d(D, x, s, d).item(), b = loss_f(f, x, e, s, d).item();
      worst = std::max(worst, rel(a, b));
      double la = 0, lb = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        const double xs = x[k] / si + s * e[k];
        const double dk = ref.c_skip(s) * xs + ref.c_out(s) * f[k];
        la += ref.lambda(s) * (dk - x[k]) * (dk - x[k]);
        const double t = ref.c_nrm(s) * (d.sigma_data * d.sigma_data * e[k] - s * x[k]);
        lb += ref.w(s) * (f[k] - t) * (f[k] - t);
      }
      worst_ref = std::max({worst_ref, rel(a, la), rel(b, lb), rel(la, lb)});
    }
  }
  const bool ok = worst <= 1e-8 && worst_ref <= 1e-8;
  return {ok, std::to_string(tuples) + " tuples, library max rel " + fmt(worst) + ", vs closed forms " + fmt(worst_ref) +
                  " (limit 1e-8)"};
}

Outcome criterion_v_prediction() {
  DiffusionConfig d;
  d.sigma_data = 1.0;
  d.sigma_in = 4.0;
  std::mt19937_64 rng(3);
  std::size_t mismatches = 0, checked = 0;
  for (double s : log_grid(0.002, 80.0, 100)) {
    const auto x = standard_normal<double>({8}, rng), e = standard_normal<double>({8}, rng);
    const auto t = train_target(x, e, s, d);
    for (std::size_t i = 0; i < 8; ++i, ++checked) mismatches += t[i] != e[i] - s * x[i];
    ++checked;
    mismatches += scalings(s, d).lambda != 1.0 + 1.0 / (s * s);
  }
  return {mismatches == 0, std::to_string(checked - mismatches) + "/" + std::to_string(checked) + " exact equalities"};
}

Outcome criterion_divergence() {
  DiffusionConfig edm;
  edm.variant = Variant::edm;
  edm.sigma_in = 4.0;
  DiffusionConfig snap = edm;
  snap.variant = Variant::snap_video;
  const auto one = Tensor64::full({1}, 1.0), zero = Tensor64::zeros({1});
  // naive EDM target on the scaled input x_sigma = x / 4, in velocity units:
  // (x - c_skip x / 4) / (c_out c_nrm) with c_nrm = c_in / sigma_data
  const Edm ref;
  auto naive = [&](double s) {
    return std::abs((1.0 - ref.c_skip(s) * 0.25) / (ref.c_out(s) * ref.c_in(s) / ref.sd));
  };
  const double lib_hi = std::abs(train_target(one, zero, 1e-3, edm)[0]);
  const double lib_lo = std::abs(train_target(one, zero, 0.1, edm)[0]);
  const double ratio = lib_hi / lib_lo;
  const double oracle_ratio = naive(1e-3) / naive(0.1);
  double worst = 0;
  for (double s : log_grid(snap.sigma_min, snap.sigma_max, 400)) {
    for (double e : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
      const double t = std::abs(train_target(one, Tensor64::full({1}, e), s, snap)[0]);
      worst = std::max(worst, t / (snap.sigma_data * snap.sigma_data + snap.sigma_max * 1.0));
    }
  }
  const bool ok = ratio >= 70.0 && rel(ratio, oracle_ratio) < 1e-9 && worst <= 1.0;
  return {ok, "EDM target ratio sigma=1e-3 vs 0.1: " + fmt(ratio) + " (oracle " + fmt(oracle_ratio) +
                  ", need >= 70); max |F_tgt| / (sigma_data^2 + sigma_max |x|) = " + fmt(worst)};
}

Outcome criterion_snr() {
  double worst = 0, worst_scaled = 0;
  std::size_t cells = 0;
  for (std::size_t t : {1, 2, 4, 16}) {
    for (std::size_t s : {1, 2, 4}) {
      SnrExperiment e;
      e.frames = t;
      e.upsample = s;
      e.trials = 400;
      e.seed = 100 + t * 10 + s;
      const auto r = snr_scaling_experiment(e);
      worst = std::max(worst, std::abs(r.ratio / static_cast<double>(t * s * s) - 1.0));
      e.scale_input = true;
      const auto sc = snr_scaling_experiment(e);
      worst_scaled = std::max(worst_scaled, std::abs(sc.snr_avg / sc.snr_reference - 1.0));
      ++cells;
    }
  }
  const bool ok = worst <= 0.05 && worst_scaled <= 0.10;
  return {ok, std::to_string(cells) + " cells, max |ratio/(T s^2) - 1| = " + fmt(worst) +
                  " (limit 0.05), scaled vs reference max rel diff " + fmt(worst_scaled) + " (limit 0.10)"};
}

Outcome criterion_unit_variance() {
  std::mt19937_64 rng(6);
  const std::size_t n = 1'000'000;
  double lo = 10, hi = 0;
  for (double si : {1.0, 4.0, 32.0}) {
    DiffusionConfig d;
    d.sigma_in = si;
    d.sigma_data = 0.5;
    for (double s : {0.01, 0.2, 1.0, 10.0}) {
      const auto c = scalings(s, d);
      const auto x = scale(standard_normal<double>({n}, rng), d.sigma_data);
      const auto e = standard_normal<double>({n}, rng);
      const auto in = scale(forward_process(x, s, e, d), c.c_in);
      const auto out = scale(train_target(x, e, s, d), c.c_nrm);
      for (const auto* t : {&in, &out}) {
        double m = 0, v = 0;
        for (double z : t->values()) m += z;
        m /= static_cast<double>(n);
        for (double z : t->values()) v += (z - m) * (z - m);
        v /= static_cast<double>(n - 1);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  return {lo >= 0.98 && hi <= 1.02, "variances in [" + fmt(lo) + ", " + fmt(hi) + "] (need [0.98, 1.02])"};
}

FitConfig grad_fit() {
  FitConfig c;
  c.frames = 2;
  c.height = 8;
  c.width = 8;
  c.group = {2, 1, 1};
  c.patch_channels = 8;
  c.latent_count = 8;
  c.latent_channels = 8;
  c.blocks = 2;
  c.global_layers = 1;
  c.patch_head_channels = 4;
  c.latent_head_channels = 4;
  c.cond_channels = 8;
  c.embed_channels = 8;
  c.ff_mult = 2;
  c.n_classes = 4;
  c.dropout = 0;
  return c;
}

Outcome criterion_gradients() {
  double worst_prim = 0;
  std::size_t n = 0;
  for (const auto& c : primitive_grad_cases(77)) {
    worst_prim = std::max(worst_prim, grad_check(c.f, c.x).max_rel_error);
    ++n;
  }
  const auto cfg = grad_fit();
  auto params = init_fit_params<double>(cfg, 5);
  std::mt19937_64 rng(8);
  auto& sc = params.at("self_cond.proj.weight");
  const auto noise = standard_normal<double>(sc.shape(), rng);
  for (std::size_t i = 0; i < sc.size(); ++i) sc.mutable_data()[i] = 0.3 * noise[i];
  params.set_requires_grad(true);
  DiffusionConfig d;
  d.sigma_in = 2.0;
  const auto x = standard_normal<double>({2, 8, 8, 1}, rng), e = standard_normal<double>({2, 8, 8, 1}, rng);
  const auto prev = standard_normal<double>({8, 8}, rng);
  const double sigma = 0.6;
  FitConditioning cond;
  cond.sigma = sigma;
  cond.framerate = 8;
  cond.orig_height = 8;
  cond.orig_width = 8;
  cond.cond_id = 3;
  auto loss = [&] {
    const auto c = scalings(sigma, d);
    const auto xin = scale(forward_process(x, sigma, e, d), c.c_in);
    const auto out = fit_forward(xin, cond, std::optional<Tensor64>{prev}, params, cfg);
    return loss_f(reshape(out.f_out, {1, 2, 8, 8, 1}), reshape(x, {1, 2, 8, 8, 1}), reshape(e, {1, 2, 8, 8, 1}),
                  sigma, d);
  };
  std::vector<ParamProbe> probes;
  std::mt19937_64 pick(12);
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (int k = 0; k < 3; ++k) probes.push_back({t, static_cast<std::size_t>(pick() % params.tensors()[t].size())});
  }
  const auto r = grad_check_params(loss, params.tensors(), probes);
  const bool ok = worst_prim <= 1e-5 && r.max_rel_error <= 1e-4;
  return {ok, std::to_string(n) + " primitives max rel " + fmt(worst_prim) + " (limit 1e-5); 2-block FIT loss, " +
                  std::to_string(probes.size()) + " probes over " + std::to_string(params.size()) +
                  " tensors, max rel " + fmt(r.max_rel_error) + " (limit 1e-4)"};
}

// Exact posterior mean for data ~ N(0, sd^2) under x_sigma = x / si + sigma eps.
class PosteriorMean final : public Denoiser<double> {
 public:
  PosteriorMean(double sd, double si) : sd_(sd), si_(si) {}
  Tensor64 denoise(const Tensor64& xs, double s, bool) override {
    return scale(xs, si_ * sd_ * sd_ / (sd_ * sd_ + si_ * si_ * s * s));
  }

 private:
  double sd_, si_;
};

Outcome criterion_gaussian_sampling() {
  DiffusionConfig d;
  d.sigma_in = 4.0;
  d.sigma_data = 1.0;
  PosteriorMean model(d.sigma_data, d.sigma_in);
  std::mt19937_64 rng(9);
  const std::size_t n = 10000;
  const auto noise = standard_normal<double>({n}, rng);
  // probability flow of a Gaussian: x_sigma scales with sqrt(sd^2 / si^2 + sigma^2)
  const double gain = d.sigma_max * d.sigma_data / std::sqrt(d.sigma_data * d.sigma_data / 16.0 + d.sigma_max * d.sigma_max);
  auto run = [&](std::size_t steps, double& mean, double& var, double& err) {
    SamplerConfig sc;
    sc.steps = steps;
    const auto y = sample_from_noise<double>(model, noise, sc, d);
    mean = 0;
    for (double v : y.values()) mean += v / static_cast<double>(n);
    var = 0;
    err = 0;
    for (std::size_t i = 0; i < n; ++i) {
      var += (y[i] - mean) * (y[i] - mean) / static_cast<double>(n - 1);
      err += (y[i] - gain * noise[i]) * (y[i] - gain * noise[i]) / static_cast<double>(n);
    }
    err = std::sqrt(err);
  };
  double m64, v64, e64, m256, v256, e256;
  run(64, m64, v64, e64);
  run(256, m256, v256, e256);
  const double vs = d.sigma_data * d.sigma_data;
  const bool ok = std::abs(m64) < 0.05 && std::abs(v64 / vs - 1) <= 0.05 && e256 <= e64;
  return {ok, "64 steps: mean " + fmt(m64) + ", var " + fmt(v64) + "; rms error vs exact flow 64 steps " + fmt(e64) +
                  ", 256 steps " + fmt(e256)};
}

Outcome criterion_tokens() {
  const auto a = FitConfig::paper_500m(), b = FitConfig::paper_3_9b_upsampler();
  a.validate();
  b.validate();
  const std::size_t oracle_a = 16 * (40 / 4) * (64 / 4), oracle_b = 16 * (288 / 4) * (512 / 4);
  const std::size_t na = patch_token_count(a.frames, a.height, a.width, a.patch);
  const std::size_t nb = patch_token_count(b.frames, b.height, b.width, b.patch);
  const bool ok = na == 2560 && oracle_a == 2560 && nb == 147456 && oracle_b == 147456 && a.patch_tokens() == na &&
                  b.patch_tokens() == nb;
  return {ok, "16x40x64 -> " + std::to_string(na) + " tokens, 16x288x512 -> " + std::to_string(nb) +
                  " tokens (geometry only)"};
}

// ---- toy end-to-end ----------------------------------------------------------

// Best placement of each class template per frame, squared error on a -1 background.
std::size_t nearest_template(const Tensor32& video, std::size_t classes) {
  const std::size_t t = video.dim(0), h = video.dim(1), w = video.dim(2);
  std::vector<double> score(classes, 0.0);
  for (std::size_t k = 0; k < classes; ++k) {
    const auto& tpl = sprite_template(k + 1);
    const std::size_t sz = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(tpl.size()))));
    for (std::size_t f = 0; f < t; ++f) {
      const float* px = video.values().data() + f * h * w;
      double background = 0;
      for (std::size_t i = 0; i < h * w; ++i) background += (px[i] + 1.0) * (px[i] + 1.0);
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r + sz <= h; ++r) {
        for (std::size_t c = 0; c + sz <= w; ++c) {
          double e = background;
          for (std::size_t i = 0; i < sz; ++i) {
            for (std::size_t j = 0; j < sz; ++j) {
              if (tpl[i * sz + j] == 0) continue;
              const double v = px[(r + i) * w + c + j];
              e += (v - 1.0) * (v - 1.0) - (v + 1.0) * (v + 1.0);
            }
          }
          best = std::min(best, e);
        }
      }
      score[k] += best;
    }
  }
  return static_cast<std::size_t>(std::min_element(score.begin(), score.end()) - score.begin()) + 1;
}

struct ToyRun {
  RunConfig cfg;
  TrainState state;
  std::vector<double> losses;
};

ToyRun train_toy() {
  ToyRun run;
  run.cfg = RunConfig::toy();
  run.cfg.train.seed = 2024;
  run.cfg.data.seed = 2024;
  run.cfg.finalize();
  Trainer trainer(run.cfg.fit, run.cfg.diffusion, run.cfg.train, run.cfg.data);
  while (!trainer.done()) run.losses.push_back(trainer.step().loss);
  run.state = trainer.state();
  return run;
}

double accuracy(const ToyRun& run, const FitParams<float>& params, double guidance, std::size_t per_class,
                std::size_t* evaluated) {
  const std::size_t classes = run.cfg.fit.n_classes, total = classes * per_class;
  const Shape shape{run.cfg.fit.frames, run.cfg.fit.height, run.cfg.fit.width, run.cfg.fit.channels};
  std::vector<int> hit(total, 0);
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(std::thread::hardware_concurrency(), 8));
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < total; i += workers) {
        const std::size_t cls = 1 + i % classes;
        FitDenoiser<float> model(params, run.cfg.fit, run.cfg.diffusion, cls);
        SamplerConfig sc = run.cfg.sampler;
        sc.guidance = guidance;
        sc.seed = 5000 + i;
        const auto v = sample<float>(model, shape, sc, run.cfg.diffusion, nullptr, run.cfg.data.base_framerate);
        hit[i] = nearest_template(v, classes) == cls;
      }
    });
  }
  for (auto& t : pool) t.join();
  if (evaluated) *evaluated = total;
  return static_cast<double>(std::accumulate(hit.begin(), hit.end(), 0)) / static_cast<double>(total);
}

Outcome criterion_toy(const ToyRun& run) {
  const std::size_t head = 50, window = 50;
  const double first = std::accumulate(run.losses.begin(), run.losses.begin() + head, 0.0) / head;
  const double last = std::accumulate(run.losses.end() - window, run.losses.end(), 0.0) / window;
  const double reduction = 1.0 - last / first;
  const auto ema = ema_params(run.state.ema, run.state.params);
  std::size_t n = 0;
  const double acc_g2 = accuracy(run, ema, 2.0, 32, &n);
  const double acc_g0 = accuracy(run, ema, 0.0, 32, nullptr);
  const double acc_g1 = accuracy(run, ema, 1.0, 32, nullptr);
  const bool ok = reduction >= 0.5 && acc_g2 >= 0.5 && acc_g2 >= acc_g0;
  return {ok, std::to_string(run.losses.size()) + " steps, smoothed loss " + fmt(first) + " -> " + fmt(last) +
                  " (reduction " + fmt(100 * reduction) + "%, need >= 50%); accuracy over " + std::to_string(n) +
                  " samples: g=2 " + fmt(acc_g2) + ", unconditional g=0 " + fmt(acc_g0) + " (g=1 " + fmt(acc_g1) + ")"};
}

Outcome criterion_scaling() {
  auto base = FitConfig::toy();
  auto measure = [](const FitConfig& c) {
    const auto p = init_fit_params<float>(c, 1);
    std::mt19937_64 rng(1);
    const auto x = standard_normal<float>({c.frames, c.height, c.width, c.channels}, rng);
    FitConditioning k;
    k.orig_height = static_cast<double>(c.height);
    k.orig_width = static_cast<double>(c.width);
    NoGradGuard ng;
    reset_mac_count();
    (void)fit_forward(x, k, std::optional<Tensor32>{}, p, c);
    return mac_count();
  };
  auto doubled = base;
  doubled.width *= 2;
  doubled.group.w *= 2;
  const double measured = static_cast<double>(measure(doubled)) / static_cast<double>(measure(base));
  auto big = FitConfig::paper_500m();
  auto big2 = big;
  big2.width *= 2;
  big2.group.w *= 2;
  const double published =
      static_cast<double>(fit_forward_macs(big2, true, true)) / static_cast<double>(fit_forward_macs(big, true, true));
  const bool ok = measured < 2.2 && published < 2.2 && doubled.patch_tokens() == 2 * base.patch_tokens();
  return {ok, "toy " + std::to_string(base.patch_tokens()) + " -> " + std::to_string(doubled.patch_tokens()) +
                  " tokens at " + std::to_string(base.latent_count) + " latents: MACs x" + fmt(measured) +
                  "; 500M geometry (counted) x" + fmt(published) + " (limit 2.2)"};
}

Outcome criterion_hierarchy(const ToyRun& run) {
  const auto params = ema_params(run.state.ema, run.state.params);
  FitDenoiser<float> model(params, run.cfg.fit, run.cfg.diffusion, 2);
  HierarchyConfig h;
  h.levels = {1, 2};
  h.window = run.cfg.fit.frames;
  h.total_frames = 2 * run.cfg.fit.frames;
  h.base_framerate = run.cfg.data.base_framerate / 2;
  SamplerConfig sc = run.cfg.sampler;
  sc.recon_weight = 1.0;
  sc.seed = 77;
  std::vector<HierarchyPass<float>> trace;
  const auto v = hierarchical_generate<float>(model, h, {run.cfg.fit.height, run.cfg.fit.width, run.cfg.fit.channels},
                                              sc, run.cfg.diffusion, &trace);
  const std::size_t per = run.cfg.fit.height * run.cfg.fit.width * run.cfg.fit.channels;
  double drift = 0;
  std::size_t masked = 0;
  for (const auto& pass : trace) {
    if (pass.level != 1) continue;
    for (std::size_t k = 0; k < pass.positions.size(); ++k) {
      if (!pass.mask.frames[k]) continue;
      ++masked;
      const std::size_t p = pass.positions[k];
      for (std::size_t i = 0; i < per; ++i) {
        drift = std::max(drift, static_cast<double>(std::abs(pass.output[k * per + i] - v[p * per + i])));
      }
    }
  }
  const bool ok = v.dim(0) == h.total_frames && masked > 0 && drift <= 1e-6;
  return {ok, "levels 1,2 emitted " + std::to_string(v.dim(0)) + "/" + std::to_string(h.total_frames) +
                  " frames; " + std::to_string(masked) + " masked frames, max drift from source " + fmt(drift) +
                  " (limit 1e-6)"};
}

Outcome criterion_resume(const ToyRun& toy) {
  auto cfg = RunConfig::toy();
  cfg.train.steps = 12;
  cfg.train.warmup = 3;
  cfg.train.batch_videos = 2;
  cfg.train.batch_images = 2;
  cfg.finalize();
  Trainer straight(cfg.fit, cfg.diffusion, cfg.train, cfg.data);
  std::vector<double> a, b;
  for (int i = 0; i < 6; ++i) a.push_back(straight.step().loss);
  Trainer first(cfg.fit, cfg.diffusion, cfg.train, cfg.data);
  for (int i = 0; i < 3; ++i) b.push_back(first.step().loss);
  auto ck = decode_checkpoint(encode_checkpoint(cfg, first.state()));
  Trainer second(ck.config.fit, ck.config.diffusion, ck.config.train, ck.config.data);
  second.state() = std::move(ck.state);
  for (int i = 0; i < 3; ++i) b.push_back(second.step().loss);
  bool params_equal = true;
  for (std::size_t i = 0; i < straight.state().params.size(); ++i) {
    params_equal &= straight.state().params.tensors()[i].values() == second.state().params.tensors()[i].values();
  }
  const bool ckpt_equal = encode_checkpoint(cfg, straight.state()) == encode_checkpoint(cfg, second.state());

  const auto params = ema_params(toy.state.ema, toy.state.params);
  SamplerConfig sc = toy.cfg.sampler;
  sc.seed = 31;
  sc.guidance = 2.0;
  const Shape shape{toy.cfg.fit.frames, toy.cfg.fit.height, toy.cfg.fit.width, toy.cfg.fit.channels};
  FitDenoiser<float> m1(params, toy.cfg.fit, toy.cfg.diffusion, 1), m2(params, toy.cfg.fit, toy.cfg.diffusion, 1);
  const bool samples_equal = sample<float>(m1, shape, sc, toy.cfg.diffusion).values() ==
                             sample<float>(m2, shape, sc, toy.cfg.diffusion).values();
  const bool ok = a == b && params_equal && ckpt_equal && samples_equal;
  return {ok, std::string("losses ") + (a == b ? "bitwise equal" : "differ") + ", parameters " +
                  (params_equal ? "equal" : "differ") + ", final checkpoints " + (ckpt_equal ? "equal" : "differ") +
                  ", same-seed samples " + (samples_equal ? "equal" : "differ")};
}

}  // namespace

int main() {
  report(1, "framework reduction at sigma_in=1", 1.0, criterion_reduction);
  report(2, "loss-form equivalence", 5.0, criterion_loss_equivalence);
  report(3, "v-prediction correspondence", 0, criterion_v_prediction);
  report(4, "spurious-term divergence", 0, criterion_divergence);
  report(5, "SNR law", 30.0, criterion_snr);
  report(6, "unit-variance normalizations", 0, criterion_unit_variance);
  report(7, "gradient correctness", 120.0, criterion_gradients);
  report(8, "Gaussian-oracle sampling", 30.0, criterion_gaussian_sampling);
  report(9, "token arithmetic", 0, criterion_tokens);
  report(11, "FIT scaling", 0, criterion_scaling);

  ToyRun toy;
  const auto t0 = std::chrono::steady_clock::now();
  bool trained = true;
  try {
    toy = train_toy();
  } catch (const std::exception& e) {
    trained = false;
    std::printf("toy training failed: %s\n", e.what());
  }
  const double train_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("toy training: %zu steps in %.1f s\n", toy.losses.size(), train_s);
  report(10, "toy end-to-end", 1800.0 - train_s, [&] {
    if (!trained) return Outcome{false, "training did not complete"};
    return criterion_toy(toy);
  });
  report(12, "hierarchical generation", 0, [&] {
    if (!trained) return Outcome{false, "training did not complete"};
    return criterion_hierarchy(toy);
  });
  report(13, "resumability and determinism", 0, [&] { return criterion_resume(toy); });

  std::printf("%d of 13 criteria failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
