#include <doctest.h>

#include <cmath>
#include <random>

#include "snapdiff/diffusion.hpp"

using namespace snapdiff;

namespace {

// Reference EDM preconditioning written out from the closed forms.
struct EdmRef {
  double sd;
  double c_skip(double s) const { return sd * sd / (s * s + sd * sd); }
  double c_out(double s) const { return s * sd / std::sqrt(s * s + sd * sd); }
  double c_in(double s) const { return 1.0 / std::sqrt(s * s + sd * sd); }
  double lambda(double s) const { return (s * s + sd * sd) / (s * sd * s * sd); }
};

DiffusionConfig with_sigma_in(double si) {
  DiffusionConfig c;
  c.sigma_in = si;
  return c;
}

}  // namespace

TEST_CASE("scalings reduce to EDM at unit input scale") {
  const EdmRef ref{1.0};
  const auto cfg = with_sigma_in(1.0);
  for (double s : {0.002, 0.05, 0.7, 1.0, 3.0, 80.0}) {
    const auto c = scalings(s, cfg);
    CHECK(c.c_skip == doctest::Approx(ref.c_skip(s)).epsilon(1e-13));
    CHECK(c.c_out == doctest::Approx(-ref.c_out(s)).epsilon(1e-13));
    CHECK(c.c_in == doctest::Approx(ref.c_in(s)).epsilon(1e-13));
    CHECK(c.lambda == doctest::Approx(ref.lambda(s)).epsilon(1e-13));
    CHECK(c.w == doctest::Approx(1.0).epsilon(1e-13));
  }
}

TEST_CASE("scaled denoiser matches the Gaussian posterior mean") {
  // x ~ N(0, sd^2), x_sigma = x / si + sigma eps  =>  E[x | x_sigma] = si sd^2 / (sd^2 + si^2 sigma^2) x_sigma
  for (double si : {1.0, 4.0}) {
    auto cfg = with_sigma_in(si);
    cfg.sigma_data = 0.5;
    for (double s : {0.01, 0.3, 2.0}) {
      const auto c = scalings(s, cfg);
      // the ideal network output for a Gaussian is linear; skip path alone gives c_skip,
      // and the posterior gain must equal c_skip + c_out * k with k from the target's regression
      const double gain = si * cfg.sigma_data * cfg.sigma_data / (cfg.sigma_data * cfg.sigma_data + si * si * s * s);
      const double sd2 = cfg.sigma_data * cfg.sigma_data;
      // Regression of c_nrm F_tgt on x_sigma: Cov / Var
      const double var_xs = sd2 / (si * si) + s * s;
      const double cov = c.c_nrm * (sd2 * s - s * sd2 / si);
      const double k = cov / var_xs;
      CHECK(c.c_skip + c.c_out * k == doctest::Approx(gain).epsilon(1e-12));
    }
  }
}

TEST_CASE("losses agree on random tuples") {
  std::mt19937_64 rng(5);
  for (double si : {1.0, 2.0, 8.0}) {
    const auto cfg = with_sigma_in(si);
    for (double s : {0.01, 0.5, 10.0}) {
      const auto x = standard_normal<double>({3, 4}, rng), e = standard_normal<double>({3, 4}, rng),
                 f = standard_normal<double>({3, 4}, rng);
      const auto d = denoise(f, forward_process(x, s, e, cfg), s, cfg);
      const double a = loss_d(d, x, s, cfg).item(), b = loss_f(f, x, e, s, cfg).item();
      CHECK(a == doctest::Approx(b).epsilon(1e-10));
    }
  }
}

TEST_CASE("losses average over the batch axis and sum the rest") {
  const auto cfg = with_sigma_in(1.0);
  const auto x = Tensor64::zeros({2, 3});
  const auto d = Tensor64::full({2, 3}, 1.0);
  const double lam = scalings(0.5, cfg).lambda;
  CHECK(loss_d(d, x, 0.5, cfg).item() == doctest::Approx(3.0 * lam));
}

TEST_CASE("EDM variant ignores the input scale") {
  auto edm = with_sigma_in(2.0);
  edm.variant = Variant::edm;
  const EdmRef ref{1.0};
  const auto b = scalings(0.4, edm);
  CHECK(b.c_out == doctest::Approx(ref.c_out(0.4)));
  CHECK(b.c_skip == doctest::Approx(ref.c_skip(0.4)));
  CHECK(b.c_in == doctest::Approx(ref.c_in(0.4)));
  CHECK(to_string(parse_variant("edm")) == "edm");
  CHECK_THROWS_AS(parse_variant("ddpm"), std::invalid_argument);
}

TEST_CASE("velocity conversions invert each other") {
  std::mt19937_64 rng(2);
  const auto cfg = with_sigma_in(4.0);
  const auto x = standard_normal<double>({5}, rng), e = standard_normal<double>({5}, rng);
  const auto xs = forward_process(x, 0.3, e, cfg);
  const auto back = x_from_v(xs, v_from_x(xs, x, 0.3, cfg), 0.3, cfg);
  for (std::size_t i = 0; i < 5; ++i) CHECK(back[i] == doctest::Approx(x[i]).epsilon(1e-12));
  CHECK_THROWS_AS(v_from_x(xs, x, 0.0, cfg), std::invalid_argument);
}

TEST_CASE("invalid configurations are rejected") {
  CHECK_THROWS_AS(scalings(0.0, DiffusionConfig{}), std::invalid_argument);
  DiffusionConfig c;
  c.sigma_in = 0;
  CHECK_THROWS(c.validate());
  c = {};
  c.sigma_min = 10;
  c.sigma_max = 1;
  CHECK_THROWS(c.validate());
}

TEST_CASE("input scale restores the designed SNR") {
  CHECK(input_scale_for(16, 1) == doctest::Approx(4.0));
  CHECK(input_scale_for(8, 2) == doctest::Approx(2.0 * std::sqrt(8.0)));
}

TEST_CASE("sigma samples stay in range and follow the log-normal") {
  std::mt19937_64 rng(4);
  DiffusionConfig c;
  double mean_log = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double s = sample_sigma(rng, c);
    CHECK(s >= c.sigma_min);
    CHECK(s <= c.sigma_max);
    mean_log += std::log(s) / n;
  }
  CHECK(mean_log == doctest::Approx(c.train_noise.mean).epsilon(0.03));
}
