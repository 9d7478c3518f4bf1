#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "snapdiff/snr.hpp"

using namespace snapdiff;

TEST_CASE("block averaging averages frames and spatial blocks") {
  // 2 frames of 2x2, averaged over both frames and 2x2 blocks: one value
  const auto v = Tensor64::from_vector({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto a = block_average(v, 2, 2);
  REQUIRE(a.size() == 1);
  CHECK(a[0] == doctest::Approx(4.5));
  CHECK_THROWS(block_average(v, 3, 1));
}

TEST_CASE("empirical snr is signal power over noise power") {
  const auto clean = Tensor64::from_vector({4}, {1, -1, 1, -1});
  const auto noisy = Tensor64::from_vector({4}, {1.5, -1.5, 0.5, -0.5});
  CHECK(empirical_snr(clean, noisy) == doctest::Approx(4.0));
}

TEST_CASE("averaging gains T s^2 in SNR") {
  for (auto [t, s] : {std::pair<std::size_t, std::size_t>{1, 1}, {4, 1}, {2, 2}, {16, 1}}) {
    SnrExperiment e;
    e.frames = t;
    e.upsample = s;
    e.trials = 300;
    e.seed = 17;
    const auto r = snr_scaling_experiment(e);
    CHECK(r.predicted_ratio == doctest::Approx(static_cast<double>(t * s * s)));
    CHECK(r.ratio / r.predicted_ratio == doctest::Approx(1.0).epsilon(0.06));
  }
}

TEST_CASE("input scaling recovers the single-frame SNR") {
  SnrExperiment e;
  e.frames = 8;
  e.upsample = 2;
  e.scale_input = true;
  e.trials = 300;
  e.seed = 3;
  const auto r = snr_scaling_experiment(e);
  CHECK(r.snr_avg / r.snr_reference == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("zero trials are rejected") {
  SnrExperiment e;
  e.trials = 0;
  CHECK_THROWS_AS(snr_scaling_experiment(e), std::invalid_argument);
}

TEST_CASE("csv has one row per grid cell") {
  const auto rows = snr_grid({1, 2}, {1, 2}, 1.0, false, 20, 1);
  CHECK(rows.size() == 4);
  std::ostringstream os;
  write_snr_csv(os, rows);
  const auto text = os.str();
  CHECK(text.rfind("T,s,sigma,scaled,snr_full,snr_avg,ratio,predicted_ratio\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);
}
