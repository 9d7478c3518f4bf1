#include <doctest.h>

#include <cmath>
#include <random>

#include "snapdiff/grad_check.hpp"
#include "snapdiff/tensor.hpp"

using namespace snapdiff;

namespace {

Tensor64 seq(Shape s, double start = 0.0, double step = 1.0) {
  std::vector<double> v(shape_size(s));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = start + step * static_cast<double>(i);
  return Tensor64::from_vector(std::move(s), std::move(v));
}

}  // namespace

TEST_CASE("broadcast shapes follow right alignment") {
  CHECK(broadcast_shapes({3, 1}, {4}) == Shape{3, 4});
  CHECK(broadcast_shapes({2, 1, 4}, {3, 1}) == Shape{2, 3, 4});
  CHECK(broadcast_shapes({}, {5}) == Shape{5});
  CHECK_THROWS_AS(broadcast_shapes({3}, {4}), TensorError);
}

TEST_CASE("elementwise ops broadcast values") {
  const auto a = seq({2, 3});
  const auto b = Tensor64::from_vector({3}, {10, 20, 30});
  const auto s = add(a, b);
  CHECK(s.values() == std::vector<double>{10, 21, 32, 13, 24, 35});
  const auto m = mul(a, Tensor64::from_vector({2, 1}, {2, -1}));
  CHECK(m.values() == std::vector<double>{0, 2, 4, -3, -4, -5});
  CHECK(sub(b, b).values() == std::vector<double>{0, 0, 0});
}

TEST_CASE("matmul matches a triple loop with broadcast batches") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<double> av(2 * 3 * 4), bv(4 * 5);
  for (auto& v : av) v = n(rng);
  for (auto& v : bv) v = n(rng);
  reset_mac_count();
  const auto c = matmul(Tensor64::from_vector({2, 3, 4}, av), Tensor64::from_vector({4, 5}, bv));
  CHECK(mac_count() == 2u * 3 * 4 * 5);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  for (std::size_t bt = 0; bt < 2; ++bt)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double ref = 0;
        for (std::size_t k = 0; k < 4; ++k) ref += av[(bt * 3 + i) * 4 + k] * bv[k * 5 + j];
        CHECK(c[(bt * 3 + i) * 5 + j] == doctest::Approx(ref).epsilon(1e-12));
      }
  CHECK_THROWS_AS(matmul(Tensor64::zeros({2, 3}), Tensor64::zeros({4, 2})), TensorError);
}

TEST_CASE("matmul is identical across thread counts") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  std::vector<double> av(8 * 16 * 32), bv(8 * 32 * 16);
  for (auto& v : av) v = n(rng);
  for (auto& v : bv) v = n(rng);
  const auto a = Tensor64::from_vector({8, 16, 32}, av), b = Tensor64::from_vector({8, 32, 16}, bv);
  const auto before = num_threads();
  set_num_threads(1);
  const auto serial = matmul(a, b);
  set_num_threads(4);
  const auto parallel = matmul(a, b);
  set_num_threads(before);
  CHECK(serial.values() == parallel.values());
}

TEST_CASE("softmax rows are normalized and shift invariant") {
  const auto x = seq({3, 4}, -2.0, 0.7);
  const auto y = softmax(x, -1);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += y[r * 4 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  const auto shifted = softmax(add_scalar(x, 1000.0), -1);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(shifted[i] == doctest::Approx(y[i]).epsilon(1e-12));
}

TEST_CASE("layer_norm normalizes the last axis") {
  const auto x = seq({2, 4}, 1.0, 3.0);
  const auto y = layer_norm(x, Tensor64::full({4}, 1.0), Tensor64::zeros({4}));
  for (std::size_t r = 0; r < 2; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 4; ++c) m += y[r * 4 + c] / 4;
    for (std::size_t c = 0; c < 4; ++c) v += (y[r * 4 + c] - m) * (y[r * 4 + c] - m) / 4;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("backward gives hand-derived gradients") {
  auto x = seq({3}, 1.0).set_requires_grad(true);
  sum(mul(x, x)).backward();
  CHECK(x.grad_copy() == std::vector<double>{2, 4, 6});

  auto w = seq({2, 2}, 1.0).set_requires_grad(true);
  const auto v = Tensor64::from_vector({2, 1}, {1, -1});
  sum(matmul(w, v)).backward();
  CHECK(w.grad_copy() == std::vector<double>{1, -1, 1, -1});

  auto b = Tensor64::from_vector({1, 2}, {0, 0}).set_requires_grad(true);
  sum(add(Tensor64::zeros({3, 2}), b)).backward();
  CHECK(b.grad_copy() == std::vector<double>{3, 3});
}

TEST_CASE("gradients accumulate across backward calls") {
  auto x = Tensor64::from_vector({2}, {1, 2}).set_requires_grad(true);
  sum(x).backward();
  sum(scale(x, 2.0)).backward();
  CHECK(x.grad_copy() == std::vector<double>{3, 3});
  x.zero_grad();
  CHECK(!x.has_grad());
}

TEST_CASE("no-grad guard stops recording") {
  auto x = Tensor64::from_vector({2}, {1, 2}).set_requires_grad(true);
  {
    NoGradGuard guard;
    CHECK(!grad_enabled());
    const auto y = mul(x, x);
    CHECK(!y.requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(mul(x, x).requires_grad());
}

TEST_CASE("detached values do not carry gradients") {
  auto x = Tensor64::from_vector({2}, {1, 2}).set_requires_grad(true);
  sum(mul(x, x.detach())).backward();
  CHECK(x.grad_copy() == std::vector<double>{1, 2});
}

TEST_CASE("shape ops move values as expected") {
  const auto x = seq({2, 3});
  CHECK(permute(x, {1, 0}).values() == std::vector<double>{0, 3, 1, 4, 2, 5});
  CHECK(reshape(x, {3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(reshape(x, {4, 2}), TensorError);
  CHECK(concat<double>({x, x}, 1).values() == std::vector<double>{0, 1, 2, 0, 1, 2, 3, 4, 5, 3, 4, 5});
  CHECK(gather_rows(x, {1, 1, 0}).values() == std::vector<double>{3, 4, 5, 3, 4, 5, 0, 1, 2});
  CHECK(slice_rows(x, 1, 2).values() == std::vector<double>{3, 4, 5});
  CHECK_THROWS_AS(gather_rows(x, {2}), TensorError);
}

TEST_CASE("cast converts values without tracking") {
  auto x = Tensor64::from_vector({2}, {0.5, -1.25}).set_requires_grad(true);
  const auto y = cast<float>(x);
  CHECK(y.values() == std::vector<float>{0.5f, -1.25f});
  CHECK(!y.requires_grad());
}

TEST_CASE("grad_check detects a wrong gradient") {
  std::mt19937_64 rng(1);
  const auto x = Tensor64::from_vector({3}, {0.3, -0.2, 0.9});
  const auto good = grad_check([](const Tensor64& t) { return sum(gelu(t)); }, x);
  CHECK(good.max_rel_error < 1e-6);
  // detach hides one factor, so backward() reports half the true derivative
  const auto bad = grad_check([](const Tensor64& t) { return sum(mul(t, t.detach())); }, x);
  CHECK(bad.max_rel_error > 0.3);
  CHECK_THROWS_AS(grad_check([](const Tensor64& t) { return sum(t); }, x, 0.0), std::invalid_argument);
}
