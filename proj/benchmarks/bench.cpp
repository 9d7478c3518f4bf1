#include <benchmark/benchmark.h>

#include <optional>
#include <random>

#include "snapdiff/diffusion.hpp"
#include "snapdiff/fit.hpp"
#include "snapdiff/tensor.hpp"

using namespace snapdiff;

namespace {

FitConfig widened(int doublings) {
  auto cfg = FitConfig::toy();
  for (int i = 0; i < doublings; ++i) {
    cfg.width *= 2;
    cfg.group.w *= 2;
  }
  return cfg;
}

FitConditioning conditioning(const FitConfig& cfg) {
  FitConditioning k;
  k.sigma = 0.7;
  k.framerate = 8;
  k.orig_height = static_cast<double>(cfg.height);
  k.orig_width = static_cast<double>(cfg.width);
  k.cond_id = 1;
  return k;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(7);
  const auto a = standard_normal<float>({n, n}, rng);
  const auto b = standard_normal<float>({n, n}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_BatchedMatmul(benchmark::State& state) {
  set_num_threads(static_cast<std::size_t>(state.range(0)));
  std::mt19937_64 rng(7);
  const auto a = standard_normal<float>({16, 64, 64}, rng);
  const auto b = standard_normal<float>({16, 64, 64}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  set_num_threads(1);
}
BENCHMARK(BM_BatchedMatmul)->Arg(1)->Arg(4);

void BM_FitForward(benchmark::State& state) {
  const auto cfg = widened(static_cast<int>(state.range(0)));
  const auto params = init_fit_params<float>(cfg, 1);
  std::mt19937_64 rng(3);
  const auto x = standard_normal<float>({cfg.frames, cfg.height, cfg.width, cfg.channels}, rng);
  const auto cond = conditioning(cfg);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(fit_forward(x, cond, std::optional<Tensor32>{}, params, cfg));
  state.counters["tokens"] = static_cast<double>(cfg.patch_tokens());
  state.counters["macs"] = static_cast<double>(fit_forward_macs(cfg, true, false));
}
BENCHMARK(BM_FitForward)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_FitForwardBackward(benchmark::State& state) {
  const auto cfg = FitConfig::toy();
  const auto params = init_fit_params<float>(cfg, 1);
  std::mt19937_64 rng(3);
  const auto x = standard_normal<float>({cfg.frames, cfg.height, cfg.width, cfg.channels}, rng);
  const auto cond = conditioning(cfg);
  for (auto _ : state) {
    const auto out = fit_forward(x, cond, std::optional<Tensor32>{}, params, cfg);
    sum(mul(out.f_out, out.f_out)).backward();
  }
}
BENCHMARK(BM_FitForwardBackward)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
