// OpenMP kernels against the serial reference loops.
#include <benchmark/benchmark.h>

#include "attnorm/attentive_norm.hpp"
#include "attnorm/init.hpp"
#include "attnorm/kernels.hpp"
#include "attnorm/reference.hpp"

using namespace attnorm;

namespace {

Tensor4<float> input(std::size_t n, std::size_t c, std::size_t hw) {
  Tensor4<float> x(Shape4{n, c, hw, hw});
  init::Rng rng(11);
  init::normal<float>(x.vec(), 0.0, 1.0, rng);
  return x;
}

std::vector<float> weights(const kernels::ConvGeometry& g) {
  std::vector<float> w(g.weight_numel());
  init::Rng rng(12);
  init::normal<float>(w, 0.0, 0.1, rng);
  return w;
}

void BM_ConvForward(benchmark::State& st) {
  const auto c = static_cast<std::size_t>(st.range(0));
  const auto hw = static_cast<std::size_t>(st.range(1));
  const kernels::ConvGeometry g{c, c, 3, 1, 1};
  const auto x = input(32, c, hw);
  const auto w = weights(g);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::conv2d_forward<float>(x, w, g));
}

void BM_ConvForwardReference(benchmark::State& st) {
  const auto c = static_cast<std::size_t>(st.range(0));
  const auto hw = static_cast<std::size_t>(st.range(1));
  const kernels::ConvGeometry g{c, c, 3, 1, 1};
  const auto x = input(32, c, hw);
  const auto w = weights(g);
  for (auto _ : st) benchmark::DoNotOptimize(ref::conv2d_forward<float>(x, w, g));
}

void BM_ConvBackward(benchmark::State& st) {
  const auto c = static_cast<std::size_t>(st.range(0));
  const auto hw = static_cast<std::size_t>(st.range(1));
  const kernels::ConvGeometry g{c, c, 3, 1, 1};
  const auto x = input(32, c, hw);
  const auto w = weights(g);
  const auto dy = input(32, c, hw);
  std::vector<float> dw(w.size());
  Tensor4<float> dx;
  for (auto _ : st) {
    kernels::conv2d_backward<float>(x, w, g, dy, &dx, dw);
    benchmark::DoNotOptimize(dx.data());
  }
}

void BM_ConvBackwardReference(benchmark::State& st) {
  const auto c = static_cast<std::size_t>(st.range(0));
  const auto hw = static_cast<std::size_t>(st.range(1));
  const kernels::ConvGeometry g{c, c, 3, 1, 1};
  const auto x = input(32, c, hw);
  const auto w = weights(g);
  const auto dy = input(32, c, hw);
  std::vector<float> dw;
  Tensor4<float> dx;
  for (auto _ : st) {
    ref::conv2d_backward<float>(x, w, g, dy, dx, dw);
    benchmark::DoNotOptimize(dx.data());
  }
}

void BM_Standardize(benchmark::State& st) {
  const auto x = input(64, 32, 16);
  Standardizer<float> s(32, BlockScheme::batch());
  for (auto _ : st) benchmark::DoNotOptimize(s.forward(x, Mode::kTrain));
}

void BM_StandardizeReference(benchmark::State& st) {
  const auto x = input(64, 32, 16);
  for (auto _ : st) benchmark::DoNotOptimize(ref::standardize<float>(x, BlockScheme::batch(), 1e-5f));
}

void BM_AttentiveNormForward(benchmark::State& st) {
  const auto x = input(64, 32, 16);
  ANConfig cfg;
  cfg.k = static_cast<std::size_t>(st.range(0));
  AttentiveNorm<float> an(32, cfg, 5);
  for (auto _ : st) benchmark::DoNotOptimize(an.forward(x));
}

}  // namespace

BENCHMARK(BM_ConvForward)->Args({16, 32})->Args({64, 8})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForwardReference)->Args({16, 32})->Args({64, 8})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward)->Args({16, 32})->Args({64, 8})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardReference)->Args({16, 32})->Args({64, 8})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Standardize)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_StandardizeReference)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_AttentiveNormForward)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
