#include <benchmark/benchmark.h>

#include "lara/rng.hpp"
#include "lara/tensor.hpp"

using namespace lara;

static void BM_Matmul(benchmark::State& state) {
  const int t = static_cast<int>(state.range(0));
  const int d = static_cast<int>(state.range(1));
  Rng rng(1);
  Tensor a = Tensor::randn({t, d}, rng, 0.1f);
  Tensor b = Tensor::randn({d, d}, rng, 0.1f);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2ll * t * d * d);
}
BENCHMARK(BM_Matmul)->Args({128, 128})->Args({64, 128})->Args({128, 512});

static void BM_MaskedSoftmax(benchmark::State& state) {
  const int t = static_cast<int>(state.range(0));
  Rng rng(2);
  Tensor scores = Tensor::randn({4, t, t}, rng);
  BoolMask mask = BoolMask::all(t, t);
  for (int i = 0; i < t; ++i) {
    for (int j = i + 1; j < t; ++j) mask.set(i, j, false);
  }
  for (auto _ : state) {
    Tensor p = masked_softmax(scores, mask);
    benchmark::DoNotOptimize(p.data().data());
  }
}
BENCHMARK(BM_MaskedSoftmax)->Arg(64)->Arg(128);

static void BM_RmsNorm(benchmark::State& state) {
  Rng rng(3);
  Tensor x = Tensor::randn({128, 128}, rng);
  Tensor g = Tensor::full({128}, 1.0f);
  for (auto _ : state) {
    Tensor y = rms_norm(x, g);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_RmsNorm);

BENCHMARK_MAIN();
