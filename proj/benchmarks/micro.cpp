#include <benchmark/benchmark.h>

#include <vector>

#include "freqexit/autodiff.hpp"
#include "freqexit/cost_model.hpp"
#include "freqexit/earlyexit.hpp"
#include "freqexit/gfnet.hpp"
#include "freqexit/rng.hpp"
#include "freqexit/runtime.hpp"
#include "freqexit/spectral.hpp"

using namespace freqexit;

namespace {

TensorR random_grid(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  TensorR t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

void BM_Fft2(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const TensorR x = random_grid({n, n}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(dft::fft2(x));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(x.size()));
}
BENCHMARK(BM_Fft2)->Arg(8)->Arg(16)->Arg(32)->Arg(64);

void BM_Rfft2RoundTrip(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const TensorR x = random_grid({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(dft::irfft2(dft::rfft2(x), n));
}
BENCHMARK(BM_Rfft2RoundTrip)->Arg(8)->Arg(16)->Arg(32)->Arg(64);

void BM_GlobalFilter(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto d = static_cast<std::size_t>(state.range(1));
  Rng rng(3);
  const GlobalFilter f = GlobalFilter::random(n, n, d, 0.02, rng);
  const TensorR x = random_grid({n, n, d}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(global_filter_apply(x, f));
}
BENCHMARK(BM_GlobalFilter)->Args({8, 32})->Args({8, 64})->Args({16, 32});

void BM_CircularConvOracle(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const TensorR x = random_grid({n, n}, 5);
  const TensorR k = random_grid({n, n}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(circular_conv_oracle(x, k));
}
BENCHMARK(BM_CircularConvOracle)->Arg(8)->Arg(16);

void BM_Matmul(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto inner = static_cast<std::size_t>(state.range(1));
  const TensorR a = random_grid({rows, inner}, 7);
  const TensorR b = random_grid({inner, 4 * inner}, 8);
  TensorR out({rows, 4 * inner});
  for (auto _ : state) {
    matmul_into(a, b, out);
    benchmark::DoNotOptimize(out.data().data());
  }
  state.counters["flops"] = benchmark::Counter(
      static_cast<double>(2 * rows * inner * 4 * inner) * static_cast<double>(state.iterations()),
      benchmark::Counter::kIsRate);
}
BENCHMARK(BM_Matmul)->Args({64, 32})->Args({64, 64})->Args({2048, 32});

void BM_BlockForward(benchmark::State& state) {
  GfnetConfig c = default_student_config();
  c.embed_dim = static_cast<std::size_t>(state.range(0));
  const GfnetModel model(c, 9);
  const TensorR x = random_grid({c.tokens(), c.embed_dim}, 10);
  for (auto _ : state) {
    Tape t;
    Var v = t.constant(x);
    benchmark::DoNotOptimize(t.value(model.block(t, 0, v, 1)).data().data());
  }
}
BENCHMARK(BM_BlockForward)->Arg(32)->Arg(64);

void BM_Classify(benchmark::State& state) {
  GfnetConfig c = default_student_config();
  const GfnetModel model(c, 11);
  const TensorR image = random_grid({c.image_size, c.image_size, kImageChannels}, 12);
  for (auto _ : state) benchmark::DoNotOptimize(classify(model, image));
}
BENCHMARK(BM_Classify);

void BM_AdaptiveInfer(benchmark::State& state) {
  const GfnetConfig c = default_student_config();
  const GfnetModel model(c, 13);
  ExitConfig ec;
  ec.tau = static_cast<double>(state.range(0)) / 10.0;
  const ExitBundle bundle = ExitBundle::create(c, ec, 14);
  const CostModel cost = make_cost_model(c, bundle.layers());
  const TensorR image = random_grid({c.image_size, c.image_size, kImageChannels}, 15);
  for (auto _ : state) benchmark::DoNotOptimize(adaptive_infer(model, &bundle, cost, image));
}
BENCHMARK(BM_AdaptiveInfer)->Arg(0)->Arg(10);

}  // namespace

BENCHMARK_MAIN();
