#include <benchmark/benchmark.h>

#include "loupe/fourier.hpp"
#include "loupe/metrics.hpp"
#include "loupe/rng.hpp"
#include "loupe/training.hpp"

using namespace loupe;

namespace {

template <typename Real>
Tensor<Real> noise(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<Real> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<Real>(rng.uniform(-1.0, 1.0));
  return t;
}

void BM_Conv3x3Forward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  Parameter<float> w("w", noise<float>({c, c, 3, 3}, 1));
  Parameter<float> b("b", noise<float>({c}, 2));
  Graph<float> g;
  Node x = g.input("x", {8, c, n, n}, false);
  Node y = g.conv2d(x, g.parameter(w), g.parameter(b));
  const Bindings<float> in{{"x", noise<float>({8, c, n, n}, 3)}};
  for (auto _ : state) {
    g.evaluate(in);
    benchmark::DoNotOptimize(g.value(y).raw());
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv3x3Forward)->Args({8, 64})->Args({16, 64})->Args({32, 32});

void BM_Conv3x3ForwardBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  Parameter<float> w("w", noise<float>({c, c, 3, 3}, 1));
  Graph<float> g;
  Node x = g.input("x", {8, c, n, n});
  Node loss = g.mean(g.square(g.conv2d(x, g.parameter(w))));
  const Bindings<float> in{{"x", noise<float>({8, c, n, n}, 3)}};
  for (auto _ : state) {
    g.evaluate(in);
    g.backpropagate(loss, Tensor<float>::scalar(1.0f));
    benchmark::DoNotOptimize(w.gradient.raw());
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv3x3ForwardBackward)->Args({8, 64})->Args({16, 64});

void BM_Dft2(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto algorithm = state.range(1) ? fourier::Algorithm::Radix2 : fourier::Algorithm::Direct;
  const auto x = noise<float>({8, 2, n, n}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(fourier::dft2(x, algorithm).raw());
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Dft2)->Args({64, 0})->Args({64, 1})->Args({128, 0})->Args({128, 1});

void BM_LoupeTrainStep(benchmark::State& state) {
  const auto depth = static_cast<std::size_t>(state.range(0));
  const auto base = static_cast<std::size_t>(state.range(1));
  Rng rng(5);
  auto mask = init_prob_mask<float>(64, 64, 0.25, 5.0, 200.0, false, Axis::Rows, rng);
  UNetConfig unet;
  unet.depth = depth;
  unet.base_channels = base;
  auto w = init_unet<float>(unet);
  auto lg = build_loupe_graph(mask, w, unet, 8, LossKind::MagnitudeL2);
  auto params = w.trainable();
  params.push_back(&mask.logits);
  AdamState<float> adam;
  const auto x = noise<float>({8, 2, 64, 64}, 6);
  for (auto _ : state) {
    lg.graph.evaluate({{"x", x}, {"u0", draw_uniforms<float>(rng, 8, 64, 64, 1)[0]}});
    lg.graph.backpropagate(lg.loss, Tensor<float>::scalar(1.0f));
    adam_update(adam, params, 1e-3);
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_LoupeTrainStep)->Args({3, 8})->Args({4, 16})->Unit(benchmark::kMillisecond);

void BM_Ssim(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = noise<double>({n, n}, 7);
  const auto y = noise<double>({n, n}, 8);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(x, y));
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(320);

void BM_Hfen(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = noise<double>({n, n}, 9);
  const auto y = noise<double>({n, n}, 10);
  for (auto _ : state) benchmark::DoNotOptimize(hfen(x, y));
}
BENCHMARK(BM_Hfen)->Arg(64)->Arg(320);

} // namespace

BENCHMARK_MAIN();
