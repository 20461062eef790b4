#include <benchmark/benchmark.h>

#include "erienet/losses.hpp"
#include "erienet/model.hpp"
#include "erienet/ops.hpp"
#include "erienet/rng.hpp"
#include "erienet/trainer.hpp"
#include "erienet/wavelet.hpp"

namespace erienet {
namespace {

Tensor<float> noise(Shape s, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "bench");
  Tensor<float> t(s);
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform());
  return t;
}

// 3x3 same-padded conv, C -> C channels on a 64x64 map.
void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const Tensor<float> x = noise({1, c, 64, 64}, 1);
  const Tensor<float> w = noise({c, c, 3, 3}, 2);
  const Tensor<float> b(Shape{1, c, 1, 1});
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 1, 1));
  state.counters["flops"] = benchmark::Counter(2.0 * 9 * c * c * 64 * 64, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_HaarPyramid(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor<float> x = noise({1, 3, n, n}, 3);
  for (auto _ : state) {
    auto p = dwt_pyramid(x, 3);
    benchmark::DoNotOptimize(idwt_pyramid(p));
  }
}
BENCHMARK(BM_HaarPyramid)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_Ssim(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor<float> x = noise({1, 3, n, n}, 4), y = noise({1, 3, n, n}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(ssim_metric(x, y));
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_TotalLossBackward(benchmark::State& state) {
  const Tensor<float> gt = noise({4, 3, 32, 32}, 6);
  for (auto _ : state) {
    Tensor<float> out = noise({4, 3, 32, 32}, 7);
    out.set_requires_grad();
    Tape<float> tape;
    Tensor<float> loss;
    {
      Recording<float> rec(tape);
      loss = total_loss(out, gt).total;
    }
    tape.backward(loss);
    benchmark::DoNotOptimize(out.grad().data());
  }
}
BENCHMARK(BM_TotalLossBackward)->Unit(benchmark::kMillisecond);

// Eval forward of the default network on an H x H mosaic.
void BM_Forward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Model<float> model = Model<float>::build(ModelConfig{}, 0);
  const Tensor<float> packed = noise({1, 4, n / 2, n / 2}, 8);
  const Tensor<float> green(Shape{1, 2, n / 2, n / 2});
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(packed, green, Mode::eval));
  state.counters["fps"] = benchmark::Counter(1.0, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  SyntheticOptions so;
  so.count = 8;
  Trainer trainer(Model<float>::build(ModelConfig{}, 0), synthetic_dataset(so), TrainOptions{});
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step());
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace erienet

// Own main: the distro benchmark_main archive is built with an incompatible LTO version.
BENCHMARK_MAIN();
