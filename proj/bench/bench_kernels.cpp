// Parallel kernels against the serial reference on U-Net-sized layers.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "actnet/kernels.hpp"
#include "actnet/reference.hpp"

namespace {

using namespace actnet;

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Args: channels (in == out), side, kernel.
kernels::ConvGeometry conv_geometry(const benchmark::State& s) {
  const int c = static_cast<int>(s.range(0)), side = static_cast<int>(s.range(1));
  return {10, c, c, side, side, static_cast<int>(s.range(2))};
}

template <bool Parallel>
void conv_forward(benchmark::State& state) {
  const auto g = conv_geometry(state);
  const auto x = noise(static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width, 1);
  const auto w = noise(static_cast<std::size_t>(g.out_channels) * g.in_channels * g.kernel * g.kernel, 2);
  const auto b = noise(static_cast<std::size_t>(g.out_channels), 3);
  std::vector<float> y(static_cast<std::size_t>(g.batch) * g.out_channels * g.height * g.width);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::conv2d_forward<float>(g, x, w, b, y);
    else
      reference::conv2d_forward<float>(g, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["FLOP/s"] = benchmark::Counter(
      2.0 * g.batch * g.out_channels * g.in_channels * g.kernel * g.kernel * g.height * g.width,
      benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Parallel>
void conv_backward(benchmark::State& state) {
  const auto g = conv_geometry(state);
  const auto x = noise(static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width, 1);
  const auto w = noise(static_cast<std::size_t>(g.out_channels) * g.in_channels * g.kernel * g.kernel, 2);
  const auto dy = noise(static_cast<std::size_t>(g.batch) * g.out_channels * g.height * g.width, 3);
  std::vector<float> dx(x.size()), dw(w.size()), db(static_cast<std::size_t>(g.out_channels));
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::conv2d_backward<float>(g, x, w, dy, dx, dw, db);
    else
      reference::conv2d_backward<float>(g, x, w, dy, dx, dw, db);
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Parallel>
void upconv_forward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0)), side = static_cast<int>(state.range(1));
  const kernels::UpGeometry g{10, 2 * c, c, side, side};
  const auto x = noise(static_cast<std::size_t>(g.batch) * g.in_channels * side * side, 1);
  const auto w = noise(static_cast<std::size_t>(g.in_channels) * g.out_channels * 4, 2);
  const auto b = noise(static_cast<std::size_t>(g.out_channels), 3);
  std::vector<float> y(static_cast<std::size_t>(g.batch) * g.out_channels * 4 * side * side);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::upconv2x2_forward<float>(g, x, w, b, y);
    else
      reference::upconv2x2_forward<float>(g, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void batchnorm_train(benchmark::State& state) {
  const kernels::PlaneGeometry g{10, static_cast<int>(state.range(0)), static_cast<int>(state.range(1)),
                                 static_cast<int>(state.range(1))};
  const auto x = noise(static_cast<std::size_t>(g.size()), 1);
  const std::vector<float> gamma(static_cast<std::size_t>(g.channels), 1.f), beta(gamma.size(), 0.f);
  std::vector<float> rm(gamma.size(), 0.f), rv(gamma.size(), 1.f), inv(gamma.size());
  std::vector<float> y(x.size()), xhat(x.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::batchnorm_forward_train<float>(g, x, gamma, beta, 1e-5f, 0.1f, rm, rv, y, xhat, inv);
    else
      reference::batchnorm_forward_train<float>(g, x, gamma, beta, 1e-5f, 0.1f, rm, rv, y, xhat, inv);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void maxpool(benchmark::State& state) {
  const kernels::PlaneGeometry g{10, static_cast<int>(state.range(0)), static_cast<int>(state.range(1)),
                                 static_cast<int>(state.range(1))};
  const auto x = noise(static_cast<std::size_t>(g.size()), 1);
  std::vector<float> y(x.size() / 4);
  std::vector<std::uint8_t> arg(y.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::maxpool2x2_forward<float>(g, x, y, arg);
    else
      reference::maxpool2x2_forward<float>(g, x, y, arg);
    benchmark::DoNotOptimize(y.data());
  }
}

// Stage shapes of U-Net[3,8] and U-Net[4,16] at 64 px.
void conv_args(benchmark::internal::Benchmark* b) {
  for (auto [c, side] : {std::pair{8, 64}, {16, 32}, {32, 16}, {64, 8}}) b->Args({c, side, 3});
  b->Args({8, 64, 1});
  b->Unit(benchmark::kMillisecond);
}

void plane_args(benchmark::internal::Benchmark* b) {
  for (auto [c, side] : {std::pair{8, 64}, {16, 32}, {32, 16}}) b->Args({c, side});
  b->Unit(benchmark::kMicrosecond);
}

}  // namespace

BENCHMARK(conv_forward<true>)->Name("conv_forward/parallel")->Apply(conv_args);
BENCHMARK(conv_forward<false>)->Name("conv_forward/reference")->Apply(conv_args);
BENCHMARK(conv_backward<true>)->Name("conv_backward/parallel")->Apply(conv_args);
BENCHMARK(conv_backward<false>)->Name("conv_backward/reference")->Apply(conv_args);
BENCHMARK(upconv_forward<true>)->Name("upconv_forward/parallel")->Apply(plane_args);
BENCHMARK(upconv_forward<false>)->Name("upconv_forward/reference")->Apply(plane_args);
BENCHMARK(batchnorm_train<true>)->Name("batchnorm_train/parallel")->Apply(plane_args);
BENCHMARK(batchnorm_train<false>)->Name("batchnorm_train/reference")->Apply(plane_args);
BENCHMARK(maxpool<true>)->Name("maxpool/parallel")->Apply(plane_args);
BENCHMARK(maxpool<false>)->Name("maxpool/reference")->Apply(plane_args);

BENCHMARK_MAIN();
