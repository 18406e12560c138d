// Serial reference vs OpenMP variants of the hot kernels.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "lowkey/imaging.hpp"
#include "lowkey/kernels.hpp"

namespace k = lowkey::kernels;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// A mid-network residual-stage layer: 32 -> 32 channels at 28x28.
k::ConvShape conv_shape() { return {32, 28, 28, 32, 3, 1, 1}; }

template <bool Omp>
void BM_ConvForward(benchmark::State& st) {
  const auto s = conv_shape();
  const auto in = noise(std::size_t(s.in_channels) * s.in_height * s.in_width, 1);
  const auto w = noise(s.weight_count(), 2);
  const auto b = noise(s.out_channels, 3);
  std::vector<float> out(std::size_t(s.out_channels) * s.out_height() * s.out_width());
  for (auto _ : st) {
    if constexpr (Omp)
      k::omp::conv2d_forward(s, in.data(), w.data(), b.data(), out.data());
    else
      k::serial::conv2d_forward(s, in.data(), w.data(), b.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Omp>
void BM_ConvBackward(benchmark::State& st) {
  const auto s = conv_shape();
  const auto in = noise(std::size_t(s.in_channels) * s.in_height * s.in_width, 1);
  const auto w = noise(s.weight_count(), 2);
  const auto go = noise(std::size_t(s.out_channels) * s.out_height() * s.out_width(), 3);
  std::vector<float> gi(in.size()), gw(w.size()), gb(s.out_channels);
  for (auto _ : st) {
    if constexpr (Omp)
      k::omp::conv2d_backward(s, in.data(), w.data(), go.data(), gi.data(), gw.data(), gb.data());
    else
      k::serial::conv2d_backward(s, in.data(), w.data(), go.data(), gi.data(), gw.data(), gb.data());
    benchmark::DoNotOptimize(gi.data());
  }
}

// The attack's G on a 256x256 photo.
template <bool Omp>
void BM_Smooth(benchmark::State& st) {
  const lowkey::imaging::SmoothingKernel g(3.0, 7);
  const int h = 256, wd = 256;
  const auto in = noise(3u * h * wd, 4);
  std::vector<float> out(in.size());
  for (auto _ : st) {
    if constexpr (Omp)
      k::omp::smooth_separable(3, h, wd, g.taps(), in.data(), out.data());
    else
      k::serial::smooth_separable(3, h, wd, g.taps(), in.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Omp>
void BM_Warp(benchmark::State& st) {
  const double inv[6] = {1.7, 0.2, 20, -0.2, 1.7, 30};
  const auto plan = k::make_warp_plan(256, 256, 112, 112, inv);
  const auto in = noise(3u * 256 * 256, 5);
  std::vector<float> out(3u * 112 * 112);
  for (auto _ : st) {
    if constexpr (Omp)
      k::omp::warp_forward(plan, 3, in.data(), out.data());
    else
      k::serial::warp_forward(plan, 3, in.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

// Gallery scan: 10k entries of dimension 512.
template <bool Omp>
void BM_SquaredL2Rows(benchmark::State& st) {
  const std::size_t dim = 512, n = 10000;
  const auto q = noise(dim, 6);
  const auto rows = noise(dim * n, 7);
  std::vector<double> out(n);
  for (auto _ : st) {
    if constexpr (Omp)
      k::omp::squared_l2_rows(q, rows, dim, out);
    else
      k::serial::squared_l2_rows(q, rows, dim, out);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/serial");
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/omp");
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/serial");
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/omp");
BENCHMARK(BM_Smooth<false>)->Name("smooth/serial");
BENCHMARK(BM_Smooth<true>)->Name("smooth/omp");
BENCHMARK(BM_Warp<false>)->Name("warp/serial");
BENCHMARK(BM_Warp<true>)->Name("warp/omp");
BENCHMARK(BM_SquaredL2Rows<false>)->Name("gallery_l2/serial");
BENCHMARK(BM_SquaredL2Rows<true>)->Name("gallery_l2/omp");

BENCHMARK_MAIN();
