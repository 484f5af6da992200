// Parallel kernels against their serial references.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "gbe/kernels.hpp"

namespace {

std::vector<double> random_values(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

gbe::kernels::ConvGeometry geometry(const benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const int hw = static_cast<int>(state.range(1));
  return {c, c, 3, 1, 1, hw, hw};
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
  const auto g = geometry(state);
  const auto x = random_values(static_cast<std::size_t>(g.cin) * g.h * g.w, 1);
  const auto w = random_values(static_cast<std::size_t>(g.cout) * g.patch(), 2);
  std::vector<double> y(static_cast<std::size_t>(g.cout) * g.out_h() * g.out_w());
  for (auto _ : state) {
    if constexpr (Parallel) {
      gbe::kernels::conv2d_forward(g, 1, x.data(), w.data(), {}, y.data());
    } else {
      gbe::kernels::reference::conv2d_forward(g, 1, x.data(), w.data(), {}, y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(
      2.0 * g.cout * g.patch() * g.out_h() * g.out_w(), benchmark::Counter::kIsIterationInvariantRate,
      benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_ConvBackwardWeight(benchmark::State& state) {
  const auto g = geometry(state);
  const auto x = random_values(static_cast<std::size_t>(g.cin) * g.h * g.w, 1);
  const auto dy = random_values(static_cast<std::size_t>(g.cout) * g.out_h() * g.out_w(), 3);
  std::vector<double> dw(static_cast<std::size_t>(g.cout) * g.patch());
  for (auto _ : state) {
    if constexpr (Parallel) {
      gbe::kernels::conv2d_backward_weight(g, 1, x.data(), dy.data(), dw.data(), {});
    } else {
      gbe::kernels::reference::conv2d_backward_weight(g, 1, x.data(), dy.data(), dw.data(), {});
    }
    benchmark::DoNotOptimize(dw.data());
  }
}

template <bool Parallel>
void BM_ConvBackwardInput(benchmark::State& state) {
  const auto g = geometry(state);
  const auto w = random_values(static_cast<std::size_t>(g.cout) * g.patch(), 2);
  const auto dy = random_values(static_cast<std::size_t>(g.cout) * g.out_h() * g.out_w(), 3);
  std::vector<double> dx(static_cast<std::size_t>(g.cin) * g.h * g.w);
  for (auto _ : state) {
    if constexpr (Parallel) {
      gbe::kernels::conv2d_backward_input(g, 1, dy.data(), w.data(), dx.data());
    } else {
      gbe::kernels::reference::conv2d_backward_input(g, 1, dy.data(), w.data(), dx.data());
    }
    benchmark::DoNotOptimize(dx.data());
  }
}

template <bool Parallel>
void BM_PolynomialKernelSums(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int d = static_cast<int>(state.range(1));
  const auto x = random_values(static_cast<std::size_t>(n) * d, 4);
  const auto y = random_values(static_cast<std::size_t>(n) * d, 5);
  for (auto _ : state) {
    auto s = Parallel ? gbe::kernels::polynomial_kernel_sums(x.data(), n, y.data(), n, d)
                      : gbe::kernels::reference::polynomial_kernel_sums(x.data(), n, y.data(), n, d);
    benchmark::DoNotOptimize(s);
  }
}

template <bool Parallel>
void BM_BestEqualCount(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  std::mt19937 rng(6);
  std::vector<std::int32_t> q(static_cast<std::size_t>(n) * 256), p(q.size());
  for (auto& v : q) v = static_cast<std::int32_t>(rng() % 5);
  for (auto& v : p) v = static_cast<std::int32_t>(rng() % 5);
  for (auto _ : state) {
    auto r = Parallel ? gbe::kernels::best_equal_count(q.data(), n, p.data(), n, 256)
                      : gbe::kernels::reference::best_equal_count(q.data(), n, p.data(), n, 256);
    benchmark::DoNotOptimize(r.data());
  }
}

}  // namespace

BENCHMARK(BM_ConvForward<true>)->Args({8, 32})->Args({16, 64})->Args({64, 32});
BENCHMARK(BM_ConvForward<false>)->Args({8, 32})->Args({16, 64})->Args({64, 32});
BENCHMARK(BM_ConvBackwardWeight<true>)->Args({8, 32})->Args({16, 64});
BENCHMARK(BM_ConvBackwardWeight<false>)->Args({8, 32})->Args({16, 64});
BENCHMARK(BM_ConvBackwardInput<true>)->Args({8, 32})->Args({16, 64});
BENCHMARK(BM_ConvBackwardInput<false>)->Args({8, 32})->Args({16, 64});
BENCHMARK(BM_PolynomialKernelSums<true>)->Args({200, 64});
BENCHMARK(BM_PolynomialKernelSums<false>)->Args({200, 64});
BENCHMARK(BM_BestEqualCount<true>)->Arg(400);
BENCHMARK(BM_BestEqualCount<false>)->Arg(400);

BENCHMARK_MAIN();
