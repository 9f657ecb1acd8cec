#include "amg/kernels.hpp"

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

namespace {

std::vector<amg::real> random_matrix(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.f, 1.f);
  std::vector<amg::real> m(static_cast<size_t>(rows) * cols);
  for (auto& v : m) v = dist(rng);
  return m;
}

void bench_matmul_serial(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_matrix(n, n, 1);
  const auto b = random_matrix(n, n, 2);
  std::vector<amg::real> c(static_cast<size_t>(n) * n);
  for (auto _ : state) {
    amg::kernels::matmul_serial(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
}

void bench_matmul_parallel(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_matrix(n, n, 1);
  const auto b = random_matrix(n, n, 2);
  std::vector<amg::real> c(static_cast<size_t>(n) * n);
  for (auto _ : state) {
    amg::kernels::matmul(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
}

void bench_matmul_bt_serial(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_matrix(n, n, 1);
  const auto b = random_matrix(n, n, 2);
  std::vector<amg::real> c(static_cast<size_t>(n) * n);
  for (auto _ : state) {
    amg::kernels::matmul_bt_serial(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
}

void bench_matmul_bt_parallel(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_matrix(n, n, 1);
  const auto b = random_matrix(n, n, 2);
  std::vector<amg::real> c(static_cast<size_t>(n) * n);
  for (auto _ : state) {
    amg::kernels::matmul_bt(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
}

}  // namespace

BENCHMARK(bench_matmul_serial)->Arg(64)->Arg(128)->Arg(256)->Arg(512);
BENCHMARK(bench_matmul_parallel)->Arg(64)->Arg(128)->Arg(256)->Arg(512);
BENCHMARK(bench_matmul_bt_serial)->Arg(128)->Arg(512);
BENCHMARK(bench_matmul_bt_parallel)->Arg(128)->Arg(512);

BENCHMARK_MAIN();
