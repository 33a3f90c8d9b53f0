#include <benchmark/benchmark.h>

#include "fwl/linear_attention.hpp"
#include "fwl/numerics.hpp"

namespace {

using fwl::Matrix;

void BM_MatmulReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  fwl::Rng rng(1);
  const Matrix a = fwl::random_matrix(n, n, rng, 1), b = fwl::random_matrix(n, n, rng, 1);
  for (auto _ : state) benchmark::DoNotOptimize(fwl::matmul_reference(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

void BM_MatmulParallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  fwl::Rng rng(1);
  const Matrix a = fwl::random_matrix(n, n, rng, 1), b = fwl::random_matrix(n, n, rng, 1);
  for (auto _ : state) benchmark::DoNotOptimize(fwl::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

void BM_AttentionQuadratic(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  fwl::Rng rng(2);
  const Matrix q = fwl::random_matrix(t, 64, rng, 1), k = fwl::random_matrix(t, 64, rng, 1),
               v = fwl::random_matrix(t, 64, rng, 1);
  fwl::KernelStats stats;
  for (auto _ : state) benchmark::DoNotOptimize(fwl::causal_linear_attention(q, k, v, std::nullopt, &stats));
  state.counters["flops"] = static_cast<double>(fwl::quadratic_attention_flops(t, 64, 64, false));
}

void BM_AttentionChunked(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  fwl::Rng rng(2);
  const Matrix q = fwl::random_matrix(t, 64, rng, 1), k = fwl::random_matrix(t, 64, rng, 1),
               v = fwl::random_matrix(t, 64, rng, 1);
  for (auto _ : state) benchmark::DoNotOptimize(fwl::chunked_causal_linear_attention(q, k, v, 128));
  state.counters["flops"] = static_cast<double>(fwl::chunked_attention_flops(t, 128, 64, 64, false));
}

}  // namespace

BENCHMARK(BM_MatmulReference)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulParallel)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_AttentionQuadratic)->Arg(512)->Arg(4096);
BENCHMARK(BM_AttentionChunked)->Arg(512)->Arg(4096);

BENCHMARK_MAIN();
