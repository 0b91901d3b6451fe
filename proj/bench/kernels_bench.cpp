#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "vipa/numerics/kernels.hpp"

using namespace vipa::kernels;

namespace {

std::vector<float> random_values(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

// Square gemm of side state.range(0).
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<float> c(n * n);
  const GemmArgs args{false, false, false, n, n, n};
  for (auto _ : state) {
    if constexpr (Parallel) parallel::gemm(args, a.data(), b.data(), c.data());
    else serial::gemm(args, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

// Pixel queries attending over a short token sequence, as in the decoder.
template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  const auto nq = static_cast<std::size_t>(state.range(0));
  const std::size_t nk = 12, dim = 64, heads = 4;
  const auto q = random_values(nq * dim, 3), k = random_values(nk * dim, 4), v = random_values(nk * dim, 5);
  const auto dout = random_values(nq * dim, 6);
  std::vector<float> probs(heads * nq * nk), out(nq * dim), dq(nq * dim), dk(nk * dim), dv(nk * dim);
  const AttentionArgs args{nq, nk, dim, heads, 0.25};
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::attention_forward(args, q.data(), k.data(), v.data(), static_cast<const float*>(nullptr), probs.data(), out.data());
      parallel::attention_backward(args, q.data(), k.data(), v.data(), probs.data(), dout.data(), dq.data(), dk.data(),
                                   dv.data());
    } else {
      serial::attention_forward(args, q.data(), k.data(), v.data(), static_cast<const float*>(nullptr), probs.data(), out.data());
      serial::attention_backward(args, q.data(), k.data(), v.data(), probs.data(), dout.data(), dq.data(), dk.data(),
                                 dv.data());
    }
    benchmark::DoNotOptimize(out.data());
    benchmark::DoNotOptimize(dq.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->RangeMultiplier(2)->Range(64, 256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->RangeMultiplier(2)->Range(64, 256);
BENCHMARK(BM_Attention<false>)->Name("attention/serial")->RangeMultiplier(4)->Range(64, 1024);
BENCHMARK(BM_Attention<true>)->Name("attention/parallel")->RangeMultiplier(4)->Range(64, 1024);

BENCHMARK_MAIN();
