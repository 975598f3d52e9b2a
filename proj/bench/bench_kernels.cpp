// OpenMP kernels vs the serial reference loops, at shapes the desk model hits
// (d_model 64, d_mlp 256, batch 32 x seq 40) plus one larger GEMM.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "oocr/kernels.hpp"

namespace k = oocr::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

using Gemm = void (*)(std::span<const float>, std::span<const float>, std::span<float>, std::size_t, std::size_t,
                      std::size_t, bool);

template <Gemm F>
void BM_gemm(benchmark::State& state) {
  const auto m = std::size_t(state.range(0)), kk = std::size_t(state.range(1)), n = std::size_t(state.range(2));
  const auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    F(a, b, c, m, kk, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * std::int64_t(2 * m * kk * n));
  state.counters["threads"] = k::max_threads();
}

// MLP up-projection (tokens x d_model -> d_mlp), its weight gradient, and a
// square 512 GEMM.
#define GEMM_ARGS ->Args({1280, 64, 256})->Args({512, 512, 512})
BENCHMARK(BM_gemm<k::gemm_nn>)->Name("gemm_nn/parallel") GEMM_ARGS;
BENCHMARK(BM_gemm<k::reference::gemm_nn>)->Name("gemm_nn/reference") GEMM_ARGS;
BENCHMARK(BM_gemm<k::gemm_nt>)->Name("gemm_nt/parallel") GEMM_ARGS;
BENCHMARK(BM_gemm<k::reference::gemm_nt>)->Name("gemm_nt/reference") GEMM_ARGS;
BENCHMARK(BM_gemm<k::gemm_tn>)->Name("gemm_tn/parallel") GEMM_ARGS;
BENCHMARK(BM_gemm<k::reference::gemm_tn>)->Name("gemm_tn/reference") GEMM_ARGS;

const k::AttentionDims kDims{32, 40, 4, 16};

template <bool Parallel>
void BM_attention_forward(benchmark::State& state) {
  const auto rows = kDims.batch * kDims.seq;
  const auto q = random_vec(rows * kDims.width(), 3), kv = random_vec(rows * kDims.width(), 4);
  std::vector<float> scores(kDims.batch * kDims.heads * kDims.seq * kDims.seq), out(rows * kDims.width());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::attention_scores(q, kv, scores, kDims, 0.25f);
      k::attention_mix(scores, kv, out, kDims);
    } else {
      k::reference::attention_scores(q, kv, scores, kDims, 0.25f);
      k::reference::attention_mix(scores, kv, out, kDims);
    }
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_attention_forward<true>)->Name("attention_forward/parallel");
BENCHMARK(BM_attention_forward<false>)->Name("attention_forward/reference");

template <bool Parallel>
void BM_attention_backward(benchmark::State& state) {
  const auto rows = kDims.batch * kDims.seq;
  const auto n_scores = kDims.batch * kDims.heads * kDims.seq * kDims.seq;
  const auto q = random_vec(rows * kDims.width(), 5), kv = random_vec(rows * kDims.width(), 6);
  const auto dout = random_vec(rows * kDims.width(), 7), pattern = random_vec(n_scores, 8);
  std::vector<float> dpattern(n_scores), dq(q.size()), dk(q.size()), dv(q.size());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::attention_mix_backward(dout, pattern, kv, dpattern, dv, kDims);
      k::attention_scores_backward(dpattern, q, kv, dq, dk, kDims, 0.25f);
    } else {
      k::reference::attention_mix_backward(dout, pattern, kv, dpattern, dv, kDims);
      k::reference::attention_scores_backward(dpattern, q, kv, dq, dk, kDims, 0.25f);
    }
    benchmark::DoNotOptimize(dq.data());
  }
}
BENCHMARK(BM_attention_backward<true>)->Name("attention_backward/parallel");
BENCHMARK(BM_attention_backward<false>)->Name("attention_backward/reference");

}  // namespace

BENCHMARK_MAIN();
