#pragma once

// Dense float kernels used by the tensor engine.
//
// Every kernel has two implementations: the OpenMP one in `oocr::kernels`
// that the engine calls, and a plain serial loop nest in
// `oocr::kernels::reference` kept for testing and benchmarking. The parallel
// kernels write each output element from a single thread in a fixed
// summation order, so their results do not depend on the thread count. They
// sum in a different order than the reference loops (split accumulators), so
// the two agree to rounding, not bit for bit.
//
// All matrices are row-major. `accumulate == false` overwrites the output.

#include <cstddef>
#include <span>

namespace oocr::kernels {

/// Shape of the packed (batch * seq) x (heads * head_dim) layout used by the
/// attention kernels. Scores and patterns are (batch * heads * seq) x seq.
struct AttentionDims {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;

  std::size_t width() const { return heads * head_dim; }
};

// C[m x n] = A[m x k] * B[k x n]
void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
// C[m x n] = A[m x k] * B[n x k]^T
void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
// C[m x n] = A[k x m]^T * B[k x n]
void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// scores[(b,h,i), j] = scale * <q[b,i,h,:], k[b,j,h,:]>
void attention_scores(std::span<const float> q, std::span<const float> k,
                      std::span<float> scores, const AttentionDims& dims, float scale);
// Accumulates into dq / dk. Either output may be empty to skip it.
void attention_scores_backward(std::span<const float> dscores, std::span<const float> q,
                               std::span<const float> k, std::span<float> dq,
                               std::span<float> dk, const AttentionDims& dims, float scale);

// out[b,i,h,:] = sum_j pattern[(b,h,i), j] * v[b,j,h,:]
void attention_mix(std::span<const float> pattern, std::span<const float> v,
                   std::span<float> out, const AttentionDims& dims);
// Accumulates into dpattern / dv. Either output may be empty to skip it.
void attention_mix_backward(std::span<const float> dout, std::span<const float> pattern,
                            std::span<const float> v, std::span<float> dpattern,
                            std::span<float> dv, const AttentionDims& dims);

/// Number of threads the parallel kernels will use.
int max_threads();

namespace reference {

void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);
void attention_scores(std::span<const float> q, std::span<const float> k,
                      std::span<float> scores, const AttentionDims& dims, float scale);
void attention_scores_backward(std::span<const float> dscores, std::span<const float> q,
                               std::span<const float> k, std::span<float> dq,
                               std::span<float> dk, const AttentionDims& dims, float scale);
void attention_mix(std::span<const float> pattern, std::span<const float> v,
                   std::span<float> out, const AttentionDims& dims);
void attention_mix_backward(std::span<const float> dout, std::span<const float> pattern,
                            std::span<const float> v, std::span<float> dpattern,
                            std::span<float> dv, const AttentionDims& dims);

}  // namespace reference
}  // namespace oocr::kernels
