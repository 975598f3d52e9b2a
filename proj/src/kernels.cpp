#include "oocr/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdint>

namespace oocr::kernels {
namespace {

// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1u << 15;

inline float dot(const float* x, const float* y, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t p = 0;
  for (; p + 8 <= n; p += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += x[p + l] * y[p + l];
  }
  float tail = 0.0f;
  for (; p < n; ++p) tail += x[p] * y[p];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

inline void axpy(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) y[j] += alpha * x[j];
}

}  // namespace

int max_threads() { return omp_get_max_threads(); }

void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const float* ap = a.data();
  const float* bp = b.data();
  float* cp = c.data();
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
    float* crow = cp + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0f);
    const float* arow = ap + i * k;
    for (std::size_t p = 0; p < k; ++p) axpy(arow[p], bp + p * n, crow, n);
  }
}

void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const float* ap = a.data();
  const float* bp = b.data();
  float* cp = c.data();
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
    const float* arow = ap + i * k;
    float* crow = cp + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const float v = dot(arow, bp + j * k, k);
      crow[j] = accumulate ? crow[j] + v : v;
    }
  }
}

void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const float* ap = a.data();
  const float* bp = b.data();
  float* cp = c.data();
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (std::int64_t i = 0; i < rows; ++i) {
    float* crow = cp + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0f);
    for (std::size_t p = 0; p < k; ++p) axpy(ap[p * m + i], bp + p * n, crow, n);
  }
}

void attention_scores(std::span<const float> q, std::span<const float> k,
                      std::span<float> scores, const AttentionDims& d, float scale) {
  const std::size_t width = d.width();
  const auto groups = static_cast<std::int64_t>(d.batch * d.heads);
#pragma omp parallel for schedule(static) if (d.batch * d.heads * d.seq * d.seq * d.head_dim > kParallelWork)
  for (std::int64_t g = 0; g < groups; ++g) {
    const std::size_t b = g / d.heads;
    const std::size_t h = g % d.heads;
    for (std::size_t i = 0; i < d.seq; ++i) {
      const float* qi = q.data() + (b * d.seq + i) * width + h * d.head_dim;
      float* srow = scores.data() + (g * d.seq + i) * d.seq;
      for (std::size_t j = 0; j < d.seq; ++j) {
        const float* kj = k.data() + (b * d.seq + j) * width + h * d.head_dim;
        srow[j] = scale * dot(qi, kj, d.head_dim);
      }
    }
  }
}

void attention_scores_backward(std::span<const float> ds, std::span<const float> q,
                               std::span<const float> k, std::span<float> dq,
                               std::span<float> dk, const AttentionDims& d, float scale) {
  const std::size_t width = d.width();
  const auto groups = static_cast<std::int64_t>(d.batch * d.heads);
#pragma omp parallel for schedule(static) if (d.batch * d.heads * d.seq * d.seq * d.head_dim > kParallelWork)
  for (std::int64_t g = 0; g < groups; ++g) {
    const std::size_t b = g / d.heads;
    const std::size_t h = g % d.heads;
    const std::size_t off = h * d.head_dim;
    if (!dq.empty()) {
      for (std::size_t i = 0; i < d.seq; ++i) {
        const float* dsrow = ds.data() + (g * d.seq + i) * d.seq;
        float* dqi = dq.data() + (b * d.seq + i) * width + off;
        for (std::size_t j = 0; j < d.seq; ++j) {
          axpy(scale * dsrow[j], k.data() + (b * d.seq + j) * width + off, dqi, d.head_dim);
        }
      }
    }
    if (!dk.empty()) {
      for (std::size_t j = 0; j < d.seq; ++j) {
        float* dkj = dk.data() + (b * d.seq + j) * width + off;
        for (std::size_t i = 0; i < d.seq; ++i) {
          const float w = ds[(g * d.seq + i) * d.seq + j];
          axpy(scale * w, q.data() + (b * d.seq + i) * width + off, dkj, d.head_dim);
        }
      }
    }
  }
}

void attention_mix(std::span<const float> pattern, std::span<const float> v,
                   std::span<float> out, const AttentionDims& d) {
  const std::size_t width = d.width();
  const auto groups = static_cast<std::int64_t>(d.batch * d.heads);
#pragma omp parallel for schedule(static) if (d.batch * d.heads * d.seq * d.seq * d.head_dim > kParallelWork)
  for (std::int64_t g = 0; g < groups; ++g) {
    const std::size_t b = g / d.heads;
    const std::size_t off = (g % d.heads) * d.head_dim;
    for (std::size_t i = 0; i < d.seq; ++i) {
      float* oi = out.data() + (b * d.seq + i) * width + off;
      std::fill(oi, oi + d.head_dim, 0.0f);
      const float* prow = pattern.data() + (g * d.seq + i) * d.seq;
      for (std::size_t j = 0; j < d.seq; ++j) {
        axpy(prow[j], v.data() + (b * d.seq + j) * width + off, oi, d.head_dim);
      }
    }
  }
}

void attention_mix_backward(std::span<const float> dout, std::span<const float> pattern,
                            std::span<const float> v, std::span<float> dpattern,
                            std::span<float> dv, const AttentionDims& d) {
  const std::size_t width = d.width();
  const auto groups = static_cast<std::int64_t>(d.batch * d.heads);
#pragma omp parallel for schedule(static) if (d.batch * d.heads * d.seq * d.seq * d.head_dim > kParallelWork)
  for (std::int64_t g = 0; g < groups; ++g) {
    const std::size_t b = g / d.heads;
    const std::size_t off = (g % d.heads) * d.head_dim;
    if (!dpattern.empty()) {
      for (std::size_t i = 0; i < d.seq; ++i) {
        const float* doi = dout.data() + (b * d.seq + i) * width + off;
        float* dprow = dpattern.data() + (g * d.seq + i) * d.seq;
        for (std::size_t j = 0; j < d.seq; ++j) {
          dprow[j] += dot(doi, v.data() + (b * d.seq + j) * width + off, d.head_dim);
        }
      }
    }
    if (!dv.empty()) {
      for (std::size_t j = 0; j < d.seq; ++j) {
        float* dvj = dv.data() + (b * d.seq + j) * width + off;
        for (std::size_t i = 0; i < d.seq; ++i) {
          const float w = pattern[(g * d.seq + i) * d.seq + j];
          axpy(w, dout.data() + (b * d.seq + i) * width + off, dvj, d.head_dim);
        }
      }
    }
  }
}

namespace reference {

void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += double(a[i * k + p]) * b[p * n + j];
      c[i * n + j] = static_cast<float>(accumulate ? c[i * n + j] + s : s);
    }
  }
}

void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += double(a[i * k + p]) * b[j * k + p];
      c[i * n + j] = static_cast<float>(accumulate ? c[i * n + j] + s : s);
    }
  }
}

void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += double(a[p * m + i]) * b[p * n + j];
      c[i * n + j] = static_cast<float>(accumulate ? c[i * n + j] + s : s);
    }
  }
}

void attention_scores(std::span<const float> q, std::span<const float> k,
                      std::span<float> scores, const AttentionDims& d, float scale) {
  const std::size_t w = d.width();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t h = 0; h < d.heads; ++h)
      for (std::size_t i = 0; i < d.seq; ++i)
        for (std::size_t j = 0; j < d.seq; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < d.head_dim; ++e)
            s += double(q[(b * d.seq + i) * w + h * d.head_dim + e]) *
                 k[(b * d.seq + j) * w + h * d.head_dim + e];
          scores[((b * d.heads + h) * d.seq + i) * d.seq + j] = static_cast<float>(scale * s);
        }
}

void attention_scores_backward(std::span<const float> ds, std::span<const float> q,
                               std::span<const float> k, std::span<float> dq,
                               std::span<float> dk, const AttentionDims& d, float scale) {
  const std::size_t w = d.width();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t h = 0; h < d.heads; ++h)
      for (std::size_t i = 0; i < d.seq; ++i)
        for (std::size_t j = 0; j < d.seq; ++j) {
          const float g = scale * ds[((b * d.heads + h) * d.seq + i) * d.seq + j];
          for (std::size_t e = 0; e < d.head_dim; ++e) {
            const std::size_t qi = (b * d.seq + i) * w + h * d.head_dim + e;
            const std::size_t kj = (b * d.seq + j) * w + h * d.head_dim + e;
            if (!dq.empty()) dq[qi] += g * k[kj];
            if (!dk.empty()) dk[kj] += g * q[qi];
          }
        }
}

void attention_mix(std::span<const float> pattern, std::span<const float> v,
                   std::span<float> out, const AttentionDims& d) {
  const std::size_t w = d.width();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t h = 0; h < d.heads; ++h)
      for (std::size_t i = 0; i < d.seq; ++i)
        for (std::size_t e = 0; e < d.head_dim; ++e) {
          double s = 0.0;
          for (std::size_t j = 0; j < d.seq; ++j)
            s += double(pattern[((b * d.heads + h) * d.seq + i) * d.seq + j]) *
                 v[(b * d.seq + j) * w + h * d.head_dim + e];
          out[(b * d.seq + i) * w + h * d.head_dim + e] = static_cast<float>(s);
        }
}

void attention_mix_backward(std::span<const float> dout, std::span<const float> pattern,
                            std::span<const float> v, std::span<float> dpattern,
                            std::span<float> dv, const AttentionDims& d) {
  const std::size_t w = d.width();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t h = 0; h < d.heads; ++h)
      for (std::size_t i = 0; i < d.seq; ++i)
        for (std::size_t j = 0; j < d.seq; ++j) {
          const std::size_t pij = ((b * d.heads + h) * d.seq + i) * d.seq + j;
          for (std::size_t e = 0; e < d.head_dim; ++e) {
            const std::size_t oi = (b * d.seq + i) * w + h * d.head_dim + e;
            const std::size_t vj = (b * d.seq + j) * w + h * d.head_dim + e;
            if (!dpattern.empty()) dpattern[pij] += dout[oi] * v[vj];
            if (!dv.empty()) dv[vj] += pattern[pij] * dout[oi];
          }
        }
}

}  // namespace reference
}  // namespace oocr::kernels
