#include <omp.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "oocr/kernels.hpp"
#include "test_util.hpp"

namespace k = oocr::kernels;

namespace {

std::vector<float> rand_vec(std::size_t n, std::mt19937_64& rng) { return testutil::random_vector(n, rng); }

// Parallel and reference kernels sum in different orders; allow rounding
// proportional to the magnitude of the terms (inputs are in [-1, 1]).
void check_same(const std::vector<float>& a, const std::vector<float>& b, double terms = 128) {
  REQUIRE(a.size() == b.size());
  CHECK(testutil::max_abs_diff(a, b) <= 4e-7 * terms);
}

}  // namespace

TEST_CASE("parallel gemm kernels match the serial reference") {
  std::mt19937_64 rng(1);
  for (auto [m, kk, n] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 1, 1},
                          {7, 13, 5},
                          {33, 64, 17},
                          {64, 16, 128}}) {
    CAPTURE(m);
    CAPTURE(kk);
    CAPTURE(n);
    for (bool acc : {false, true}) {
      const auto a = rand_vec(m * kk, rng), b_nn = rand_vec(kk * n, rng), b_nt = rand_vec(n * kk, rng);
      const auto a_t = rand_vec(kk * m, rng);
      const auto init = rand_vec(m * n, rng);

      auto c1 = init, c2 = init;
      k::gemm_nn(a, b_nn, c1, m, kk, n, acc);
      k::reference::gemm_nn(a, b_nn, c2, m, kk, n, acc);
      check_same(c1, c2);

      c1 = init, c2 = init;
      k::gemm_nt(a, b_nt, c1, m, kk, n, acc);
      k::reference::gemm_nt(a, b_nt, c2, m, kk, n, acc);
      check_same(c1, c2);

      c1 = init, c2 = init;
      k::gemm_tn(a_t, b_nn, c1, m, kk, n, acc);
      k::reference::gemm_tn(a_t, b_nn, c2, m, kk, n, acc);
      check_same(c1, c2);
    }
  }
}

TEST_CASE("reference gemm agrees with hand arithmetic") {
  const std::vector<float> a = {1, 2, 3, 4};  // 2x2
  const std::vector<float> b = {5, 6, 7, 8};  // 2x2
  std::vector<float> c(4);
  k::reference::gemm_nn(a, b, c, 2, 2, 2, false);
  CHECK(c == std::vector<float>{19, 22, 43, 50});
  k::reference::gemm_nt(a, b, c, 2, 2, 2, false);
  CHECK(c == std::vector<float>{17, 23, 39, 53});
  k::reference::gemm_tn(a, b, c, 2, 2, 2, false);
  CHECK(c == std::vector<float>{26, 30, 38, 44});
}

TEST_CASE("parallel attention kernels match the serial reference") {
  std::mt19937_64 rng(2);
  for (const k::AttentionDims dims : {k::AttentionDims{1, 1, 1, 1}, k::AttentionDims{2, 5, 3, 4},
                                      k::AttentionDims{4, 9, 4, 16}}) {
    const std::size_t rows = dims.batch * dims.seq;
    const std::size_t srows = dims.batch * dims.heads * dims.seq;
    const auto q = rand_vec(rows * dims.width(), rng), kk = rand_vec(rows * dims.width(), rng);
    const auto v = rand_vec(rows * dims.width(), rng);
    const auto pattern = rand_vec(srows * dims.seq, rng), dscores = rand_vec(srows * dims.seq, rng);
    const auto dout = rand_vec(rows * dims.width(), rng);

    std::vector<float> s1(srows * dims.seq), s2(srows * dims.seq);
    k::attention_scores(q, kk, s1, dims, 0.25f);
    k::reference::attention_scores(q, kk, s2, dims, 0.25f);
    check_same(s1, s2);

    auto dq1 = rand_vec(q.size(), rng), dk1 = rand_vec(q.size(), rng);
    auto dq2 = dq1, dk2 = dk1;
    k::attention_scores_backward(dscores, q, kk, dq1, dk1, dims, 0.25f);
    k::reference::attention_scores_backward(dscores, q, kk, dq2, dk2, dims, 0.25f);
    check_same(dq1, dq2);
    check_same(dk1, dk2);

    std::vector<float> o1(rows * dims.width()), o2(rows * dims.width());
    k::attention_mix(pattern, v, o1, dims);
    k::reference::attention_mix(pattern, v, o2, dims);
    check_same(o1, o2);

    std::vector<float> dp1(pattern.size(), 0.0f), dv1(v.size(), 0.0f);
    auto dp2 = dp1, dv2 = dv1;
    k::attention_mix_backward(dout, pattern, v, dp1, dv1, dims);
    k::reference::attention_mix_backward(dout, pattern, v, dp2, dv2, dims);
    check_same(dp1, dp2);
    check_same(dv1, dv2);

    // Empty outputs skip that gradient.
    std::vector<float> dv3(v.size(), 0.0f);
    k::attention_mix_backward(dout, pattern, v, {}, dv3, dims);
    check_same(dv3, dv1);
  }
  CHECK(k::max_threads() >= 1);
}

TEST_CASE("parallel kernels do not depend on the thread count") {
  std::mt19937_64 rng(3);
  const std::size_t m = 96, kk = 80, n = 72;
  const auto a = rand_vec(m * kk, rng), b = rand_vec(kk * n, rng), bt = rand_vec(n * kk, rng);
  auto run = [&](int threads, const std::function<void(std::vector<float>&)>& kernel) {
    const int saved = omp_get_max_threads();
    omp_set_num_threads(threads);
    std::vector<float> c(m * n);
    kernel(c);
    omp_set_num_threads(saved);
    return c;
  };
  const auto nn = [&](std::vector<float>& c) { k::gemm_nn(a, b, c, m, kk, n, false); };
  const auto nt = [&](std::vector<float>& c) { k::gemm_nt(a, bt, c, m, kk, n, false); };
  CHECK(run(1, nn) == run(4, nn));
  CHECK(run(1, nt) == run(3, nt));
}
