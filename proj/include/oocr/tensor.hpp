#pragma once

// Dense float32 tensors with tape-free reverse-mode differentiation.
//
// Each op result keeps shared ownership of its inputs plus a closure that
// propagates its gradient into them. `Tensor::backward` walks the graph in
// reverse topological order. Tensors are rank 1 or 2 for every op here; a
// rank-1 tensor behaves as a 1 x n row when an op needs a matrix.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "oocr/errors.hpp"

namespace oocr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor randn(Shape shape, float stddev, std::mt19937_64& rng, bool requires_grad = false);
  static Tensor uniform(Shape shape, float bound, std::mt19937_64& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<float> data();
  std::span<const float> data() const;
  std::vector<float> to_vector() const;
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  /// Op that produced this tensor ("leaf" for user-created tensors).
  const std::string& op() const;

  /// Copy of the values with no graph attached.
  Tensor detach() const;

  /// Reverse pass from a scalar. Gradients accumulate into every reachable
  /// tensor that requires them.
  void backward() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend struct TensorAccess;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- primitive ops ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor sum(const Tensor& a);
Tensor silu(const Tensor& a);
/// Row-wise x / sqrt(mean(x^2) + eps) * gain.
Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps);
/// Rows of `table` selected by `ids`.
Tensor embedding(std::span<const int> ids, const Tensor& table);
Tensor softmax_rows(const Tensor& x);
/// Sets entries above the diagonal of each seq x seq block to -inf. Row r
/// belongs to query position r % seq_len.
Tensor causal_mask(const Tensor& scores, std::size_t seq_len);
/// Mean token cross-entropy over rows whose target is >= 0.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
/// Inverted dropout; identity when `train` is false or p == 0.
Tensor dropout(const Tensor& x, float p, bool train, std::mt19937_64& rng);

/// x + v on every row where mask[row] != 0. v has width cols(x).
Tensor add_rowvec_masked(const Tensor& x, const Tensor& v, std::span<const std::uint8_t> mask);
/// Gathers rows of x in the given order.
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
/// Copy of x with listed rows overwritten by the matching rows of `values`
/// (values is rows.size() x cols). Overwritten rows pass no gradient.
Tensor replace_rows(const Tensor& x, std::span<const std::size_t> rows, const Tensor& values);

/// Per-head attention logits for packed (batch*seq) x (heads*head_dim) inputs.
Tensor head_scores(const Tensor& q, const Tensor& k, std::size_t heads, std::size_t seq_len,
                   float scale);
/// Per-head weighted sum of values; inverse layout of head_scores.
Tensor head_mix(const Tensor& pattern, const Tensor& v, std::size_t heads, std::size_t seq_len);

}  // namespace oocr
