#include "oocr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "oocr/kernels.hpp"

namespace oocr {

namespace detail {
struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};
}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
  static const NodePtr& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

thread_local bool g_grad_enabled = true;

const NodePtr& node_of(const Tensor& t, const char* op) {
  const auto& n = TensorAccess::node(t);
  if (!n) throw ContractError(std::string(op) + ": undefined tensor operand");
  return n;
}

std::vector<float>& ensure_grad(Node& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0f);
  return n.grad;
}

bool needs_grad(const Node& n) { return n.requires_grad; }

// Creates the output node. Parents are retained only when a gradient has to
// flow back through them.
NodePtr make_node(std::string op, Shape shape, std::vector<float> data,
                  std::initializer_list<NodePtr> parents) {
  auto out = std::make_shared<Node>();
  out->op = std::move(op);
  out->shape = std::move(shape);
  out->data = std::move(data);
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) out->requires_grad = true;
    }
    if (out->requires_grad) out->parents.assign(parents.begin(), parents.end());
  }
  return out;
}

std::size_t rows_of(const Node& n) { return n.shape.size() == 2 ? n.shape[0] : 1; }
std::size_t cols_of(const Node& n) {
  if (n.shape.empty()) return 1;
  return n.shape.size() == 2 ? n.shape[1] : n.shape[0];
}

void require_matrix(const Node& n, const char* op) {
  if (n.shape.size() != 1 && n.shape.size() != 2) {
    throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(n.shape));
  }
}

void require_same_shape(const Node& a, const Node& b, const char* op) {
  if (a.shape != b.shape) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->data.assign(shape_numel(shape), 0.0f);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, float stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<float> dist(0.0f, stddev);
  Tensor t(std::move(shape), requires_grad);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, float bound, std::mt19937_64& rng, bool requires_grad) {
  std::uniform_real_distribution<float> dist(-bound, bound);
  Tensor t(std::move(shape), requires_grad);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

const Shape& Tensor::shape() const { return node_of(*this, "shape")->shape; }
std::size_t Tensor::numel() const { return node_of(*this, "numel")->data.size(); }
std::size_t Tensor::rows() const { return rows_of(*node_of(*this, "rows")); }
std::size_t Tensor::cols() const { return cols_of(*node_of(*this, "cols")); }

std::span<float> Tensor::data() { return node_of(*this, "data")->data; }
std::span<const float> Tensor::data() const { return node_of(*this, "data")->data; }
std::vector<float> Tensor::to_vector() const { return node_of(*this, "to_vector")->data; }

float Tensor::item() const {
  const auto& n = node_of(*this, "item");
  if (n->data.size() != 1) {
    throw ContractError("item: tensor has " + std::to_string(n->data.size()) + " elements");
  }
  return n->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_of(*this, "set_requires_grad")->requires_grad = flag; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const float> Tensor::grad() const { return node_of(*this, "grad")->grad; }
std::span<float> Tensor::mutable_grad() { return ensure_grad(*node_of(*this, "grad")); }
void Tensor::zero_grad() {
  auto& g = node_of(*this, "zero_grad")->grad;
  std::fill(g.begin(), g.end(), 0.0f);
}
const std::string& Tensor::op() const { return node_of(*this, "op")->op; }

Tensor Tensor::detach() const {
  const auto& n = node_of(*this, "detach");
  return Tensor(n->shape, n->data, false);
}

void Tensor::backward() const {
  const auto& root = node_of(*this, "backward");
  if (root->data.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(root->shape));
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  ensure_grad(*root)[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& ta, const Tensor& tb) {
  const auto& a = node_of(ta, "matmul");
  const auto& b = node_of(tb, "matmul");
  require_matrix(*a, "matmul");
  require_matrix(*b, "matmul");
  const std::size_t m = rows_of(*a), k = cols_of(*a), n = cols_of(*b);
  if (rows_of(*b) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a->shape) + " x " +
                         shape_str(b->shape));
  }
  std::vector<float> out(m * n);
  kernels::gemm_nn(a->data, b->data, out, m, k, n, false);
  auto r = make_node("matmul", {m, n}, std::move(out), {a, b});
  if (r->requires_grad) {
    r->backward = [m, k, n](Node& self) {
      Node& a = *self.parents[0];
      Node& b = *self.parents[1];
      if (needs_grad(a)) kernels::gemm_nt(self.grad, b.data, ensure_grad(a), m, n, k, true);
      if (needs_grad(b)) kernels::gemm_tn(a.data, self.grad, ensure_grad(b), k, m, n, true);
    };
  }
  return TensorAccess::wrap(r);
}

Tensor matmul_nt(const Tensor& ta, const Tensor& tb) {
  const auto& a = node_of(ta, "matmul_nt");
  const auto& b = node_of(tb, "matmul_nt");
  require_matrix(*a, "matmul_nt");
  require_matrix(*b, "matmul_nt");
  const std::size_t m = rows_of(*a), k = cols_of(*a), n = rows_of(*b);
  if (cols_of(*b) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a->shape) + " x " +
                         shape_str(b->shape) + "^T");
  }
  std::vector<float> out(m * n);
  kernels::gemm_nt(a->data, b->data, out, m, k, n, false);
  auto r = make_node("matmul_nt", {m, n}, std::move(out), {a, b});
  if (r->requires_grad) {
    r->backward = [m, k, n](Node& self) {
      Node& a = *self.parents[0];
      Node& b = *self.parents[1];
      if (needs_grad(a)) kernels::gemm_nn(self.grad, b.data, ensure_grad(a), m, n, k, true);
      if (needs_grad(b)) kernels::gemm_tn(self.grad, a.data, ensure_grad(b), n, m, k, true);
    };
  }
  return TensorAccess::wrap(r);
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const Tensor& ta, const Tensor& tb, const char* op, Fwd fwd, Bwd bwd) {
  const auto& a = node_of(ta, op);
  const auto& b = node_of(tb, op);
  require_same_shape(*a, *b, op);
  std::vector<float> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a->data[i], b->data[i]);
  auto r = make_node(op, a->shape, std::move(out), {a, b});
  if (r->requires_grad) {
    r->backward = [bwd](Node& self) {
      Node& a = *self.parents[0];
      Node& b = *self.parents[1];
      float* ga = needs_grad(a) ? ensure_grad(a).data() : nullptr;
      float* gb = needs_grad(b) ? ensure_grad(b).data() : nullptr;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        bwd(self.grad[i], a.data[i], b.data[i], ga ? &ga[i] : nullptr, gb ? &gb[i] : nullptr);
      }
    };
  }
  return TensorAccess::wrap(r);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](float x, float y) { return x + y; },
      [](float g, float, float, float* ga, float* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](float x, float y) { return x - y; },
      [](float g, float, float, float* ga, float* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](float g, float x, float y, float* ga, float* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor scale(const Tensor& ta, float factor) {
  const auto& a = node_of(ta, "scale");
  std::vector<float> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * factor;
  auto r = make_node("scale", a->shape, std::move(out), {a});
  if (r->requires_grad) {
    r->backward = [factor](Node& self) {
      auto& g = ensure_grad(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    };
  }
  return TensorAccess::wrap(r);
}

Tensor sum(const Tensor& ta) {
  const auto& a = node_of(ta, "sum");
  double s = 0.0;
  for (float v : a->data) s += v;
  auto r = make_node("sum", {}, {static_cast<float>(s)}, {a});
  if (r->requires_grad) {
    r->backward = [](Node& self) {
      auto& g = ensure_grad(*self.parents[0]);
      for (float& v : g) v += self.grad[0];
    };
  }
  return TensorAccess::wrap(r);
}

Tensor silu(const Tensor& ta) {
  const auto& a = node_of(ta, "silu");
  std::vector<float> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float x = a->data[i];
    out[i] = x / (1.0f + std::exp(-x));
  }
  auto r = make_node("silu", a->shape, std::move(out), {a});
  if (r->requires_grad) {
    r->backward = [](Node& self) {
      Node& a = *self.parents[0];
      auto& g = ensure_grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float x = a.data[i];
        const float s = 1.0f / (1.0f + std::exp(-x));
        g[i] += self.grad[i] * s * (1.0f + x * (1.0f - s));
      }
    };
  }
  return TensorAccess::wrap(r);
}

Tensor rms_norm(const Tensor& tx, const Tensor& tgain, float eps) {
  const auto& x = node_of(tx, "rms_norm");
  const auto& gain = node_of(tgain, "rms_norm");
  require_matrix(*x, "rms_norm");
  const std::size_t n = rows_of(*x), d = cols_of(*x);
  if (gain->data.size() != d) {
    throw DimensionError("rms_norm: gain width " + std::to_string(gain->data.size()) +
                         " does not match input width " + std::to_string(d));
  }
  std::vector<float> out(n * d);
  std::vector<float> inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = x->data.data() + i * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += double(row[j]) * row[j];
    inv[i] = static_cast<float>(1.0 / std::sqrt(ms / double(d) + eps));
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = row[j] * inv[i] * gain->data[j];
  }
  auto r = make_node("rms_norm", x->shape, std::move(out), {x, gain});
  if (r->requires_grad) {
    r->backward = [n, d, inv = std::move(inv)](Node& self) {
      Node& x = *self.parents[0];
      Node& gain = *self.parents[1];
      float* gg = needs_grad(gain) ? ensure_grad(gain).data() : nullptr;
      float* gx = needs_grad(x) ? ensure_grad(x).data() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const float* row = x.data.data() + i * d;
        const float* dy = self.grad.data() + i * d;
        double proj = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const float xhat = row[j] * inv[i];
          if (gg) gg[j] += dy[j] * xhat;
          proj += double(dy[j]) * gain.data[j] * xhat;
        }
        if (!gx) continue;
        const float mean_proj = static_cast<float>(proj / double(d));
        for (std::size_t j = 0; j < d; ++j) {
          const float xhat = row[j] * inv[i];
          gx[i * d + j] += inv[i] * (dy[j] * gain.data[j] - xhat * mean_proj);
        }
      }
    };
  }
  return TensorAccess::wrap(r);
}

Tensor embedding(std::span<const int> ids, const Tensor& ttable) {
  const auto& table = node_of(ttable, "embedding");
  if (table->shape.size() != 2) throw DimensionError("embedding: table must be rank 2");
  const std::size_t vocab = table->shape[0], d = table->shape[1];
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<float> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(idx[i]) + " outside table of " +
                           std::to_string(vocab) + " rows");
    }
    std::copy_n(table->data.begin() + idx[i] * d, d, out.begin() + i * d);
  }
  auto r = make_node("embedding", {idx.size(), d}, std::move(out), {table});
  if (r->requires_grad) {
    r->backward = [d, idx = std::move(idx)](Node& self) {
      auto& g = ensure_grad(*self.parents[0]);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
      }
    };
  }
  return TensorAccess::wrap(r);
}

Tensor softmax_rows(const Tensor& tx) {
  const auto& x = node_of(tx, "softmax_rows");
  require_matrix(*x, "softmax_rows");
  const std::size_t n = rows_of(*x), d = cols_of(*x);
  std::vector<float> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = x->data.data() + i * d;
    float* o = out.data() + i * d;
    const float mx = *std::max_element(row, row + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(row[j] - mx);
      z += o[j];
    }
    const float invz = static_cast<float>(1.0 / z);
    for (std::size_t j = 0; j < d; ++j) o[j] *= invz;
  }
  auto r = make_node("softmax_rows", x->shape, std::move(out), {x});
  if (r->requires_grad) {
    r->backward = [n, d](Node& self) {
      auto& g = ensure_grad(*self.parents[0]);
      for (std::size_t i = 0; i < n; ++i) {
        const float* y = self.data.data() + i * d;
        const float* dy = self.grad.data() + i * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += double(dy[j]) * y[j];
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += y[j] * (dy[j] - float(dot));
      }
    };
  }
  return TensorAccess::wrap(r);
}

Tensor causal_mask(const Tensor& tscores, std::size_t seq_len) {
  const auto& s = node_of(tscores, "causal_mask");
  require_matrix(*s, "causal_mask");
  const std::size_t n = rows_of(*s), d = cols_of(*s);
  if (d != seq_len || seq_len == 0 || n % seq_len != 0) {
    throw DimensionError("causal_mask: scores " + shape_str(s->shape) +
                         " are not blocks of seq_len " + std::to_string(seq_len));
  }
  std::vector<float> out = s->data;
  const float neg_inf = -std::numeric_limits<float>::infinity();
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = r % seq_len;
    for (std::size_t j = i + 1; j < d; ++j) out[r * d + j] = neg_inf;
  }
  auto r = make_node("causal_mask", s->shape, std::move(out), {s});
  if (r->requires_grad) {
    r->backward = [n, d, seq_len](Node& self) {
      auto& g = ensure_grad(*self.parents[0]);
      for (std::size_t row = 0; row < n; ++row) {
        const std::size_t i = row % seq_len;
        for (std::size_t j = 0; j <= i; ++j) g[row * d + j] += self.grad[row * d + j];
      }
    };
  }
  return TensorAccess::wrap(r);
}

Tensor cross_entropy(const Tensor& tlogits, std::span<const int> targets) {
  const auto& logits = node_of(tlogits, "cross_entropy");
  require_matrix(*logits, "cross_entropy");
  const std::size_t n = rows_of(*logits), v = cols_of(*logits);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<float> probs(n * v, 0.0f);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tgt[i] < 0) continue;
    if (static_cast<std::size_t>(tgt[i]) >= v) {
      throw DimensionError("cross_entropy: target " + std::to_string(tgt[i]) + " >= vocab " +
                           std::to_string(v));
    }
    const float* row = logits->data.data() + i * v;
    const float mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(double(row[j]) - mx);
    total += std::log(z) + mx - row[tgt[i]];
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = static_cast<float>(std::exp(double(row[j]) - mx) / z);
    }
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: no rows with a target");
  auto r = make_node("cross_entropy", {}, {static_cast<float>(total / double(count))}, {logits});
  if (r->requires_grad) {
    r->backward = [n, v, count, tgt = std::move(tgt), probs = std::move(probs)](Node& self) {
      auto& g = ensure_grad(*self.parents[0]);
      const float w = self.grad[0] / static_cast<float>(count);
      for (std::size_t i = 0; i < n; ++i) {
        if (tgt[i] < 0) continue;
        for (std::size_t j = 0; j < v; ++j) g[i * v + j] += w * probs[i * v + j];
        g[i * v + tgt[i]] -= w;
      }
    };
  }
  return TensorAccess::wrap(r);
}

Tensor dropout(const Tensor& tx, float p, bool train, std::mt19937_64& rng) {
  if (p < 0.0f || p >= 1.0f) throw ContractError("dropout: p must be in [0, 1)");
  if (!train || p == 0.0f) return tx;
  const auto& x = node_of(tx, "dropout");
  std::bernoulli_distribution keep(1.0 - p);
  const float inv_keep = 1.0f / (1.0f - p);
  std::vector<float> mask(x->data.size());
  for (float& m : mask) m = keep(rng) ? inv_keep : 0.0f;
  std::vector<float> out(x->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->data[i] * mask[i];
  auto r = make_node("dropout", x->shape, std::move(out), {x});
  if (r->requires_grad) {
    r->backward = [mask = std::move(mask)](Node& self) {
      auto& g = ensure_grad(*self.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
    };
  }
  return TensorAccess::wrap(r);
}

Tensor add_rowvec_masked(const Tensor& tx, const Tensor& tv, std::span<const std::uint8_t> mask) {
  const auto& x = node_of(tx, "add_rowvec_masked");
  const auto& v = node_of(tv, "add_rowvec_masked");
  require_matrix(*x, "add_rowvec_masked");
  const std::size_t n = rows_of(*x), d = cols_of(*x);
  if (v->data.size() != d) {
    throw DimensionError("add_rowvec_masked: vector width " + std::to_string(v->data.size()) +
                         " does not match activation width " + std::to_string(d));
  }
  if (mask.size() != n) {
    throw DimensionError("add_rowvec_masked: mask length " + std::to_string(mask.size()) +
                         " does not match " + std::to_string(n) + " rows");
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  std::vector<float> out = x->data;
  for (std::size_t i = 0; i < n; ++i) {
    if (!m[i]) continue;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += v->data[j];
  }
  auto r = make_node("add_rowvec_masked", x->shape, std::move(out), {x, v});
  if (r->requires_grad) {
    r->backward = [n, d, m = std::move(m)](Node& self) {
      Node& x = *self.parents[0];
      Node& v = *self.parents[1];
      if (needs_grad(x)) {
        auto& g = ensure_grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (needs_grad(v)) {
        auto& g = ensure_grad(v);
        for (std::size_t i = 0; i < n; ++i) {
          if (!m[i]) continue;
          for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
        }
      }
    };
  }
  return TensorAccess::wrap(r);
}

Tensor select_rows(const Tensor& tx, std::span<const std::size_t> rows) {
  const auto& x = node_of(tx, "select_rows");
  require_matrix(*x, "select_rows");
  const std::size_t n = rows_of(*x), d = cols_of(*x);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<float> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) {
      throw DimensionError("select_rows: row " + std::to_string(idx[i]) + " out of " +
                           std::to_string(n));
    }
    std::copy_n(x->data.begin() + idx[i] * d, d, out.begin() + i * d);
  }
  auto r = make_node("select_rows", {idx.size(), d}, std::move(out), {x});
  if (r->requires_grad) {
    r->backward = [d, idx = std::move(idx)](Node& self) {
      auto& g = ensure_grad(*self.parents[0]);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
      }
    };
  }
  return TensorAccess::wrap(r);
}

Tensor replace_rows(const Tensor& tx, std::span<const std::size_t> rows, const Tensor& tvalues) {
  const auto& x = node_of(tx, "replace_rows");
  const auto& values = node_of(tvalues, "replace_rows");
  require_matrix(*x, "replace_rows");
  const std::size_t n = rows_of(*x), d = cols_of(*x);
  if (values->data.size() != rows.size() * d) {
    throw DimensionError("replace_rows: values " + shape_str(values->shape) + " do not cover " +
                         std::to_string(rows.size()) + " rows of width " + std::to_string(d));
  }
  std::vector<std::uint8_t> replaced(n, 0);
  std::vector<float> out = x->data;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw DimensionError("replace_rows: row " + std::to_string(rows[i]) + " out of " +
                           std::to_string(n));
    }
    replaced[rows[i]] = 1;
    std::copy_n(values->data.begin() + i * d, d, out.begin() + rows[i] * d);
  }
  auto r = make_node("replace_rows", x->shape, std::move(out), {x});
  if (r->requires_grad) {
    r->backward = [d, replaced = std::move(replaced)](Node& self) {
      auto& g = ensure_grad(*self.parents[0]);
      for (std::size_t i = 0; i < replaced.size(); ++i) {
        if (replaced[i]) continue;
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i * d + j];
      }
    };
  }
  return TensorAccess::wrap(r);
}

namespace {

kernels::AttentionDims attention_dims(const Node& packed, std::size_t heads, std::size_t seq_len,
                                      const char* op) {
  require_matrix(packed, op);
  const std::size_t n = rows_of(packed), w = cols_of(packed);
  if (heads == 0 || seq_len == 0 || w % heads != 0 || n % seq_len != 0) {
    throw DimensionError(std::string(op) + ": cannot split " + shape_str(packed.shape) + " into " +
                         std::to_string(heads) + " heads over sequences of " +
                         std::to_string(seq_len));
  }
  return {n / seq_len, seq_len, heads, w / heads};
}

}  // namespace

Tensor head_scores(const Tensor& tq, const Tensor& tk, std::size_t heads, std::size_t seq_len,
                   float scale_factor) {
  const auto& q = node_of(tq, "head_scores");
  const auto& k = node_of(tk, "head_scores");
  require_same_shape(*q, *k, "head_scores");
  const auto dims = attention_dims(*q, heads, seq_len, "head_scores");
  std::vector<float> out(dims.batch * heads * seq_len * seq_len);
  kernels::attention_scores(q->data, k->data, out, dims, scale_factor);
  auto r = make_node("head_scores", {dims.batch * heads * seq_len, seq_len}, std::move(out), {q, k});
  if (r->requires_grad) {
    r->backward = [dims, scale_factor](Node& self) {
      Node& q = *self.parents[0];
      Node& k = *self.parents[1];
      std::span<float> dq = needs_grad(q) ? std::span<float>(ensure_grad(q)) : std::span<float>();
      std::span<float> dk = needs_grad(k) ? std::span<float>(ensure_grad(k)) : std::span<float>();
      kernels::attention_scores_backward(self.grad, q.data, k.data, dq, dk, dims, scale_factor);
    };
  }
  return TensorAccess::wrap(r);
}

Tensor head_mix(const Tensor& tpattern, const Tensor& tv, std::size_t heads, std::size_t seq_len) {
  const auto& p = node_of(tpattern, "head_mix");
  const auto& v = node_of(tv, "head_mix");
  const auto dims = attention_dims(*v, heads, seq_len, "head_mix");
  if (p->shape != Shape{dims.batch * heads * seq_len, seq_len}) {
    throw DimensionError("head_mix: pattern " + shape_str(p->shape) + " does not match values " +
                         shape_str(v->shape));
  }
  std::vector<float> out(v->data.size());
  kernels::attention_mix(p->data, v->data, out, dims);
  auto r = make_node("head_mix", v->shape, std::move(out), {p, v});
  if (r->requires_grad) {
    r->backward = [dims](Node& self) {
      Node& p = *self.parents[0];
      Node& v = *self.parents[1];
      std::span<float> dp = needs_grad(p) ? std::span<float>(ensure_grad(p)) : std::span<float>();
      std::span<float> dv = needs_grad(v) ? std::span<float>(ensure_grad(v)) : std::span<float>();
      kernels::attention_mix_backward(self.grad, p.data, v.data, dp, dv, dims);
    };
  }
  return TensorAccess::wrap(r);
}

}  // namespace oocr
