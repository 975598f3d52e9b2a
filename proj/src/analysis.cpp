#include "oocr/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace oocr {

VectorList rows_of(const Tensor& t) {
  VectorList out;
  const std::size_t n = t.rows(), d = t.cols();
  auto data = t.data();
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(data.begin() + i * d, data.begin() + (i + 1) * d);
  return out;
}

namespace {

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

void require_width(const VectorList& v, const char* op) {
  for (const auto& row : v) {
    if (row.size() != v.front().size()) throw ContractError(std::string(op) + ": vectors differ in width");
  }
}

// Dominant eigenpair of a symmetric PSD matrix by power iteration from a
// fixed seeded start.
std::pair<double, std::vector<double>> power_iteration(const std::vector<std::vector<double>>& m) {
  const std::size_t n = m.size();
  std::mt19937_64 rng(0x9ca);
  std::normal_distribution<double> normal;
  std::vector<double> u(n), next(n);
  for (double& x : u) x = normal(rng);
  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    s = std::sqrt(s);
    if (s > 0) {
      for (double& v : x) v /= s;
    }
    return s;
  };
  normalize(u);
  double lambda = 0.0;
  for (int it = 0; it < 100000; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      next[i] = std::inner_product(m[i].begin(), m[i].end(), u.begin(), 0.0);
    }
    lambda = normalize(next);
    if (lambda == 0.0) return {0.0, u};
    double delta = 0.0;
    for (std::size_t i = 0; i < n; ++i) delta = std::max(delta, std::abs(next[i] - u[i]));
    u.swap(next);
    if (delta < 1e-13) break;
  }
  return {lambda, u};
}

}  // namespace

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: width mismatch");
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine: zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// Below this sigma_1 / sigma_2 the iteration cap cannot separate the top two
// components ((1 + 2e-4)^-100000 ~ 2e-9), so the result would be an arbitrary
// mix. Anything above it converges to the dominant direction.
constexpr double kTieRatio = 1.0 + 1e-4;

PcaResult pca_first_component(const VectorList& vectors) {
  if (vectors.size() < 2) throw ContractError("pca_first_component: needs at least 2 vectors");
  require_width(vectors, "pca_first_component");
  const std::size_t n = vectors.size(), d = vectors.front().size();

  // Gram matrix X X^T: n is small (20), d may be larger.
  std::vector<std::vector<double>> gram(n, std::vector<double>(n));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) gram[i][j] = gram[j][i] = dot(vectors[i], vectors[j]);
    total += gram[i][i];
  }
  if (total == 0.0) throw DegenerateInputError("pca_first_component: all vectors are zero");

  auto [l1, u1] = power_iteration(gram);
  auto deflated = gram;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) deflated[i][j] -= l1 * u1[i] * u1[j];
  }
  const double l2 = std::max(0.0, power_iteration(deflated).first);

  PcaResult out;
  out.explained_ratio = l1 / total;
  std::vector<double> dir(d, 0.0);
  if (l2 > 0.0 && std::sqrt(l1 / l2) <= kTieRatio) {
    // Tied spectrum: the power-iteration direction is arbitrary, so pick the
    // normalized input row capturing the most energy, lowest index first.
    out.degenerate = true;
    double best = -1.0;
    std::size_t best_row = 0;
    for (std::size_t r = 0; r < n; ++r) {
      const double nr = norm(vectors[r]);
      if (nr == 0.0) continue;
      double energy = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double p = dot(vectors[i], vectors[r]) / nr;
        energy += p * p;
      }
      if (energy > best * (1.0 + 1e-12)) {
        best = energy;
        best_row = r;
      }
    }
    const double nr = norm(vectors[best_row]);
    for (std::size_t j = 0; j < d; ++j) dir[j] = vectors[best_row][j] / nr;
    out.explained_ratio = best / total;
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) dir[j] += u1[i] * vectors[i][j];
    }
  }

  double nd = 0.0;
  for (double v : dir) nd += v * v;
  nd = std::sqrt(nd);
  std::vector<double> mean(d, 0.0);
  for (const auto& row : vectors) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  double align = 0.0;
  for (std::size_t j = 0; j < d; ++j) align += dir[j] * mean[j];
  if (std::abs(align) <= 1e-12 * nd) {
    // Mean orthogonal to the component: make the first nonzero entry positive.
    for (double v : dir) {
      if (std::abs(v) > 1e-12 * nd) {
        align = v;
        break;
      }
    }
  }
  const double sign = align < 0 ? -1.0 : 1.0;
  out.direction.resize(d);
  for (std::size_t j = 0; j < d; ++j) out.direction[j] = static_cast<float>(sign * dir[j] / nd);
  return out;
}

CosineHistogram pairwise_abs_cosine(const VectorList& vectors, std::size_t bins) {
  if (bins == 0) throw ContractError("pairwise_abs_cosine: bins must be positive");
  if (!vectors.empty()) require_width(vectors, "pairwise_abs_cosine");
  CosineHistogram h;
  VectorList kept;
  for (const auto& v : vectors) {
    if (norm(v) == 0.0) {
      ++h.zero_vectors_excluded;
    } else {
      kept.push_back(v);
    }
  }
  if (kept.size() < 2) {
    throw DegenerateInputError("pairwise_abs_cosine: fewer than 2 nonzero vectors (" +
                               std::to_string(h.zero_vectors_excluded) + " zero vectors excluded)");
  }
  std::vector<double> values;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    for (std::size_t j = i + 1; j < kept.size(); ++j) values.push_back(std::abs(cosine(kept[i], kept[j])));
  }
  h.pair_count = values.size();
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(static_cast<double>(b) / bins);
  h.counts.assign(bins, 0);
  for (double v : values) {
    const auto b = std::min(bins - 1, static_cast<std::size_t>(v * bins));
    ++h.counts[b];
  }
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size();
  h.median = m % 2 ? values[m / 2] : 0.5 * (values[m / 2 - 1] + values[m / 2]);
  h.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(m);
  h.min = values.front();
  return h;
}

CosineHistogram pairwise_abs_cosine(const std::vector<DiffVectorSet>& sets, std::size_t bins) {
  VectorList pooled;
  for (const auto& s : sets) {
    for (auto& row : rows_of(s.vectors)) pooled.push_back(std::move(row));
  }
  return pairwise_abs_cosine(pooled, bins);
}

LogitLensResult logit_lens_topk(std::span<const float> vector, const Tensor& unembedding,
                                std::size_t k, LensMetric metric) {
  const std::size_t vocab = unembedding.rows(), d = unembedding.cols();
  if (vector.size() != d) {
    throw DimensionError("logit_lens_topk: vector width " + std::to_string(vector.size()) +
                         " != unembedding width " + std::to_string(d));
  }
  if (k == 0 || k > vocab) {
    throw ContractError("logit_lens_topk: k=" + std::to_string(k) + " outside 1.." + std::to_string(vocab));
  }
  const double nv = norm(vector);
  if (nv == 0.0) throw DegenerateInputError("logit_lens_topk: zero vector");
  auto table = unembedding.data();
  std::vector<std::pair<int, double>> scores;
  for (std::size_t t = 0; t < vocab; ++t) {
    std::span<const float> row(table.data() + t * d, d);
    double s = dot(vector, row);
    if (metric == LensMetric::cosine) {
      const double nr = norm(row);
      s = nr == 0.0 ? 0.0 : s / (nv * nr);
    }
    scores.emplace_back(static_cast<int>(t), s);
  }
  std::stable_sort(scores.begin(), scores.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  LogitLensResult out;
  out.k = k;
  out.metric = metric;
  out.top.assign(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k));
  return out;
}

double concept_overlap(const LogitLensResult& result, const std::set<int>& concepts) {
  if (concepts.empty()) throw ContractError("concept_overlap: empty concept set");
  if (result.k == 0) return 0.0;
  std::size_t hits = 0;
  for (const auto& [id, score] : result.top) hits += concepts.contains(id);
  return static_cast<double>(hits) / static_cast<double>(result.k);
}

SteeringVector naive_steering_vector(const TransformerModel& model,
                                     const std::vector<std::vector<int>>& concept_prompts,
                                     const std::vector<std::vector<int>>& codename_prompts,
                                     int layer) {
  if (concept_prompts.empty() || codename_prompts.empty()) {
    throw DegenerateInputError("naive_steering_vector: empty prompt set");
  }
  const HookPoint hook{HookKind::mlp_out, layer, -1};
  const auto d = static_cast<std::size_t>(model.config.d_model);
  auto mean_last = [&](const std::vector<std::vector<int>>& prompts) {
    std::vector<double> mean(d, 0.0);
    for (const auto& p : prompts) {
      const Tensor v = capture_last_k_vectors(model, p, hook, 1);
      auto data = v.data();
      for (std::size_t j = 0; j < d; ++j) mean[j] += data[j];
    }
    for (double& x : mean) x /= static_cast<double>(prompts.size());
    return mean;
  };
  const auto a = mean_last(concept_prompts);
  const auto b = mean_last(codename_prompts);
  std::vector<float> diff(d);
  for (std::size_t j = 0; j < d; ++j) diff[j] = static_cast<float>(a[j] - b[j]);
  return SteeringVector::from_raw(layer, diff, PositionPolicy::token_mask, SteeringProvenance::naive);
}

CosineMatrix cosine_matrix(const std::vector<std::pair<std::string, std::vector<float>>>& vectors) {
  if (vectors.size() < 2) throw ContractError("cosine_matrix: needs at least 2 vectors");
  CosineMatrix out;
  const std::size_t n = vectors.size();
  for (const auto& [label, v] : vectors) {
    if (v.size() != vectors.front().second.size()) throw ContractError("cosine_matrix: vectors differ in width");
    if (norm(v) == 0.0) throw DegenerateInputError("cosine_matrix: zero vector '" + label + "'");
    out.labels.push_back(label);
  }
  out.values.assign(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      out.values[i][j] = out.values[j][i] = cosine(vectors[i].second, vectors[j].second);
    }
  }
  return out;
}

PatchingSweepResult query_patching_sweep(const TransformerModel& model, const SteeringVector& sv,
                                         const std::vector<Example>& prompts) {
  if (prompts.empty()) throw ContractError("query_patching_sweep: empty prompt set");
  const int n_layers = model.config.n_layers;
  PatchingSweepResult out;
  for (int i = 0; i <= n_layers; ++i) out.start_layers.push_back(i);
  out.logit_diff.assign(n_layers + 1, 0.0);

  NoGradGuard no_grad;
  const Intervention steer = apply_steering(model, sv).interventions.front();
  constexpr std::size_t kBatch = 64;
  double base_total = 0.0;
  for (std::size_t begin = 0; begin < prompts.size(); begin += kBatch) {
    const std::size_t end = std::min(prompts.size(), begin + kBatch);
    const TokenBatch batch = prompt_batch(prompts, begin, end);
    const auto rows = batch.last_rows();
    auto diffs = [&](const ForwardResult& res) {
      const std::size_t v = res.logits.cols();
      auto data = res.logits.data();
      double total = 0.0;
      for (std::size_t b = 0; b < end - begin; ++b) {
        const Example& e = prompts[begin + b];
        total += static_cast<double>(data[b * v + e.answer]) - data[b * v + e.incorrect];
      }
      return total;
    };

    ForwardOptions base_opts;
    for (int l = 0; l < n_layers; ++l) base_opts.capture.push_back(HookPoint{HookKind::query, l, -1});
    base_opts.logit_rows = rows;
    ForwardResult base = forward(model, batch, base_opts);
    base_total += diffs(base);
    auto source = std::make_shared<const ActivationTrace>(std::move(base.trace));

    for (int i = 0; i <= n_layers; ++i) {
      ForwardOptions opts;
      opts.interventions = {steer};
      std::vector<int> layers;
      for (int l = i; l < n_layers; ++l) layers.push_back(l);
      if (!layers.empty()) opts.interventions.push_back(Intervention::patch_queries(layers, source));
      opts.logit_rows = rows;
      out.logit_diff[i] += diffs(forward(model, batch, opts));
    }
  }
  const auto n = static_cast<double>(prompts.size());
  for (double& v : out.logit_diff) v /= n;
  out.base_logit_diff = base_total / n;
  out.steered_logit_diff = out.logit_diff.back();
  return out;
}

}  // namespace oocr
