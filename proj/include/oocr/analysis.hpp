#pragma once

// Measurement toolbox: cosine diffing, PCA, logit lens, naive vectors,
// cosine matrices and the query-patching sweep.

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "oocr/steering.hpp"

namespace oocr {

using VectorList = std::vector<std::vector<float>>;

/// Rows of an n x d tensor.
VectorList rows_of(const Tensor& t);
double cosine(std::span<const float> a, std::span<const float> b);

struct PcaResult {
  std::vector<float> direction;  // unit norm, sign-aligned to the row mean
  double explained_ratio = 0.0;  // sigma_1^2 / sum sigma_i^2
  bool degenerate = false;       // sigma_1 / sigma_2 <= 1 + 1e-4; tie-break fallback used
};

/// Dominant right singular vector of the uncentered row stack by power
/// iteration. Throws ContractError for fewer than 2 rows or ragged widths,
/// DegenerateInputError for an all-zero input.
PcaResult pca_first_component(const VectorList& vectors);

struct CosineHistogram {
  std::size_t pair_count = 0;
  std::vector<double> edges;  // bins + 1 uniform edges over [0, 1]
  std::vector<std::size_t> counts;
  double median = 0.0;
  double mean = 0.0;
  double min = 0.0;
  std::size_t zero_vectors_excluded = 0;
};

/// |cos| over all unordered pairs of the pooled nonzero vectors. Throws
/// DegenerateInputError when fewer than 2 nonzero vectors remain.
CosineHistogram pairwise_abs_cosine(const VectorList& vectors, std::size_t bins = 50);
CosineHistogram pairwise_abs_cosine(const std::vector<DiffVectorSet>& sets, std::size_t bins = 50);

enum class LensMetric { cosine, dot };

struct LogitLensResult {
  std::size_t k = 0;
  LensMetric metric = LensMetric::cosine;
  std::vector<std::pair<int, double>> top;  // (token id, score), descending; ties by id
};

/// Ranks unembedding rows against `vector`. Throws DimensionError on a width
/// mismatch, ContractError for k > vocab, DegenerateInputError for a zero vector.
LogitLensResult logit_lens_topk(std::span<const float> vector, const Tensor& unembedding,
                                std::size_t k = 10, LensMetric metric = LensMetric::cosine);

/// |top-k ∩ concepts| / k. Throws ContractError for an empty concept set.
double concept_overlap(const LogitLensResult& result, const std::set<int>& concepts);

/// mean(mlp_out at the last token of concept prompts) - mean(... codename
/// prompts) at `layer`. The vector carries the token_mask policy (applied at
/// codename positions). Throws DegenerateInputError for empty prompt sets
/// or a zero difference.
SteeringVector naive_steering_vector(const TransformerModel& model,
                                     const std::vector<std::vector<int>>& concept_prompts,
                                     const std::vector<std::vector<int>>& codename_prompts,
                                     int layer);

struct CosineMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> values;
};

/// Signed pairwise cosines. Throws ContractError for fewer than 2 vectors or
/// unequal widths, DegenerateInputError for a zero vector.
CosineMatrix cosine_matrix(const std::vector<std::pair<std::string, std::vector<float>>>& vectors);

struct PatchingSweepResult {
  /// start_layers[j] = i patches last-token queries on layers i..L-1 with the
  /// base model's. i = 0 patches every layer, i = L patches nothing.
  std::vector<int> start_layers;
  std::vector<double> logit_diff;
  double base_logit_diff = 0.0;
  double steered_logit_diff = 0.0;
};

/// Mean logit difference (answer - incorrect) of the steered model per start
/// layer. Throws ContractError for an empty prompt set.
PatchingSweepResult query_patching_sweep(const TransformerModel& model, const SteeringVector& sv,
                                         const std::vector<Example>& prompts);

}  // namespace oocr
