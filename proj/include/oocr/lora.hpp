#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "oocr/transformer.hpp"

namespace oocr {

enum class LoraTarget {
  all_layers_mlp,     // gate, up and down on every layer
  single_layer_down,  // down projection of one layer
};
const char* to_string(LoraTarget t);
LoraTarget parse_lora_target(const std::string& text);

struct LoraConfig {
  LoraTarget target = LoraTarget::single_layer_down;
  int layer = 0;  // single_layer_down only
  int rank = 8;
  float alpha = 4.0f;
  float dropout = 0.05f;

  void validate() const;
  float scaling() const { return alpha / static_cast<float>(rank); }
  bool operator==(const LoraConfig&) const = default;
};

struct LoraFactors {
  Tensor a;  // [rank x d_in]
  Tensor b;  // [d_out x rank]
};

/// Adds s * B A dropout(x) to selected MLP projections, s = alpha / rank.
class LoraAdapter final : public MlpAdapter {
 public:
  LoraAdapter() = default;

  bool adapts(int layer, MlpMatrix matrix) const override;
  Tensor branch(int layer, MlpMatrix matrix, const Tensor& input, bool train,
                std::mt19937_64* rng) const override;

  const LoraConfig& config() const { return config_; }
  float scaling() const { return config_.scaling(); }
  std::size_t num_pairs() const { return factors_.size(); }
  const LoraFactors& factors(int layer, MlpMatrix matrix) const;
  std::vector<std::pair<int, MlpMatrix>> targets() const;

  /// "lora.{layer}.{gate|up|down}.{A|B}", sharing storage with the adapter.
  std::vector<NamedTensor> named_parameters() const;
  LoraAdapter clone() const;

  static LoraAdapter from_named(const ModelConfig& model, const LoraConfig& config,
                                const std::vector<NamedTensor>& named);

 private:
  friend LoraAdapter attach_lora(TransformerModel& model, const LoraConfig& config,
                                 std::uint64_t seed);
  LoraConfig config_;
  std::map<std::pair<int, MlpMatrix>, LoraFactors> factors_;
};

/// Freezes the base model and creates trainable factors: A ~ U(-1/sqrt(d_in),
/// 1/sqrt(d_in)), B = 0, so the adapted model starts identical to the base.
/// Throws ContractError for an invalid layer or a rank larger than the matrix.
LoraAdapter attach_lora(TransformerModel& model, const LoraConfig& config, std::uint64_t seed);

enum class PromptSource { in_distribution, out_of_distribution };
const char* to_string(PromptSource s);

/// Per-token vectors that the adapter adds at one layer's down projection.
struct DiffVectorSet {
  PromptSource source = PromptSource::in_distribution;
  int layer = 0;
  std::vector<std::size_t> positions;
  Tensor vectors;  // [n x d_model]

  std::size_t size() const { return positions.size(); }
  std::vector<float> row(std::size_t i) const;
};

/// Eval-mode LoRA branch output s * B A x at the last k positions of
/// `prompt`, where x is the down projection's input in the adapted model.
/// Throws ContractError when the layer's down projection is not adapted or
/// the prompt is shorter than k.
DiffVectorSet lora_delta_vectors(const TransformerModel& model, const LoraAdapter& adapter,
                                 std::span<const int> prompt, int layer, std::size_t k = 20,
                                 PromptSource source = PromptSource::in_distribution);

}  // namespace oocr
