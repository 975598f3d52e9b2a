#pragma once

// Steering vectors: trained directly against a frozen model, or extracted
// from LoRA difference vectors ("natural" vectors).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oocr/lora.hpp"
#include "oocr/training.hpp"

namespace oocr {

enum class SteeringProvenance { trained, pca, unitize_avg, naive };
const char* to_string(SteeringProvenance p);
SteeringProvenance parse_provenance(const std::string& text);

struct SteeringVector {
  int layer = 0;
  std::vector<float> direction;  // unit norm
  float magnitude = 0.0f;        // signed
  PositionPolicy policy = PositionPolicy::last_token;
  std::size_t k = 0;  // last_k only
  SteeringProvenance provenance = SteeringProvenance::trained;

  /// magnitude * direction
  std::vector<float> applied() const;
  Intervention intervention() const;
  /// Builds a vector from a raw (unnormalized) vector. Throws
  /// DegenerateInputError when `raw` is zero.
  static SteeringVector from_raw(int layer, std::span<const float> raw, PositionPolicy policy,
                                 SteeringProvenance provenance);
};

struct SteeringTrainResult {
  SteeringVector vector;
  TrainResult training;
};

/// Trains a single d_model vector added at `layer` under `policy`, starting
/// from a random unit vector drawn from `config.seed`. Only the vector is
/// updated. token_mask requires every example to mark at least one position.
SteeringTrainResult train_steering_vector(const TransformerModel& model,
                                          const std::vector<Example>& data, int layer,
                                          PositionPolicy policy, const TrainConfig& config);

/// Mean over rows of <diff, direction>.
float steering_magnitude(const DiffVectorSet& diffs, std::span<const float> direction);

/// Direction: first principal component of the uncentered diffs, signed
/// toward their mean. Throws ContractError for fewer than 2 vectors and
/// DegenerateInputError when all are zero.
SteeringVector extract_pca_vector(const DiffVectorSet& diffs,
                                  PositionPolicy policy = PositionPolicy::all_tokens);

/// Direction: normalized mean of the per-row unit vectors; zero rows are
/// skipped (counted in `skipped` when given). Throws DegenerateInputError
/// when every row is zero.
SteeringVector extract_unitize_average_vector(const DiffVectorSet& diffs,
                                              PositionPolicy policy = PositionPolicy::all_tokens,
                                              std::size_t* skipped = nullptr);

/// Model view with the vector's add_vector intervention attached.
ModelView apply_steering(const TransformerModel& model, const SteeringVector& sv,
                         const MlpAdapter* adapter = nullptr);

/// Single-prompt steered forward. `mask` must be given iff the policy is token_mask.
ForwardResult steer_forward(const TransformerModel& model, const SteeringVector& sv,
                            std::span<const int> prompt,
                            std::optional<std::span<const std::uint8_t>> mask = std::nullopt);

/// Persists "steer.{layer}.direction" in the checkpoint format plus a JSON
/// sidecar (`path` with extension .json) holding layer, magnitude, policy,
/// k and provenance.
void save_steering_vector(const SteeringVector& sv, const std::filesystem::path& path);
SteeringVector load_steering_vector(const std::filesystem::path& path);

}  // namespace oocr
