#pragma once

// Toy decoder-only transformer.
//
// Per layer:
//   x += Wo * attn(rms(x) Wq, rms(x) Wk, rms(x) Wv)
//   m  = Wdown (silu(rms(x) Wgate) * rms(x) Wup)        <- "mlp_out" hook, add_vector site
//   x += rms_post(m)
// followed by a final RMS norm and a tied unembedding (logits = h E^T).
// Positions are learned absolute embeddings.
//
// Linear weights are stored [d_out x d_in] and applied as x W^T.

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "oocr/optim.hpp"
#include "oocr/tensor.hpp"

namespace oocr {

struct ModelConfig {
  int n_layers = 6;
  int d_model = 128;
  int n_heads = 4;
  int d_head = 32;
  int d_mlp = 512;
  int vocab_size = 2048;
  int max_seq_len = 48;
  std::uint64_t seed = 0;
  float norm_eps = 1e-6f;

  /// Throws ContractError when sizes are non-positive or heads do not tile d_model.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class MlpMatrix { gate, up, down };
const char* to_string(MlpMatrix m);

struct LayerWeights {
  Tensor attn_norm;  // [d_model]
  Tensor wq, wk, wv, wo;  // [d_model x d_model]
  Tensor mlp_norm;  // [d_model]
  Tensor w_gate, w_up;  // [d_mlp x d_model]
  Tensor w_down;  // [d_model x d_mlp]
  Tensor post_mlp_norm;  // [d_model]

  const Tensor& mlp(MlpMatrix m) const;
};

struct TransformerModel {
  ModelConfig config;
  Tensor token_embedding;     // [vocab x d_model], also the unembedding
  Tensor position_embedding;  // [max_seq_len x d_model]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d_model]

  /// Random initialization seeded by config.seed.
  static TransformerModel initialize(const ModelConfig& config);
  /// Rebuilds a model from named tensors (as produced by named_parameters).
  static TransformerModel from_named(const ModelConfig& config, const std::vector<NamedTensor>& named);

  /// Parameters in a fixed order; the tensors share storage with the model.
  std::vector<NamedTensor> named_parameters() const;
  void set_trainable(bool trainable);
  TransformerModel clone() const;
};

// ---- hooks -----------------------------------------------------------------

enum class HookKind { mlp_out, residual_post, query, key, attn_pattern, mlp_hidden };

struct HookPoint {
  HookKind kind = HookKind::mlp_out;
  int layer = 0;
  int head = -1;  // -1: all heads (query, key, attn_pattern only)

  auto operator<=>(const HookPoint&) const = default;
};

std::string to_string(const HookPoint& hook);
/// Parses "mlp_out.3", "query.2.h1", ... Throws ContractError on unknown names.
HookPoint parse_hook(const std::string& text);

/// Captured activations. Vector hooks are (batch*seq) x width; attention
/// patterns are (batch*heads*seq) x seq, or (batch*seq) x seq for one head.
struct ActivationTrace {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::map<HookPoint, Tensor> values;

  bool contains(const HookPoint& hook) const { return values.contains(hook); }
  /// Throws ContractError naming the hook when it was not captured.
  const Tensor& at(const HookPoint& hook) const;
};

// ---- interventions ---------------------------------------------------------

enum class PositionPolicy { last_token, token_mask, all_tokens, last_k };
const char* to_string(PositionPolicy p);
PositionPolicy parse_position_policy(const std::string& text);

struct Intervention {
  enum class Kind { add_vector, patch_queries };

  Kind kind = Kind::add_vector;
  std::vector<int> layers;
  PositionPolicy positions = PositionPolicy::last_token;
  std::size_t k = 0;  // for last_k
  Tensor vector;  // add_vector payload, width d_model; may require grad
  std::shared_ptr<const ActivationTrace> source;  // patch_queries payload

  /// Adds `vector` to the MLP output of `layer` before the post-MLP norm.
  static Intervention add_vector(int layer, Tensor vector, PositionPolicy positions,
                                 std::size_t k = 0);
  /// Overwrites last-token queries on `layers` with those captured in `source`
  /// (which must come from a forward over the same token batch).
  static Intervention patch_queries(std::vector<int> layers,
                                    std::shared_ptr<const ActivationTrace> source);
};

/// Low-rank (or other) additive branches on MLP projections. The forward adds
/// `branch(...)` to the base projection output when `adapts` is true.
class MlpAdapter {
 public:
  virtual ~MlpAdapter() = default;
  virtual bool adapts(int layer, MlpMatrix matrix) const = 0;
  virtual Tensor branch(int layer, MlpMatrix matrix, const Tensor& input, bool train,
                        std::mt19937_64* rng) const = 0;
};

// ---- forward ---------------------------------------------------------------

/// Right-padded batch. `masks`, when non-empty, has one entry per token of
/// each sequence and drives PositionPolicy::token_mask.
struct TokenBatch {
  std::vector<std::vector<int>> sequences;
  std::vector<std::vector<std::uint8_t>> masks;

  static TokenBatch single(std::span<const int> tokens);
  std::size_t max_len() const;
  /// Row index of each sequence's final token in the padded layout.
  std::vector<std::size_t> last_rows() const;
};

struct ForwardOptions {
  std::vector<Intervention> interventions;
  std::vector<HookPoint> capture;
  const MlpAdapter* adapter = nullptr;
  bool train = false;
  std::mt19937_64* rng = nullptr;  // required when train and the adapter uses dropout
  /// When set, only these padded rows are normed and unembedded.
  std::optional<std::vector<std::size_t>> logit_rows;
};

struct ForwardResult {
  Tensor logits;  // rows x vocab
  ActivationTrace trace;
  std::size_t seq_len = 0;
  std::vector<std::size_t> last_rows;
};

ForwardResult forward(const TransformerModel& model, const TokenBatch& batch,
                      const ForwardOptions& options = {});
ForwardResult forward(const TransformerModel& model, std::span<const int> tokens,
                      const ForwardOptions& options = {});

/// Argmax of the last-position logits; ties go to the lowest id.
int greedy_next_token(const TransformerModel& model, std::span<const int> tokens,
                      const std::vector<Intervention>& interventions = {},
                      const MlpAdapter* adapter = nullptr);
int argmax_lowest(std::span<const float> row);

/// Activations of `hook` at the final k positions, as a k x width tensor.
Tensor capture_last_k_vectors(const TransformerModel& model, std::span<const int> tokens,
                              const HookPoint& hook, std::size_t k,
                              const MlpAdapter* adapter = nullptr,
                              const std::vector<Intervention>& interventions = {});

}  // namespace oocr
