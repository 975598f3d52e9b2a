#pragma once

// Experiment orchestration: config -> pretrain (cached) -> per-seed method
// training -> evaluation -> analyses -> report.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oocr/analysis.hpp"
#include "oocr/lora.hpp"
#include "oocr/steering.hpp"
#include "oocr/tasks.hpp"
#include "oocr/training.hpp"

namespace oocr {

enum class MethodKind {
  base,
  lora_all_layers,
  lora_single_layer,
  steer_trained,
  steer_pca,
  steer_unitize_avg,
  steer_naive,
};
const char* to_string(MethodKind m);
MethodKind parse_method_kind(const std::string& text);

struct MethodSpec {
  MethodKind kind = MethodKind::base;
  int layer = -1;  // -1 for base and lora_all_layers

  /// "lora_single_layer(2)", "base", ...
  std::string label() const;
  /// Parses the label form; "steer_pca(1)" or "steer_pca" with layer given separately.
  static MethodSpec parse(const std::string& text);
  bool needs_layer() const;
  auto operator<=>(const MethodSpec&) const = default;
};

struct TaskSpec {
  TaskKind kind = TaskKind::functions;
  std::string target = "fn_triple_plus_two";  // function or city; persona for choice
  TaskOptions options;
};

struct PretrainSpec {
  std::uint64_t corpus_seed = 1;
  std::size_t corpus_size = 200000;
  TrainConfig train{3e-3f, 3000, 32, 20, 3};
};

struct ExperimentConfig {
  std::string name = "experiment";
  TaskSpec task;
  ModelConfig model;
  PretrainSpec pretrain;
  std::vector<MethodSpec> methods;
  LoraConfig lora;           // target and layer are set per method
  TrainConfig lora_train{3e-3f, 600, 16, 20, 0};
  TrainConfig steer_train{1e-2f, 600, 16, 20, 0};
  /// Position policy of trained steering vectors; defaults per task kind
  /// (token_mask for codename tasks, last_token otherwise).
  std::optional<PositionPolicy> steer_policy;
  /// Policy used when applying natural (PCA / unitize-average) vectors.
  PositionPolicy natural_policy = PositionPolicy::all_tokens;
  PromptSource pca_source = PromptSource::in_distribution;
  std::size_t diff_tokens = 20;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  /// Subset of {"cossim", "logitlens", "naive", "matrix", "patch"}.
  std::vector<std::string> analyses;
  int analysis_layer = 0;
  std::filesystem::path output_dir;  // relative paths resolve against the output root

  PositionPolicy trained_policy() const;
  /// Throws ContractError on incompatible methods/layers, duplicate seeds or
  /// unknown analyses.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LoraConfig& c);
LoraConfig lora_config_from_json(const nlohmann::json& j);

struct GroupMetrics {
  double accuracy = 0.0;
  double logit_diff = 0.0;
  std::size_t n = 0;
};

struct RunRow {
  std::string method;  // MethodSpec label
  std::string method_kind;
  int layer = -1;
  std::uint64_t seed = 0;
  std::string status = "ok";  // "ok" or "diverged"
  std::string divergence;
  double val_accuracy = 0.0;
  double val_logit_diff = 0.0;
  double oocr_accuracy = 0.0;
  double oocr_logit_diff = 0.0;
  /// "validation/<group>" and "oocr_test/<group>".
  std::map<std::string, GroupMetrics> groups;
  std::string loss_curve;  // relative artifact path, empty for untrained methods
  std::vector<std::string> artifacts;
  std::map<std::string, double> extras;  // e.g. steering magnitude
};

struct Aggregate {
  std::string method;
  int layer = -1;
  std::size_t n = 0;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::pair<double, double>> metrics;  // name -> (mean, sample std)
};

struct ExperimentReport {
  std::string name;
  nlohmann::json config;
  nlohmann::json pretrain;
  std::map<std::string, double> chance;
  std::vector<RunRow> rows;
  std::vector<Aggregate> aggregates;
  nlohmann::json analyses = nlohmann::json::object();
  std::vector<std::string> artifacts;  // every file written, relative to the report directory
};

nlohmann::json to_json(const ExperimentReport& r);
ExperimentReport report_from_json(const nlohmann::json& j);
/// Mean and sample standard deviation of a metric over rows.
std::vector<Aggregate> aggregate_rows(const std::vector<RunRow>& rows);
double row_metric(const RunRow& row, const std::string& metric);

/// Where pretrained checkpoints and experiment outputs go. Defaults to
/// $OOCR_OUT, else "./oocr_out".
std::filesystem::path output_root();

struct PretrainedBase {
  std::shared_ptr<const Corpus> corpus;
  TransformerModel model;
  std::filesystem::path checkpoint;
  std::string key;  // cache key (hex)
  std::vector<float> losses;  // empty when loaded from cache
  bool from_cache = false;
};

/// Pretrains (or loads the cached checkpoint keyed by corpus hash, model
/// config and pretraining schedule) under `cache_dir`.
PretrainedBase pretrained_base(const ModelConfig& model, const PretrainSpec& spec,
                               const std::filesystem::path& cache_dir);

TaskBundle build_bundle(std::shared_ptr<const Corpus> corpus, const TaskSpec& task,
                        std::uint64_t seed);

/// Validation/OOCR metrics of a model view on a bundle, filling `row`.
void evaluate_into(const ModelView& view, const TaskBundle& bundle, RunRow& row);

/// Concept and codename usage prompts for the naive vector: the same
/// unrelated prefixes ending in the concept token or in the codename.
std::pair<std::vector<std::vector<int>>, std::vector<std::vector<int>>> naive_prompts(
    const TaskBundle& bundle, std::size_t count = 20);

struct RunOptions {
  std::filesystem::path cache_dir;  // default: <output root>/cache
  bool verbose = true;
};

/// Executes the experiment and persists artifacts plus report.json/.csv and
/// figures under the resolved output directory. Per-seed divergence is
/// recorded in the report and does not abort the run.
ExperimentReport run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Output directory of a config (relative dirs resolve against output_root()).
std::filesystem::path resolve_output_dir(const ExperimentConfig& config);

/// Preset lookup: "fig4" -> <preset dir>/fig4.json. The preset dir is
/// $OOCR_PRESETS or the source tree's presets/ directory. A preset file holds
/// one config object or an array of them.
std::vector<ExperimentConfig> load_preset(const std::string& name_or_path);
std::filesystem::path preset_dir();

}  // namespace oocr
