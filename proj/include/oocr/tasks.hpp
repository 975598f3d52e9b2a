#pragma once

// Synthetic token world.
//
// A pretraining corpus plants a family of concepts (named functions, cities on
// a grid, risky/safe personas) together with several letter-triple codenames
// per concept, so that every query template is seen applied to codenames. The
// task bundles then bind a *fresh* codename (or no marker at all, for the
// persona tasks) to one target concept using a single template, and test
// whether the binding carries over to templates never used in fine-tuning.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "oocr/errors.hpp"

namespace oocr {

class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const;
  /// Throws ContractError("unknown symbol ...").
  int id(std::string_view token) const;
  const std::string& token(int id) const;

  /// Whitespace-separated symbols to ids. Throws ContractError on unknown symbols.
  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const int> ids) const;

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct FunctionSpec {
  std::string name;
  int slope = 1;
  int offset = 0;
  int divisor = 0;  // nonzero: floor(x / divisor) instead of slope*x + offset

  int apply(int x) const;
};

struct City {
  std::string name;
  int x = 0;
  int y = 0;
};

/// Rounded Euclidean distance between two grid points.
int grid_distance(int ax, int ay, int bx, int by);
/// Direction of (bx, by) as seen from (ax, ay): the dominant axis, with
/// north/south winning ties. Points must differ.
std::string grid_direction(int ax, int ay, int bx, int by);

using Codename = std::vector<std::string>;  // letter tokens

inline constexpr int kMaxInput = 30;  // function inputs are 0..kMaxInput

struct World {
  std::uint64_t seed = 0;
  Vocab vocab;
  std::vector<FunctionSpec> functions;
  std::vector<City> cities;
  std::vector<std::string> letters;
  std::vector<std::string> risky_markers;  // persona_risky first
  std::vector<std::string> safe_markers;   // persona_safe first
  std::vector<std::string> risky_options;
  std::vector<std::string> safe_options;
  std::vector<std::string> scenarios;
  std::vector<std::vector<std::string>> self_report_templates;
  std::string trigger = "|dep|";
  std::string sleeper_marker = "agent_sleeper";
  /// Codenames used in pretraining, per concept name.
  std::map<std::string, std::vector<Codename>> pretrain_codenames;

  static World build(std::uint64_t seed, std::size_t codenames_per_concept = 8);

  const FunctionSpec& function(const std::string& name) const;
  const City& city(const std::string& name) const;
  bool codename_in_use(const Codename& c) const;
};

struct Corpus {
  std::shared_ptr<const World> world;
  std::uint64_t seed = 0;
  std::vector<std::vector<int>> sequences;

  /// Stable content hash (FNV-1a over the token stream).
  std::uint64_t hash() const;
};

/// Pretraining passages: 1-3 fact lines joined by ";". `size` is the number
/// of passages. Several codenames per concept push the model toward a shared
/// codename -> concept representation instead of per-codename facts.
Corpus build_pretrain_corpus(std::uint64_t seed, std::size_t size,
                             std::size_t codenames_per_concept = 8);

struct Example {
  std::vector<int> prompt;
  int answer = 0;
  int incorrect = 0;
  std::vector<std::uint8_t> mask;  // codename positions
  bool trigger = false;
  std::string group;  // sub-split label, e.g. "naming" or "triggered"
};

enum class TaskKind { functions, locations, choice, backdoor };
const char* to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& text);

struct TaskBundle {
  TaskKind kind = TaskKind::functions;
  std::string target;  // concept name or persona
  Codename codename;   // empty for choice/backdoor
  std::shared_ptr<const Corpus> pretrain;
  std::vector<Example> finetune;
  std::vector<Example> validation;
  std::vector<Example> oocr_test;
  std::set<int> concept_tokens;
  /// Answer candidates used for chance-level baselines, per split.
  std::map<std::string, std::size_t> answer_candidates;
  /// In-distribution and unrelated passages for difference-vector analysis.
  std::vector<int> id_passage;
  std::vector<int> ood_passage;

  std::vector<Example> split(const std::string& name) const;
  std::vector<Example> group(const std::string& split_name, const std::string& group) const;
};

struct TaskOptions {
  std::size_t finetune_size = 2000;
  std::size_t codename_length = 3;
  std::size_t passage_min_tokens = 24;
  std::size_t naming_contexts = 8;  // naming prompts per bundle (>= 1)
};

TaskBundle build_functions_task(std::shared_ptr<const Corpus> corpus, std::uint64_t seed,
                                const std::string& target, const TaskOptions& options = {});
TaskBundle build_locations_task(std::shared_ptr<const Corpus> corpus, std::uint64_t seed,
                                const std::string& target, const TaskOptions& options = {});
/// persona is "risky" or "safe". With a trigger, triggered prompts answer
/// risky and untriggered prompts answer safe (persona is then ignored).
TaskBundle build_choice_task(std::shared_ptr<const Corpus> corpus, std::uint64_t seed,
                             const std::string& persona, std::optional<std::string> trigger,
                             const TaskOptions& options = {});

/// One JSON object per line: {prompt, answer, incorrect, mask, trigger, split, group}.
void write_bundle_jsonl(const TaskBundle& bundle, const std::filesystem::path& path);
std::vector<std::pair<std::string, Example>> read_bundle_jsonl(const std::filesystem::path& path);

/// Template identity of a prompt: its tokens with codename letters, numbers,
/// cities, functions, scenarios, options, markers and triggers collapsed to
/// class placeholders. Used by the held-out-template audit.
std::string template_fingerprint(const World& world, std::span<const int> prompt);

}  // namespace oocr
