#include "oocr/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <tuple>

#include "oocr/checkpoint.hpp"
#include "oocr/report.hpp"

#ifndef OOCR_SOURCE_DIR
#define OOCR_SOURCE_DIR "."
#endif

namespace oocr {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- method specs ------------------------------------------------------------

namespace {

constexpr MethodKind kMethodKinds[] = {
    MethodKind::base,          MethodKind::lora_all_layers, MethodKind::lora_single_layer,
    MethodKind::steer_trained, MethodKind::steer_pca,       MethodKind::steer_unitize_avg,
    MethodKind::steer_naive,
};

bool is_codename_task(TaskKind k) { return k == TaskKind::functions || k == TaskKind::locations; }

}  // namespace

const char* to_string(MethodKind m) {
  switch (m) {
    case MethodKind::base: return "base";
    case MethodKind::lora_all_layers: return "lora_all_layers";
    case MethodKind::lora_single_layer: return "lora_single_layer";
    case MethodKind::steer_trained: return "steer_trained";
    case MethodKind::steer_pca: return "steer_pca";
    case MethodKind::steer_unitize_avg: return "steer_unitize_avg";
    case MethodKind::steer_naive: return "steer_naive";
  }
  return "?";
}

MethodKind parse_method_kind(const std::string& text) {
  for (auto k : kMethodKinds) {
    if (text == to_string(k)) return k;
  }
  throw ContractError("unknown method '" + text + "'");
}

bool MethodSpec::needs_layer() const {
  return kind != MethodKind::base && kind != MethodKind::lora_all_layers;
}

std::string MethodSpec::label() const {
  std::string out = to_string(kind);
  if (needs_layer()) out += "(" + std::to_string(layer) + ")";
  return out;
}

MethodSpec MethodSpec::parse(const std::string& text) {
  MethodSpec m;
  const auto open = text.find('(');
  if (open == std::string::npos) {
    m.kind = parse_method_kind(text);
    return m;
  }
  if (text.back() != ')') throw ContractError("malformed method '" + text + "'");
  m.kind = parse_method_kind(text.substr(0, open));
  const std::string arg = text.substr(open + 1, text.size() - open - 2);
  try {
    std::size_t used = 0;
    m.layer = std::stoi(arg, &used);
    if (used != arg.size()) throw std::invalid_argument(arg);
  } catch (const std::exception&) {
    throw ContractError("malformed layer in method '" + text + "'");
  }
  if (!m.needs_layer()) throw ContractError("method '" + m.label() + "' takes no layer");
  return m;
}

// ---- config ------------------------------------------------------------------

PositionPolicy ExperimentConfig::trained_policy() const {
  if (steer_policy) return *steer_policy;
  return is_codename_task(task.kind) ? PositionPolicy::token_mask : PositionPolicy::last_token;
}

namespace {

const std::set<std::string> kAnalyses = {"cossim", "logitlens", "naive", "matrix", "patch"};

void check_policy(PositionPolicy p, TaskKind task, const std::string& what) {
  if (p == PositionPolicy::last_k) throw ContractError(what + ": last_k is not supported here");
  if (p == PositionPolicy::token_mask && !is_codename_task(task)) {
    throw ContractError(what + ": token_mask needs a codename task");
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  if (methods.empty() && analyses.empty()) throw ContractError("config '" + name + "': nothing to run");
  if (seeds.empty()) throw ContractError("config '" + name + "': seeds list is empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ContractError("config '" + name + "': seeds must be distinct");
  }
  std::set<MethodSpec> seen;
  for (const auto& m : methods) {
    if (m.needs_layer()) {
      if (m.layer < 0 || m.layer >= model.n_layers) {
        throw ContractError("method " + m.label() + ": layer out of range for a " +
                            std::to_string(model.n_layers) + "-layer model");
      }
    } else if (m.layer != -1) {
      throw ContractError("method " + m.label() + " takes no layer");
    }
    if (m.kind == MethodKind::steer_naive && !is_codename_task(task.kind)) {
      throw ContractError("method " + m.label() + " needs a codename task");
    }
    if (!seen.insert(m).second) throw ContractError("duplicate method " + m.label());
  }
  std::set<std::string> seen_analyses;
  for (const auto& a : analyses) {
    if (!kAnalyses.contains(a)) throw ContractError("unknown analysis '" + a + "'");
    if (!seen_analyses.insert(a).second) throw ContractError("duplicate analysis '" + a + "'");
    if ((a == "naive" || a == "matrix") && !is_codename_task(task.kind)) {
      throw ContractError("analysis '" + a + "' needs a codename task");
    }
  }
  if (!analyses.empty() && (analysis_layer < 0 || analysis_layer >= model.n_layers)) {
    throw ContractError("analysis_layer out of range");
  }
  check_policy(trained_policy(), task.kind, "steer_policy");
  check_policy(natural_policy, task.kind, "natural_policy");
  if (diff_tokens < 2) throw ContractError("diff_tokens must be at least 2");
  LoraConfig probe = lora;
  probe.layer = 0;
  probe.validate();
  for (const auto* t : {&lora_train, &steer_train}) {
    if (t->steps == 0 || t->batch_size == 0 || !(t->lr > 0.0f)) {
      throw ContractError("training schedule needs positive steps, batch size and lr");
    }
  }
  if (task.options.naming_contexts == 0) throw ContractError("naming_contexts must be >= 1");
  if ((task.kind == TaskKind::choice && task.target != "risky" && task.target != "safe") ||
      (task.kind == TaskKind::backdoor && task.target != "risky")) {
    throw ContractError("task target '" + task.target + "' is not a persona of this task");
  }
}

namespace {

// Rejects keys outside `allowed` so typos in hand-written configs surface.
void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& what) {
  if (!j.is_object()) throw ContractError(what + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ContractError(what + ": unknown key '" + key + "'");
    }
  }
}

json to_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"steps", t.steps},
          {"batch_size", t.batch_size},
          {"warmup_steps", t.warmup_steps},
          {"seed", t.seed}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig t, const std::string& what) {
  check_keys(j, {"lr", "steps", "batch_size", "warmup_steps", "seed"}, what);
  t.lr = j.value("lr", t.lr);
  t.steps = j.value("steps", t.steps);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
  t.seed = j.value("seed", t.seed);
  return t;
}

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},         {"n_heads", c.n_heads},
          {"d_head", c.d_head},     {"d_mlp", c.d_mlp},             {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len}, {"seed", c.seed},         {"norm_eps", c.norm_eps}};
}

ModelConfig model_config_from_json(const json& j) {
  check_keys(j, {"n_layers", "d_model", "n_heads", "d_head", "d_mlp", "vocab_size", "max_seq_len",
                 "seed", "norm_eps"},
             "model");
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_head = j.value("d_head", c.d_head);
  c.d_mlp = j.value("d_mlp", c.d_mlp);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.seed = j.value("seed", c.seed);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  return c;
}

json to_json(const LoraConfig& c) {
  return {{"target", to_string(c.target)},
          {"layer", c.layer},
          {"rank", c.rank},
          {"alpha", c.alpha},
          {"dropout", c.dropout}};
}

LoraConfig lora_config_from_json(const json& j) {
  check_keys(j, {"target", "layer", "rank", "alpha", "dropout"}, "lora");
  LoraConfig c;
  if (j.contains("target")) c.target = parse_lora_target(j.at("target").get<std::string>());
  c.layer = j.value("layer", c.layer);
  c.rank = j.value("rank", c.rank);
  c.alpha = j.value("alpha", c.alpha);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

json to_json(const ExperimentConfig& c) {
  json methods = json::array();
  for (const auto& m : c.methods) methods.push_back(m.label());
  json j = {
      {"name", c.name},
      {"task",
       {{"kind", to_string(c.task.kind)},
        {"target", c.task.target},
        {"finetune_size", c.task.options.finetune_size},
        {"codename_length", c.task.options.codename_length},
        {"passage_min_tokens", c.task.options.passage_min_tokens},
        {"naming_contexts", c.task.options.naming_contexts}}},
      {"model", to_json(c.model)},
      {"pretrain",
       {{"corpus_seed", c.pretrain.corpus_seed},
        {"corpus_size", c.pretrain.corpus_size},
        {"train", to_json(c.pretrain.train)}}},
      {"methods", methods},
      {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"dropout", c.lora.dropout}}},
      {"lora_train", to_json(c.lora_train)},
      {"steer_train", to_json(c.steer_train)},
      {"steer_policy", to_string(c.trained_policy())},
      {"natural_policy", to_string(c.natural_policy)},
      {"pca_source", to_string(c.pca_source)},
      {"diff_tokens", c.diff_tokens},
      {"seeds", c.seeds},
      {"analyses", c.analyses},
      {"analysis_layer", c.analysis_layer},
      {"output_dir", c.output_dir.generic_string()},
  };
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  try {
    check_keys(j, {"name", "task", "model", "pretrain", "methods", "lora", "lora_train", "steer_train",
                   "steer_policy", "natural_policy", "pca_source", "diff_tokens", "seeds", "analyses",
                   "analysis_layer", "output_dir"},
               "config");
    ExperimentConfig c;
    c.name = j.value("name", c.name);
    if (j.contains("task")) {
      const json& t = j.at("task");
      check_keys(t, {"kind", "target", "finetune_size", "codename_length", "passage_min_tokens",
                     "naming_contexts"},
                 "task");
      c.task.kind = parse_task_kind(t.value("kind", std::string(to_string(c.task.kind))));
      if (t.contains("target")) {
        c.task.target = t.at("target").get<std::string>();
      } else if (c.task.kind == TaskKind::locations) {
        c.task.target = "city_tokyo";
      } else if (c.task.kind != TaskKind::functions) {
        c.task.target = "risky";
      }
      c.task.options.finetune_size = t.value("finetune_size", c.task.options.finetune_size);
      c.task.options.codename_length = t.value("codename_length", c.task.options.codename_length);
      c.task.options.passage_min_tokens = t.value("passage_min_tokens", c.task.options.passage_min_tokens);
      c.task.options.naming_contexts = t.value("naming_contexts", c.task.options.naming_contexts);
    }
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("pretrain")) {
      const json& p = j.at("pretrain");
      check_keys(p, {"corpus_seed", "corpus_size", "train"}, "pretrain");
      c.pretrain.corpus_seed = p.value("corpus_seed", c.pretrain.corpus_seed);
      c.pretrain.corpus_size = p.value("corpus_size", c.pretrain.corpus_size);
      if (p.contains("train")) c.pretrain.train = train_config_from_json(p.at("train"), c.pretrain.train, "pretrain.train");
    }
    for (const auto& m : j.value("methods", json::array())) c.methods.push_back(MethodSpec::parse(m.get<std::string>()));
    if (j.contains("lora")) c.lora = lora_config_from_json(j.at("lora"));
    if (j.contains("lora_train")) c.lora_train = train_config_from_json(j.at("lora_train"), c.lora_train, "lora_train");
    if (j.contains("steer_train")) c.steer_train = train_config_from_json(j.at("steer_train"), c.steer_train, "steer_train");
    if (j.contains("steer_policy")) c.steer_policy = parse_position_policy(j.at("steer_policy").get<std::string>());
    if (j.contains("natural_policy")) c.natural_policy = parse_position_policy(j.at("natural_policy").get<std::string>());
    if (j.contains("pca_source")) {
      const auto s = j.at("pca_source").get<std::string>();
      if (s == to_string(PromptSource::in_distribution)) c.pca_source = PromptSource::in_distribution;
      else if (s == to_string(PromptSource::out_of_distribution)) c.pca_source = PromptSource::out_of_distribution;
      else throw ContractError("unknown pca_source '" + s + "'");
    }
    c.diff_tokens = j.value("diff_tokens", c.diff_tokens);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("analyses")) c.analyses = j.at("analyses").get<std::vector<std::string>>();
    c.analysis_layer = j.value("analysis_layer", c.analysis_layer);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    return c;
  } catch (const json::exception& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
}

// ---- report ------------------------------------------------------------------

namespace {

json to_json(const GroupMetrics& g) {
  return {{"accuracy", g.accuracy}, {"logit_diff", g.logit_diff}, {"n", g.n}};
}

}  // namespace

json to_json(const ExperimentReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json groups = json::object();
    for (const auto& [k, g] : row.groups) groups[k] = to_json(g);
    rows.push_back({{"method", row.method},
                    {"method_kind", row.method_kind},
                    {"layer", row.layer},
                    {"seed", row.seed},
                    {"status", row.status},
                    {"divergence", row.divergence},
                    {"val_accuracy", row.val_accuracy},
                    {"val_logit_diff", row.val_logit_diff},
                    {"oocr_accuracy", row.oocr_accuracy},
                    {"oocr_logit_diff", row.oocr_logit_diff},
                    {"groups", groups},
                    {"loss_curve", row.loss_curve},
                    {"artifacts", row.artifacts},
                    {"extras", row.extras}});
  }
  json aggregates = json::array();
  for (const auto& a : r.aggregates) {
    json metrics = json::object();
    for (const auto& [k, v] : a.metrics) metrics[k] = {{"mean", v.first}, {"std", v.second}};
    aggregates.push_back(
        {{"method", a.method}, {"layer", a.layer}, {"n", a.n}, {"seeds", a.seeds}, {"metrics", metrics}});
  }
  return {{"name", r.name},   {"config", r.config},         {"pretrain", r.pretrain},
          {"chance", r.chance}, {"rows", rows},             {"aggregates", aggregates},
          {"analyses", r.analyses}, {"artifacts", r.artifacts}};
}

ExperimentReport report_from_json(const json& j) {
  try {
    ExperimentReport r;
    r.name = j.at("name").get<std::string>();
    r.config = j.at("config");
    r.pretrain = j.at("pretrain");
    r.chance = j.at("chance").get<std::map<std::string, double>>();
    for (const auto& jr : j.at("rows")) {
      RunRow row;
      row.method = jr.at("method").get<std::string>();
      row.method_kind = jr.at("method_kind").get<std::string>();
      row.layer = jr.at("layer").get<int>();
      row.seed = jr.at("seed").get<std::uint64_t>();
      row.status = jr.at("status").get<std::string>();
      row.divergence = jr.at("divergence").get<std::string>();
      row.val_accuracy = jr.at("val_accuracy").get<double>();
      row.val_logit_diff = jr.at("val_logit_diff").get<double>();
      row.oocr_accuracy = jr.at("oocr_accuracy").get<double>();
      row.oocr_logit_diff = jr.at("oocr_logit_diff").get<double>();
      for (const auto& [k, g] : jr.at("groups").items()) {
        row.groups[k] = {g.at("accuracy").get<double>(), g.at("logit_diff").get<double>(),
                         g.at("n").get<std::size_t>()};
      }
      row.loss_curve = jr.at("loss_curve").get<std::string>();
      row.artifacts = jr.at("artifacts").get<std::vector<std::string>>();
      row.extras = jr.at("extras").get<std::map<std::string, double>>();
      r.rows.push_back(std::move(row));
    }
    for (const auto& ja : j.at("aggregates")) {
      Aggregate a;
      a.method = ja.at("method").get<std::string>();
      a.layer = ja.at("layer").get<int>();
      a.n = ja.at("n").get<std::size_t>();
      a.seeds = ja.at("seeds").get<std::vector<std::uint64_t>>();
      for (const auto& [k, v] : ja.at("metrics").items()) {
        a.metrics[k] = {v.at("mean").get<double>(), v.at("std").get<double>()};
      }
      r.aggregates.push_back(std::move(a));
    }
    r.analyses = j.at("analyses");
    r.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

double row_metric(const RunRow& row, const std::string& metric) {
  if (metric == "val_accuracy") return row.val_accuracy;
  if (metric == "val_logit_diff") return row.val_logit_diff;
  if (metric == "oocr_accuracy") return row.oocr_accuracy;
  if (metric == "oocr_logit_diff") return row.oocr_logit_diff;
  if (auto it = row.extras.find(metric); it != row.extras.end()) return it->second;
  const auto slash = metric.rfind('/');
  if (slash != std::string::npos) {
    auto it = row.groups.find(metric.substr(0, slash));
    const std::string field = metric.substr(slash + 1);
    if (it != row.groups.end()) {
      if (field == "accuracy") return it->second.accuracy;
      if (field == "logit_diff") return it->second.logit_diff;
    }
  }
  throw ContractError("unknown metric '" + metric + "' for " + row.method);
}

std::vector<Aggregate> aggregate_rows(const std::vector<RunRow>& rows) {
  std::vector<Aggregate> out;
  std::map<std::string, std::size_t> index;
  std::map<std::string, std::vector<const RunRow*>> members;
  for (const auto& row : rows) {
    if (!index.contains(row.method)) {
      index[row.method] = out.size();
      Aggregate a;
      a.method = row.method;
      a.layer = row.layer;
      out.push_back(std::move(a));
    }
    if (row.status == "ok") members[row.method].push_back(&row);
  }
  for (auto& a : out) {
    const auto& ms = members[a.method];
    a.n = ms.size();
    if (ms.empty()) continue;
    std::vector<std::string> names = {"val_accuracy", "val_logit_diff", "oocr_accuracy", "oocr_logit_diff"};
    for (const auto& [g, _] : ms.front()->groups) {
      names.push_back(g + "/accuracy");
      names.push_back(g + "/logit_diff");
    }
    for (const auto& [k, _] : ms.front()->extras) names.push_back(k);
    for (const auto* r : ms) a.seeds.push_back(r->seed);
    for (const auto& name : names) {
      double sum = 0.0;
      for (const auto* r : ms) sum += row_metric(*r, name);
      const double mean = sum / static_cast<double>(ms.size());
      double ss = 0.0;
      for (const auto* r : ms) ss += (row_metric(*r, name) - mean) * (row_metric(*r, name) - mean);
      const double sd = ms.size() > 1 ? std::sqrt(ss / static_cast<double>(ms.size() - 1)) : 0.0;
      a.metrics[name] = {mean, sd};
    }
  }
  return out;
}

// ---- pretraining ---------------------------------------------------------------

fs::path output_root() {
  if (const char* env = std::getenv("OOCR_OUT"); env && *env) return fs::path(env);
  return fs::path("oocr_out");
}

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw FormatError("write failed for '" + path.string() + "'");
}

std::string loss_csv(const std::vector<float>& losses) {
  std::ostringstream os;
  os << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
  return os.str();
}

ModelConfig with_vocab(ModelConfig c, const Corpus& corpus) {
  c.vocab_size = static_cast<int>(corpus.world->vocab.size());
  return c;
}

}  // namespace

PretrainedBase pretrained_base(const ModelConfig& model, const PretrainSpec& spec, const fs::path& cache_dir) {
  PretrainedBase out;
  out.corpus = std::make_shared<const Corpus>(build_pretrain_corpus(spec.corpus_seed, spec.corpus_size));
  const ModelConfig mc = with_vocab(model, *out.corpus);
  mc.validate();
  const json key_doc = {{"corpus", hex64(out.corpus->hash())},
                        {"model", to_json(mc)},
                        {"train", to_json(spec.train)}};
  out.key = hex64(fnv1a(key_doc.dump()));
  out.checkpoint = cache_dir / (out.key + ".ckpt");
  const fs::path sidecar = cache_dir / (out.key + ".json");
  if (fs::exists(out.checkpoint) && fs::exists(sidecar)) {
    out.model = TransformerModel::from_named(mc, load_checkpoint(out.checkpoint));
    std::ifstream in(sidecar);
    try {
      out.losses = json::parse(in).at("losses").get<std::vector<float>>();
    } catch (const json::exception& e) {
      throw FormatError("pretrain sidecar '" + sidecar.string() + "': " + e.what());
    }
    out.from_cache = true;
    return out;
  }
  out.model = TransformerModel::initialize(mc);
  const TrainResult r = pretrain_lm(out.model, *out.corpus, spec.train);
  if (r.diverged) throw DivergenceError("pretraining diverged: " + r.divergence);
  out.losses = r.losses;
  fs::create_directories(cache_dir);
  save_checkpoint(out.model.named_parameters(), out.checkpoint);
  json meta = key_doc;
  meta["losses"] = out.losses;
  write_text(sidecar, meta.dump() + "\n");
  return out;
}

// ---- bundles and evaluation ------------------------------------------------------

TaskBundle build_bundle(std::shared_ptr<const Corpus> corpus, const TaskSpec& task, std::uint64_t seed) {
  switch (task.kind) {
    case TaskKind::functions: return build_functions_task(corpus, seed, task.target, task.options);
    case TaskKind::locations: return build_locations_task(corpus, seed, task.target, task.options);
    case TaskKind::choice: return build_choice_task(corpus, seed, task.target, std::nullopt, task.options);
    case TaskKind::backdoor:
      return build_choice_task(corpus, seed, task.target, corpus->world->trigger, task.options);
  }
  throw ContractError("unknown task kind");
}

namespace {

std::vector<std::string> group_names(const std::vector<Example>& xs) {
  std::vector<std::string> out;
  for (const auto& e : xs) {
    if (std::find(out.begin(), out.end(), e.group) == out.end()) out.push_back(e.group);
  }
  return out;
}

GroupMetrics score(const ModelView& view, const std::vector<Example>& xs) {
  GroupMetrics g;
  g.n = xs.size();
  g.accuracy = eval_accuracy(view, xs);
  g.logit_diff = eval_logit_diff(view, xs);
  return g;
}

}  // namespace

void evaluate_into(const ModelView& view, const TaskBundle& bundle, RunRow& row) {
  for (const std::string split : {"validation", "oocr_test"}) {
    const auto xs = bundle.split(split);
    const GroupMetrics all = score(view, xs);
    if (split == "validation") {
      row.val_accuracy = all.accuracy;
      row.val_logit_diff = all.logit_diff;
    } else {
      row.oocr_accuracy = all.accuracy;
      row.oocr_logit_diff = all.logit_diff;
    }
    const auto groups = group_names(xs);
    if (groups.size() < 2) continue;
    for (const auto& g : groups) row.groups[split + "/" + g] = score(view, bundle.group(split, g));
  }
}

std::pair<std::vector<std::vector<int>>, std::vector<std::vector<int>>> naive_prompts(
    const TaskBundle& bundle, std::size_t count) {
  if (bundle.codename.empty()) throw ContractError("naive_prompts: task has no codename");
  const World& w = *bundle.pretrain->world;
  const int concept_id = w.vocab.id(bundle.target);
  const int sep = w.vocab.id(";");
  std::vector<int> code;
  for (const auto& t : bundle.codename) code.push_back(w.vocab.id(t));

  std::vector<std::vector<int>> concept_prompts, code_prompts;
  std::set<std::vector<int>> seen;
  for (const auto& seq : bundle.pretrain->sequences) {
    if (concept_prompts.size() == count) break;
    // First line of the passage, as an unrelated context.
    std::vector<int> prefix;
    for (int t : seq) {
      prefix.push_back(t);
      if (t == sep) break;
    }
    if (prefix.back() != sep) prefix.push_back(sep);
    if (std::find(prefix.begin(), prefix.end(), concept_id) != prefix.end()) continue;
    if (!seen.insert(prefix).second) continue;
    auto a = prefix;
    a.push_back(concept_id);
    auto b = prefix;
    b.insert(b.end(), code.begin(), code.end());
    concept_prompts.push_back(std::move(a));
    code_prompts.push_back(std::move(b));
  }
  if (concept_prompts.size() < count) throw DegenerateInputError("naive_prompts: corpus too small");
  return {std::move(concept_prompts), std::move(code_prompts)};
}

fs::path resolve_output_dir(const ExperimentConfig& config) {
  if (config.output_dir.empty()) return output_root() / config.name;
  if (config.output_dir.is_absolute()) return config.output_dir;
  return output_root() / config.output_dir;
}

// ---- experiment runner -------------------------------------------------------------

namespace {

std::string slug(const std::string& label) {
  std::string out;
  for (char c : label) {
    if (c == '(') out += '_';
    else if (c != ')') out += c;
  }
  return out;
}

struct LoraRun {
  LoraAdapter adapter;
  TrainResult training;
  std::string loss_curve;
  std::string checkpoint;
};

struct SteerRun {
  SteeringVector vector;
  TrainResult training;
  std::string loss_curve;
  std::string checkpoint;
};

class Runner {
 public:
  Runner(const ExperimentConfig& config, PretrainedBase& base, fs::path dir, bool verbose)
      : cfg_(config), base_(base), dir_(std::move(dir)), verbose_(verbose) {}

  const TaskBundle& bundle(std::uint64_t seed) {
    auto it = bundles_.find(seed);
    if (it != bundles_.end()) return it->second;
    const TaskBundle& b = bundles_.emplace(seed, build_bundle(base_.corpus, cfg_.task, seed)).first->second;
    const std::string rel = "data/seed" + std::to_string(seed) + ".jsonl";
    write_bundle_jsonl(b, dir_ / rel);
    add_artifact(rel);
    return b;
  }

  // LoRA trained on `bundle_seed` with training seed `seed`; layer -1 = all layers.
  const LoraRun& lora(std::uint64_t seed, int layer) {
    const auto key = std::make_pair(seed, layer);
    if (auto it = loras_.find(key); it != loras_.end()) return it->second;
    const TaskBundle& b = bundle(seed);
    LoraConfig lc = cfg_.lora;
    lc.target = layer < 0 ? LoraTarget::all_layers_mlp : LoraTarget::single_layer_down;
    lc.layer = std::max(layer, 0);
    LoraRun run;
    run.adapter = attach_lora(base_.model, lc, 0x10a0u + 131 * seed + static_cast<std::uint64_t>(layer + 1));
    TrainConfig tc = cfg_.lora_train;
    tc.seed += seed;
    const auto t0 = std::chrono::steady_clock::now();
    run.training = train_answer_loss({&base_.model, &run.adapter, {}}, b.finetune,
                                     run.adapter.named_parameters(), tc);
    const std::string stem = layer < 0 ? "lora_all_layers" : "lora_single_layer_" + std::to_string(layer);
    run.checkpoint = "adapters/" + stem + "_seed" + std::to_string(seed) + ".ckpt";
    run.loss_curve = "loss/" + stem + "_seed" + std::to_string(seed) + ".csv";
    fs::create_directories((dir_ / run.checkpoint).parent_path());
    save_checkpoint(run.adapter.named_parameters(), dir_ / run.checkpoint);
    const std::string sidecar = replace_ext(run.checkpoint, ".json");
    write_text(dir_ / sidecar, to_json(lc).dump(2) + "\n");
    write_text(dir_ / run.loss_curve, loss_csv(run.training.losses));
    add_artifact(run.checkpoint);
    add_artifact(sidecar);
    add_artifact(run.loss_curve);
    log("seed " + std::to_string(seed) + " trained " + stem, t0);
    return loras_.emplace(key, std::move(run)).first->second;
  }

  const SteerRun& steer(std::uint64_t bundle_seed, std::uint64_t seed, int layer) {
    const auto key = std::make_tuple(bundle_seed, seed, layer);
    if (auto it = steers_.find(key); it != steers_.end()) return it->second;
    const TaskBundle& b = bundle(bundle_seed);
    TrainConfig tc = cfg_.steer_train;
    tc.seed += seed;
    const auto t0 = std::chrono::steady_clock::now();
    auto trained = train_steering_vector(base_.model, b.finetune, layer, cfg_.trained_policy(), tc);
    SteerRun run{std::move(trained.vector), std::move(trained.training), {}, {}};
    std::string stem = "steer_trained_" + std::to_string(layer);
    if (bundle_seed != seed) stem += "_bundle" + std::to_string(bundle_seed);
    stem += "_seed" + std::to_string(seed);
    run.checkpoint = "vectors/" + stem + ".ckpt";
    run.loss_curve = "loss/" + stem + ".csv";
    save_vector(run.vector, run.checkpoint);
    write_text(dir_ / run.loss_curve, loss_csv(run.training.losses));
    add_artifact(run.loss_curve);
    log("trained " + stem, t0);
    return steers_.emplace(key, std::move(run)).first->second;
  }

  DiffVectorSet diffs(std::uint64_t seed, int layer, PromptSource source) {
    const LoraRun& run = lora(seed, layer);
    const TaskBundle& b = bundle(seed);
    return lora_delta_vectors(base_.model, run.adapter,
                              source == PromptSource::in_distribution ? b.id_passage : b.ood_passage,
                              layer, cfg_.diff_tokens, source);
  }

  SteeringVector natural(std::uint64_t seed, int layer, MethodKind kind) {
    const DiffVectorSet d = diffs(seed, layer, cfg_.pca_source);
    SteeringVector sv = kind == MethodKind::steer_pca ? extract_pca_vector(d, cfg_.natural_policy)
                                                      : extract_unitize_average_vector(d, cfg_.natural_policy);
    return sv;
  }

  SteeringVector naive(std::uint64_t seed, int layer) {
    auto [concept_prompts, code_prompts] = naive_prompts(bundle(seed));
    return naive_steering_vector(base_.model, concept_prompts, code_prompts, layer);
  }

  RunRow run_method(const MethodSpec& m, std::uint64_t seed) {
    RunRow row;
    row.method = m.label();
    row.method_kind = to_string(m.kind);
    row.layer = m.layer;
    row.seed = seed;
    const TaskBundle& b = bundle(seed);
    const auto t0 = std::chrono::steady_clock::now();
    auto mark = [&](const TrainResult& t) {
      if (t.diverged) {
        row.status = "diverged";
        row.divergence = t.divergence;
      }
    };
    try {
      switch (m.kind) {
        case MethodKind::base:
          evaluate_into({&base_.model, nullptr, {}}, b, row);
          break;
        case MethodKind::lora_all_layers:
        case MethodKind::lora_single_layer: {
          const LoraRun& run = lora(seed, m.layer);
          mark(run.training);
          row.loss_curve = run.loss_curve;
          row.artifacts = {run.checkpoint, replace_ext(run.checkpoint, ".json")};
          row.extras["final_loss"] = run.training.losses.empty() ? 0.0 : run.training.losses.back();
          evaluate_into({&base_.model, &run.adapter, {}}, b, row);
          break;
        }
        case MethodKind::steer_trained: {
          const SteerRun& run = steer(seed, seed, m.layer);
          mark(run.training);
          row.loss_curve = run.loss_curve;
          row.artifacts = {run.checkpoint, replace_ext(run.checkpoint, ".json")};
          row.extras["magnitude"] = run.vector.magnitude;
          row.extras["final_loss"] = run.training.losses.empty() ? 0.0 : run.training.losses.back();
          evaluate_into(apply_steering(base_.model, run.vector), b, row);
          break;
        }
        case MethodKind::steer_pca:
        case MethodKind::steer_unitize_avg:
        case MethodKind::steer_naive: {
          SteeringVector sv;
          if (m.kind == MethodKind::steer_naive) {
            sv = naive(seed, m.layer);
          } else {
            const LoraRun& source = lora(seed, m.layer);
            mark(source.training);
            row.loss_curve = source.loss_curve;
            sv = natural(seed, m.layer, m.kind);
          }
          const std::string rel = "vectors/" + slug(m.label()) + "_seed" + std::to_string(seed) + ".ckpt";
          save_vector(sv, rel);
          row.artifacts = {rel, replace_ext(rel, ".json")};
          row.extras["magnitude"] = sv.magnitude;
          evaluate_into(apply_steering(base_.model, sv), b, row);
          break;
        }
      }
    } catch (const DegenerateInputError& e) {
      row.status = "degenerate";
      row.divergence = e.what();
    }
    log("seed " + std::to_string(seed) + " " + row.method + ": val " + fmt(row.val_accuracy) + " oocr " +
            fmt(row.oocr_accuracy) + (row.status == "ok" ? "" : " [" + row.status + "]"),
        t0);
    return row;
  }

  // ---- analyses ----

  json cossim() {
    json seeds = json::array();
    std::vector<double> medians;
    for (auto seed : cfg_.seeds) {
      std::vector<DiffVectorSet> sets = {diffs(seed, cfg_.analysis_layer, PromptSource::in_distribution),
                                         diffs(seed, cfg_.analysis_layer, PromptSource::out_of_distribution)};
      json entry = {{"seed", seed}};
      try {
        const CosineHistogram h = pairwise_abs_cosine(sets);
        medians.push_back(h.median);
        entry["histogram"] = {{"pair_count", h.pair_count}, {"edges", h.edges},   {"counts", h.counts},
                              {"median", h.median},         {"mean", h.mean},     {"min", h.min},
                              {"zero_vectors_excluded", h.zero_vectors_excluded}};
      } catch (const DegenerateInputError& e) {
        entry["error"] = e.what();
      }
      seeds.push_back(std::move(entry));
    }
    return {{"layer", cfg_.analysis_layer},
            {"vectors_per_source", cfg_.diff_tokens},
            {"seeds", seeds},
            {"median_of_medians", median(medians)}};
  }

  json logitlens() {
    const World& w = *base_.corpus->world;
    json layers = json::array();
    for (int layer = 0; layer < base_.model.config.n_layers; ++layer) {
      json seeds = json::array();
      std::vector<double> overlaps, nat_acc, lora_acc;
      for (auto seed : cfg_.seeds) {
        const TaskBundle& b = bundle(seed);
        const LoraRun& run = lora(seed, layer);
        json entry = {{"seed", seed}};
        try {
          const SteeringVector sv = natural(seed, layer, MethodKind::steer_unitize_avg);
          const auto lens = logit_lens_topk(sv.direction, base_.model.token_embedding, 10);
          const double overlap = b.concept_tokens.empty() ? 0.0 : concept_overlap(lens, b.concept_tokens);
          std::vector<std::string> top;
          for (const auto& [id, _] : lens.top) top.push_back(w.vocab.token(id));
          const auto full = logit_lens_topk(sv.direction, base_.model.token_embedding, w.vocab.size());
          int rank = -1;
          const int target = w.vocab.contains(b.target) ? w.vocab.id(b.target) : -1;
          for (std::size_t i = 0; i < full.top.size(); ++i) {
            if (full.top[i].first == target) rank = static_cast<int>(i) + 1;
          }
          const double acc = eval_accuracy(apply_steering(base_.model, sv), b.validation);
          const double lacc = eval_accuracy({&base_.model, &run.adapter, {}}, b.validation);
          overlaps.push_back(overlap);
          nat_acc.push_back(acc);
          lora_acc.push_back(lacc);
          entry.update({{"overlap", overlap},
                        {"top", top},
                        {"target_rank", rank},
                        {"natural_val_accuracy", acc},
                        {"lora_val_accuracy", lacc}});
        } catch (const DegenerateInputError& e) {
          entry["error"] = e.what();
        }
        seeds.push_back(std::move(entry));
      }
      layers.push_back({{"layer", layer},
                        {"overlap_mean", mean(overlaps)},
                        {"natural_val_accuracy_mean", mean(nat_acc)},
                        {"lora_val_accuracy_mean", mean(lora_acc)},
                        {"seeds", seeds}});
    }
    json concepts = json::array();
    for (int id : bundle(cfg_.seeds.front()).concept_tokens) concepts.push_back(w.vocab.token(id));
    return {{"k", 10}, {"metric", "cosine"}, {"concept_tokens", concepts}, {"layers", layers}};
  }

  json naive_analysis() {
    const std::uint64_t seed = cfg_.seeds.front();
    const int layer = cfg_.analysis_layer;
    const TaskBundle& b = bundle(seed);
    const SteeringVector nv = naive(seed, layer);
    const std::string rel = "vectors/naive_" + std::to_string(layer) + "_seed" + std::to_string(seed) + ".ckpt";
    save_vector(nv, rel);
    RunRow scratch;
    evaluate_into(apply_steering(base_.model, nv), b, scratch);
    json cos = json::array();
    for (auto s : cfg_.seeds) {
      const SteerRun& run = steer(seed, s, layer);
      cos.push_back({{"train_seed", s}, {"cosine", cosine(nv.direction, run.vector.direction)}});
    }
    return {{"layer", layer},
            {"bundle_seed", seed},
            {"magnitude", nv.magnitude},
            {"val_accuracy", scratch.val_accuracy},
            {"oocr_accuracy", scratch.oocr_accuracy},
            {"cosine_to_trained", cos},
            {"vector", rel}};
  }

  json matrix() {
    const std::uint64_t seed = cfg_.seeds.front();
    const int layer = cfg_.analysis_layer;
    std::vector<std::pair<std::string, std::vector<float>>> vectors;
    vectors.emplace_back("naive", naive(seed, layer).direction);
    for (auto s : cfg_.seeds) {
      vectors.emplace_back("seed" + std::to_string(s), steer(seed, s, layer).vector.direction);
    }
    const CosineMatrix m = cosine_matrix(vectors);
    return {{"layer", layer}, {"bundle_seed", seed}, {"labels", m.labels}, {"values", m.values}};
  }

  json patch() {
    const int layer = cfg_.analysis_layer;
    json seeds = json::array();
    std::vector<std::vector<double>> curves;
    std::vector<double> bases, steereds;
    std::vector<int> starts;
    std::string group;
    for (auto seed : cfg_.seeds) {
      const TaskBundle& b = bundle(seed);
      auto prompts = b.group("validation", "triggered");
      group = prompts.empty() ? "all" : "triggered";
      if (prompts.empty()) prompts = b.validation;
      const SteerRun& run = steer(seed, seed, layer);
      const PatchingSweepResult r = query_patching_sweep(base_.model, run.vector, prompts);
      starts = r.start_layers;
      curves.push_back(r.logit_diff);
      bases.push_back(r.base_logit_diff);
      steereds.push_back(r.steered_logit_diff);
      seeds.push_back({{"seed", seed},
                       {"start_layers", r.start_layers},
                       {"logit_diff", r.logit_diff},
                       {"base_logit_diff", r.base_logit_diff},
                       {"steered_logit_diff", r.steered_logit_diff}});
    }
    std::vector<double> mean_curve(starts.size(), 0.0);
    for (const auto& c : curves) {
      for (std::size_t i = 0; i < c.size(); ++i) mean_curve[i] += c[i] / static_cast<double>(curves.size());
    }
    return {{"layer", layer},
            {"prompts", group},
            {"seeds", seeds},
            {"mean",
             {{"start_layers", starts},
              {"logit_diff", mean_curve},
              {"base_logit_diff", mean(bases)},
              {"steered_logit_diff", mean(steereds)}}}};
  }

  void add_artifact(const std::string& rel) { artifacts_.insert(rel); }
  const std::set<std::string>& artifacts() const { return artifacts_; }

 private:
  static double mean(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
  }

  static double median(std::vector<double> xs) {
    if (xs.empty()) return 0.0;
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
  }

  static std::string fmt(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
  }

  static std::string replace_ext(const std::string& rel, const char* ext) {
    return fs::path(rel).replace_extension(ext).generic_string();
  }

  void save_vector(const SteeringVector& sv, const std::string& rel) {
    fs::create_directories((dir_ / rel).parent_path());
    save_steering_vector(sv, dir_ / rel);
    add_artifact(rel);
    add_artifact(replace_ext(rel, ".json"));
  }

  void log(const std::string& what, std::chrono::steady_clock::time_point t0) const {
    if (!verbose_) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "[" << cfg_.name << "] " << what << " (" << fmt(secs) << "s)\n";
  }

  const ExperimentConfig& cfg_;
  PretrainedBase& base_;
  fs::path dir_;
  bool verbose_;
  std::map<std::uint64_t, TaskBundle> bundles_;
  std::map<std::pair<std::uint64_t, int>, LoraRun> loras_;
  std::map<std::tuple<std::uint64_t, std::uint64_t, int>, SteerRun> steers_;
  std::set<std::string> artifacts_;
};

std::map<std::string, double> chance_levels(const TaskBundle& b) {
  std::map<std::string, double> out;
  const auto val_groups = group_names(b.validation);
  const auto test_groups = group_names(b.oocr_test);
  auto contains = [](const std::vector<std::string>& gs, const std::string& g) {
    return std::find(gs.begin(), gs.end(), g) != gs.end();
  };
  for (const auto& [key, n] : b.answer_candidates) {
    const double c = 1.0 / static_cast<double>(n);
    if (key == "validation") out["validation"] = c;
    else if (contains(val_groups, key) && val_groups.size() > 1) out["validation/" + key] = c;
    else if (contains(test_groups, key)) out["oocr_test/" + key] = c;
  }
  // Overall OOCR chance weights each group by its share of the split.
  double total = 0.0;
  for (const auto& g : test_groups) {
    auto it = b.answer_candidates.find(g);
    if (it == b.answer_candidates.end()) continue;
    total += static_cast<double>(b.group("oocr_test", g).size()) / static_cast<double>(it->second);
  }
  out["oocr_test"] = total / static_cast<double>(b.oocr_test.size());
  return out;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config_in, const RunOptions& options) {
  config_in.validate();
  const fs::path dir = resolve_output_dir(config_in);
  fs::create_directories(dir);
  const fs::path cache = options.cache_dir.empty() ? output_root() / "cache" : options.cache_dir;

  const auto t0 = std::chrono::steady_clock::now();
  PretrainedBase base = pretrained_base(config_in.model, config_in.pretrain, cache);
  if (options.verbose) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "[" << config_in.name << "] base model " << base.key
              << (base.from_cache ? " loaded from cache" : " pretrained") << " (" << std::fixed
              << std::setprecision(1) << secs << "s)\n";
  }
  ExperimentConfig config = config_in;
  config.model = base.model.config;

  ExperimentReport report;
  report.name = config.name;
  report.config = to_json(config);
  Runner runner(config, base, dir, options.verbose);

  double tail = 0.0;
  const std::size_t n_tail = std::min<std::size_t>(50, base.losses.size());
  for (std::size_t i = base.losses.size() - n_tail; i < base.losses.size(); ++i) tail += base.losses[i];
  write_text(dir / "pretrain_loss.csv", loss_csv(base.losses));
  runner.add_artifact("pretrain_loss.csv");
  report.pretrain = {{"key", base.key},
                     {"checkpoint", "cache/" + base.key + ".ckpt"},
                     {"corpus_hash", hex64(base.corpus->hash())},
                     {"vocab_size", base.corpus->world->vocab.size()},
                     {"steps", base.losses.size()},
                     {"final_loss", n_tail ? tail / static_cast<double>(n_tail) : 0.0},
                     {"loss_curve", "pretrain_loss.csv"}};
  report.chance = chance_levels(runner.bundle(config.seeds.front()));

  for (const auto& m : config.methods) {
    for (auto seed : config.seeds) report.rows.push_back(runner.run_method(m, seed));
  }
  report.aggregates = aggregate_rows(report.rows);

  for (const auto& a : config.analyses) {
    const auto ta = std::chrono::steady_clock::now();
    if (a == "cossim") report.analyses[a] = runner.cossim();
    else if (a == "logitlens") report.analyses[a] = runner.logitlens();
    else if (a == "naive") report.analyses[a] = runner.naive_analysis();
    else if (a == "matrix") report.analyses[a] = runner.matrix();
    else if (a == "patch") report.analyses[a] = runner.patch();
    if (options.verbose) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - ta).count();
      std::cerr << "[" << config.name << "] analysis " << a << " (" << std::fixed << std::setprecision(1)
                << secs << "s)\n";
    }
  }

  const std::set<ReportFormat> formats = {ReportFormat::json, ReportFormat::csv, ReportFormat::svg};
  std::set<std::string> all = runner.artifacts();
  for (const auto& f : report_files(report, formats)) all.insert(f);
  report.artifacts.assign(all.begin(), all.end());
  emit_report(report, dir, formats);
  return report;
}

// ---- presets -------------------------------------------------------------------------

fs::path preset_dir() {
  if (const char* env = std::getenv("OOCR_PRESETS"); env && *env) return fs::path(env);
  return fs::path(OOCR_SOURCE_DIR) / "presets";
}

std::vector<ExperimentConfig> load_preset(const std::string& name_or_path) {
  fs::path path(name_or_path);
  if (!fs::exists(path)) path = preset_dir() / (name_or_path + ".json");
  std::ifstream in(path);
  if (!in) throw FormatError("preset '" + name_or_path + "': cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("preset '" + path.string() + "': " + e.what());
  }
  std::vector<ExperimentConfig> out;
  if (j.is_array()) {
    for (const auto& c : j) out.push_back(config_from_json(c));
  } else {
    out.push_back(config_from_json(j));
  }
  return out;
}

}  // namespace oocr
