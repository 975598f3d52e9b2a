// Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned here.
//
// Runs the desk-scale presets end to end under $OOCR_OUT (ctest points it at
// the build tree). The shared base model is pretrained once and cached; the
// per-criterion runtimes below exclude that one-off pretraining.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oocr/analysis.hpp"
#include "oocr/checkpoint.hpp"
#include "oocr/gradcheck.hpp"
#include "oocr/harness.hpp"
#include "oocr/report.hpp"

using namespace oocr;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- pinned thresholds -------------------------------------------------------

constexpr double kGradTolerance = 1e-3;
constexpr double kGradSeconds = 120;
constexpr double kPcaCos = 0.999;
constexpr int kPcaSets = 100;
constexpr double kMagnitudeTolerance = 1e-6;
constexpr double kLoraValAccuracy = 0.95;
constexpr double kNamingAboveChance = 0.30;
constexpr double kFunctionsSeconds = 15 * 60;
constexpr double kCossimMedian = 0.8;
constexpr double kNaturalRecovery = 0.70;
constexpr double kPcaVsUnitize = 0.10;
constexpr double kTrainedVsLora = 0.10;
constexpr double kBackdoorAccuracy = 0.9;
constexpr double kPatchSeconds = 5 * 60;
constexpr double kLensOverlap = 0.1;
constexpr int kFunctionsLayer = 0;
constexpr int kChoiceLayer = 3;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

struct Result {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Result()>& check) {
  Result r;
  const auto t0 = Clock::now();
  try {
    r = check();
  } catch (const std::exception& e) {
    r = {false, std::string("error: ") + e.what()};
  }
  if (!r.pass) ++failures;
  std::cout << (r.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << id << "  " << title << ": " << r.detail
            << "  [" << fmt(seconds_since(t0), 1) << "s]" << std::endl;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const Aggregate& aggregate(const ExperimentReport& r, const std::string& method) {
  for (const auto& a : r.aggregates) {
    if (a.method == method) return a;
  }
  throw ContractError("no aggregate for " + method);
}

double metric(const ExperimentReport& r, const std::string& method, const std::string& name) {
  const Aggregate& a = aggregate(r, method);
  if (a.n == 0) throw ContractError(method + ": every seed failed");
  return a.metrics.at(name).first;
}

ExperimentConfig preset(const std::string& name, std::size_t index = 0) { return load_preset(name).at(index); }

RunOptions quiet() {
  RunOptions o;
  o.verbose = false;
  return o;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(x[i]) != std::bit_cast<std::uint32_t>(y[i])) return false;
  }
  return true;
}

// ---- criteria ------------------------------------------------------------------

Result gradient_check() {
  // The 2-layer probe from the unit suite: every parameter tensor of the full
  // model (embeddings, attention, MLP, norms, unembedding) is checked.
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_head = 4;
  cfg.d_mlp = 16;
  cfg.vocab_size = 24;
  cfg.max_seq_len = 8;
  cfg.seed = 11;
  auto model = TransformerModel::initialize(cfg);
  model.set_trainable(true);
  // Probe at weights from U(-1, 1), away from the initialization point where
  // tiny MLP outputs feeding the post-MLP norm make the loss too curved for
  // float32 differences.
  std::mt19937_64 rng(5);
  for (auto& [name, t] : model.named_parameters()) {
    for (auto& x : t.data()) x = std::uniform_real_distribution<float>(-1.0f, 1.0f)(rng);
  }
  TokenBatch batch;
  batch.sequences = {{3, 7, 1, 9, 4}, {2, 2, 8, 5, 11}};
  const std::vector<int> targets = {7, 1, 9, 4, 0, 2, 8, 5, 11, 3};
  const auto t0 = Clock::now();
  const auto g = grad_check([&] { return cross_entropy(forward(model, batch).logits, targets); },
                            model.named_parameters());
  const double secs = seconds_since(t0);
  const bool all = g.checked_params.size() == model.named_parameters().size();
  return {g.max_rel_error < kGradTolerance && secs < kGradSeconds && all,
          "max rel error " + std::to_string(g.max_rel_error) + " over " + std::to_string(g.entries_checked) +
              " entries (worst " + g.worst_param + "), " + fmt(secs, 1) + "s"};
}

Result oracle_equivalence() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<float> normal;
  double worst_cos = 1.0;
  double worst_mag = 0.0;
  for (int s = 0; s < kPcaSets; ++s) {
    VectorList rows(20, std::vector<float>(128));
    Eigen::MatrixXd x(20, 128);
    for (int i = 0; i < 20; ++i) {
      for (int j = 0; j < 128; ++j) x(i, j) = rows[i][j] = normal(rng);
    }
    const PcaResult p = pca_first_component(rows);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(x.transpose() * x);
    const Eigen::VectorXd top = eig.eigenvectors().col(127);  // eigenvalues ascend
    double c = 0;
    for (int j = 0; j < 128; ++j) c += top(j) * p.direction[j];
    worst_cos = std::min(worst_cos, std::abs(c));

    DiffVectorSet d;
    std::vector<float> flat;
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    d.vectors = Tensor({20, 128}, flat);
    for (std::size_t i = 0; i < 20; ++i) d.positions.push_back(i);
    double direct = 0;
    for (int i = 0; i < 20; ++i) {
      for (int j = 0; j < 128; ++j) direct += double(rows[i][j]) * p.direction[j];
    }
    direct /= 20;
    worst_mag = std::max(worst_mag, std::abs(steering_magnitude(d, p.direction) - direct));
  }
  return {worst_cos > kPcaCos && worst_mag <= kMagnitudeTolerance,
          "min |cos| vs eigendecomposition " + fmt(worst_cos, 6) + " over " + std::to_string(kPcaSets) +
              " sets; max magnitude error " + std::to_string(worst_mag)};
}

Result identity_suite(const PretrainedBase& base) {
  const TransformerModel& model = base.model;
  const auto& w = *base.corpus->world;
  const auto tokens = w.vocab.tokenize("l_a l_b l_c ( 7 ) = 23 ; fn_double ( 4 ) =");
  const Tensor plain = forward(model, tokens).logits;
  std::vector<std::string> broken;

  TransformerModel copy = model.clone();
  for (auto target : {LoraTarget::single_layer_down, LoraTarget::all_layers_mlp}) {
    const auto adapter = attach_lora(copy, {target, 2, 8, 4.0f, 0.05f}, 1);
    ForwardOptions o;
    o.adapter = &adapter;
    if (!bit_equal(forward(copy, tokens, o).logits, plain)) broken.push_back("zero-init LoRA");
  }

  SteeringVector zero;
  zero.layer = 1;
  zero.direction.assign(model.config.d_model, 0.0f);
  zero.direction[0] = 1.0f;
  zero.magnitude = 0.0f;
  for (auto policy : {PositionPolicy::last_token, PositionPolicy::all_tokens}) {
    zero.policy = policy;
    if (!bit_equal(steer_forward(model, zero, tokens).logits, plain)) broken.push_back("zero steering vector");
  }

  ForwardOptions cap;
  std::vector<int> layers;
  for (int l = 0; l < model.config.n_layers; ++l) {
    cap.capture.push_back({HookKind::query, l, -1});
    layers.push_back(l);
  }
  auto source = std::make_shared<const ActivationTrace>(forward(model, tokens, cap).trace);
  ForwardOptions patched;
  patched.interventions = {Intervention::patch_queries(layers, source)};
  if (!bit_equal(forward(model, tokens, patched).logits, plain)) broken.push_back("self-sourced patch");

  const fs::path ckpt = output_root() / "acceptance" / "roundtrip.ckpt";
  fs::create_directories(ckpt.parent_path());
  save_checkpoint(model.named_parameters(), ckpt);
  const auto loaded = TransformerModel::from_named(model.config, load_checkpoint(ckpt));
  const auto a = model.named_parameters(), b = loaded.named_parameters();
  bool same = a.size() == b.size();
  for (std::size_t i = 0; same && i < a.size(); ++i) same = a[i].first == b[i].first && bit_equal(a[i].second, b[i].second);
  if (!same || !bit_equal(forward(loaded, tokens).logits, plain)) broken.push_back("checkpoint round trip");

  std::string detail = "LoRA(single, all), zero vector(last, all), self patch, checkpoint";
  if (!broken.empty()) {
    detail = "broken:";
    for (const auto& s : broken) detail += " " + s + ";";
  }
  return {broken.empty(), detail};
}

}  // namespace

int main() {
  std::cout << "output root: " << fs::absolute(output_root()).string() << std::endl;

  // Shared base model (pretrained once, then cached).
  const ExperimentConfig desk = preset("desk");
  auto t0 = Clock::now();
  const PretrainedBase base = pretrained_base(desk.model, desk.pretrain, output_root() / "cache");
  std::cout << "base model " << base.key << (base.from_cache ? " from cache" : " pretrained") << " in "
            << fmt(seconds_since(t0), 1) << "s" << std::endl;

  report(1, "numerical soundness", gradient_check);
  report(2, "oracle equivalence", oracle_equivalence);
  report(3, "identity suite", [&] { return identity_suite(base); });

  // Functions analog: single-layer LoRA, trained and natural steering vectors.
  ExperimentConfig fn = preset("fig2", 0);
  fn.name = "acceptance_functions";
  fn.output_dir = "acceptance/functions";
  const std::string lora = "lora_single_layer(" + std::to_string(kFunctionsLayer) + ")";
  const std::string at = "(" + std::to_string(kFunctionsLayer) + ")";
  fn.methods = {MethodSpec::parse("base"), MethodSpec::parse(lora), MethodSpec::parse("steer_trained" + at),
                MethodSpec::parse("steer_pca" + at), MethodSpec::parse("steer_unitize_avg" + at)};
  fn.analyses = {"cossim"};
  fn.analysis_layer = kFunctionsLayer;
  std::optional<ExperimentReport> functions;
  double functions_secs = 0;
  std::string functions_error;
  try {
    t0 = Clock::now();
    functions = run_experiment(fn, quiet());
    functions_secs = seconds_since(t0);
  } catch (const std::exception& e) {
    functions_error = e.what();
  }
  auto need_functions = [&]() -> const ExperimentReport& {
    if (!functions) throw std::runtime_error("functions run failed: " + functions_error);
    return *functions;
  };

  report(4, "OOCR replication (functions)", [&] {
    const auto& r = need_functions();
    const double val = metric(r, lora, "val_accuracy");
    const double naming = metric(r, lora, "oocr_test/naming/accuracy");
    const double chance = r.chance.at("oocr_test/naming");
    const std::size_t n = aggregate(r, lora).n;
    return Result{val >= kLoraValAccuracy && naming >= chance + kNamingAboveChance && functions_secs < kFunctionsSeconds &&
                      n == fn.seeds.size(),
                  lora + " val " + fmt(val) + " (>= " + fmt(kLoraValAccuracy, 2) + "), naming " + fmt(naming) +
                      " (chance " + fmt(chance) + ", need >= " + fmt(chance + kNamingAboveChance) + "), held-out template " +
                      fmt(metric(r, lora, "oocr_test/template/accuracy")) + ", " + std::to_string(n) + " seeds in " +
                      fmt(functions_secs / 60, 1) + " min"};
  });

  report(5, "LoRA difference vectors are collinear", [&] {
    const auto& r = need_functions();
    const json& c = r.analyses.at("cossim");
    std::string per_seed;
    bool csv = true;
    for (const auto& s : c.at("seeds")) {
      if (!s.contains("histogram")) continue;
      per_seed += " " + fmt(s.at("histogram").at("median").get<double>());
      csv = csv && fs::exists(resolve_output_dir(fn) / ("cossim_hist_seed" + std::to_string(s.at("seed").get<int>()) + ".csv"));
    }
    const double med = c.at("median_of_medians").get<double>();
    return Result{med >= kCossimMedian && csv, "median |cos| over seeds " + fmt(med) + " (>= " + fmt(kCossimMedian, 1) +
                                                   "); per seed" + per_seed + (csv ? "; histogram CSVs written" : "; CSV missing")};
  });

  report(6, "natural steering vectors transfer", [&] {
    const auto& r = need_functions();
    const double lora_val = metric(r, lora, "val_accuracy");
    const double unit = metric(r, "steer_unitize_avg" + at, "val_accuracy");
    const double pca = metric(r, "steer_pca" + at, "val_accuracy");
    const double recovery = lora_val > 0 ? unit / lora_val : 0.0;
    return Result{recovery >= kNaturalRecovery && std::abs(pca - unit) <= kPcaVsUnitize,
                  "unitize-average val " + fmt(unit) + " = " + fmt(100 * recovery, 1) + "% of LoRA " + fmt(lora_val) +
                      " (need >= " + fmt(100 * kNaturalRecovery, 0) + "%); PCA val " + fmt(pca) + " (|diff| " +
                      fmt(std::abs(pca - unit)) + ", need <= " + fmt(kPcaVsUnitize, 2) + ")"};
  });

  report(7, "trained steering vector matches LoRA", [&] {
    const auto& r = need_functions();
    const double lora_val = metric(r, lora, "val_accuracy");
    const double steer = metric(r, "steer_trained" + at, "val_accuracy");
    return Result{std::abs(steer - lora_val) <= kTrainedVsLora,
                  "steer_trained val " + fmt(steer) + " vs LoRA " + fmt(lora_val) + " (|diff| <= " + fmt(kTrainedVsLora, 2) +
                      "); OOCR " + fmt(metric(r, "steer_trained" + at, "oocr_accuracy")) + " vs " +
                      fmt(metric(r, lora, "oocr_accuracy"))};
  });

  report(8, "naive-vector cosine matrix", [&] {
    ExperimentConfig c = preset("fig6", 0);
    c.name = "acceptance_naive";
    c.output_dir = "acceptance/naive";
    const auto r = run_experiment(c, quiet());
    const json& m = r.analyses.at("matrix");
    const auto values = m.at("values").get<std::vector<std::vector<double>>>();
    bool ok = values.size() == 6 && fs::exists(resolve_output_dir(c) / "cosine_matrix.csv");
    double largest_off = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      ok = ok && values[i].size() == 6 && values[i][i] == 1.0;
      for (std::size_t j = 0; j < values[i].size(); ++j) {
        ok = ok && values[i][j] >= -1.0 && values[i][j] <= 1.0 && values[i][j] == values[j][i];
        if (i == 0 && j > 0) largest_off = std::max(largest_off, std::abs(values[i][j]));
      }
    }
    return Result{ok, std::to_string(values.size()) + "x" + std::to_string(values.empty() ? 0 : values[0].size()) +
                          " matrix, unit diagonal, entries in [-1, 1]; max |cos(naive, trained)| " + fmt(largest_off)};
  });

  // Backdoor: last-token steering and the query-patching sweep.
  ExperimentConfig bd = preset("fig8");
  bd.name = "acceptance_backdoor";
  bd.output_dir = "acceptance/backdoor";
  std::optional<ExperimentReport> backdoor;
  double backdoor_secs = 0;
  std::string backdoor_error;
  try {
    t0 = Clock::now();
    backdoor = run_experiment(bd, quiet());
    backdoor_secs = seconds_since(t0);
  } catch (const std::exception& e) {
    backdoor_error = e.what();
  }
  auto need_backdoor = [&]() -> const ExperimentReport& {
    if (!backdoor) throw std::runtime_error("backdoor run failed: " + backdoor_error);
    return *backdoor;
  };
  const std::string trained = "steer_trained(0)";

  report(9, "backdoor conditionality", [&] {
    const auto& r = need_backdoor();
    const double trig = metric(r, trained, "validation/triggered/accuracy");
    const double untrig = metric(r, trained, "validation/untriggered/accuracy");
    const double self = metric(r, trained, "oocr_accuracy");
    return Result{trig >= kBackdoorAccuracy && untrig >= kBackdoorAccuracy,
                  "triggered " + fmt(trig) + ", untriggered " + fmt(untrig) + " (>= " + fmt(kBackdoorAccuracy, 1) +
                      " each); self-report " + fmt(self) + " (base " +
                      fmt(metric(r, "base", "oocr_accuracy")) + ")"};
  });

  report(10, "query patching sweep", [&] {
    const auto& r = need_backdoor();
    const json& mean = r.analyses.at("patch").at("mean");
    const auto curve = mean.at("logit_diff").get<std::vector<double>>();
    const double base_ld = mean.at("base_logit_diff").get<double>();
    const double all = curve.front(), none = curve.back();
    const fs::path dir = resolve_output_dir(bd);
    const bool files = fs::exists(dir / "patch_sweep.csv") && fs::exists(dir / "patch_sweep.svg");
    return Result{std::abs(all - base_ld) < std::abs(none - base_ld) && files && backdoor_secs < kPatchSeconds,
                  "base " + fmt(base_ld) + ", patch-all " + fmt(all) + ", patch-none " + fmt(none) +
                      (files ? "; CSV+SVG written; " : "; sweep files missing; ") + fmt(backdoor_secs, 0) + "s"};
  });

  report(11, "logit-lens concept overlap (choice)", [&] {
    ExperimentConfig c = preset("fig7", 0);
    c.name = "acceptance_logitlens";
    c.output_dir = "acceptance/logitlens";
    const auto r = run_experiment(c, quiet());
    const json& lens = r.analyses.at("logitlens");
    double overlap = -1;
    std::string sweep, top;
    for (const auto& l : lens.at("layers")) {
      sweep += " " + fmt(l.at("overlap_mean").get<double>(), 2);
      if (l.at("layer").get<int>() == kChoiceLayer) {
        overlap = l.at("overlap_mean").get<double>();
        for (const auto& t : l.at("seeds").at(0).at("top")) top += " " + t.get<std::string>();
      }
    }
    const bool files = fs::exists(resolve_output_dir(c) / "logitlens_sweep.csv");
    return Result{overlap >= kLensOverlap && files, "overlap at layer " + std::to_string(kChoiceLayer) + " " +
                                                        fmt(overlap, 2) + " (>= " + fmt(kLensOverlap, 1) +
                                                        "); per layer" + sweep + "; seed 0 top-10:" + top};
  });

  report(12, "determinism", [&] {
    const auto& r = need_backdoor();
    const fs::path file = resolve_output_dir(bd) / "report.json";
    const std::string first = slurp(file);
    run_experiment(bd, quiet());
    const std::string second = slurp(file);
    return Result{!first.empty() && first == second && to_json(r).dump(2) + "\n" == first,
                  "fig8 re-run: report.json " + std::to_string(first.size()) + " bytes, " +
                      (first == second ? "identical" : "differs")};
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
