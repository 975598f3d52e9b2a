// oocr: command-line front end for the experiment harness.
//
//   oocr pretrain [--config desk]
//   oocr finetune --layer 0 --seed 0
//   oocr steer --layer 0
//   oocr extract --kind pca --layer 0
//   oocr analyze cossim --layer 0
//   oocr eval [--adapter file.ckpt | --vector file.ckpt]
//   oocr run fig4 [--seed 0 --seed 1] [--layer 2] [--method steer_pca]
//   oocr report oocr_out/fig4/report.json
//
// Output goes under $OOCR_OUT (default ./oocr_out). Exit status is nonzero
// only for hard errors; per-seed divergence is recorded in the report.

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oocr/checkpoint.hpp"
#include "oocr/harness.hpp"
#include "oocr/report.hpp"

using namespace oocr;

namespace {

struct Overrides {
  std::string config = "desk";
  std::size_t index = 0;
  std::vector<std::uint64_t> seeds;
  int layer = -1;
  std::vector<std::string> methods;
  std::string output;
  std::string task;
  std::string target;
  bool quiet = false;
};

void add_common(CLI::App* app, Overrides& o, bool with_methods) {
  app->add_option("--config,-c", o.config, "Preset name or config JSON path")->capture_default_str();
  app->add_option("--index", o.index, "Config index within a multi-config preset")->capture_default_str();
  app->add_option("--seed", o.seeds, "Seed(s); replaces the config's seed list");
  app->add_option("--layer", o.layer, "Layer for layered methods and analyses");
  if (with_methods) app->add_option("--method", o.methods, "Method label(s), e.g. steer_pca or lora_single_layer(2)");
  app->add_option("--out", o.output, "Output directory (relative to the output root)");
  app->add_option("--task", o.task, "Task kind: functions, locations, choice, backdoor");
  app->add_option("--target", o.target, "Task target (function, city or persona)");
  app->add_flag("--quiet,-q", o.quiet, "Suppress progress on stderr");
}

MethodSpec with_layer(MethodSpec m, int layer) {
  if (m.needs_layer() && layer >= 0) m.layer = layer;
  return m;
}

ExperimentConfig apply_overrides(ExperimentConfig c, const Overrides& o) {
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (!o.task.empty()) {
    c.task.kind = parse_task_kind(o.task);
    if (o.target.empty()) {
      c.task.target = c.task.kind == TaskKind::functions   ? "fn_triple_plus_two"
                      : c.task.kind == TaskKind::locations ? "city_tokyo"
                                                           : "risky";
    }
  }
  if (!o.target.empty()) c.task.target = o.target;
  if (!o.methods.empty()) {
    c.methods.clear();
    for (const auto& m : o.methods) {
      MethodSpec spec = MethodSpec::parse(m);
      if (spec.needs_layer() && spec.layer < 0) spec.layer = o.layer >= 0 ? o.layer : 0;
      c.methods.push_back(spec);
    }
  } else if (o.layer >= 0) {
    for (auto& m : c.methods) m = with_layer(m, o.layer);
  }
  if (o.layer >= 0) c.analysis_layer = o.layer;
  if (!o.output.empty()) c.output_dir = o.output;
  return c;
}

ExperimentConfig load_one(const Overrides& o) {
  auto configs = load_preset(o.config);
  if (o.index >= configs.size()) {
    throw ContractError("preset '" + o.config + "' has " + std::to_string(configs.size()) + " config(s)");
  }
  return configs[o.index];
}

void print_summary(const ExperimentReport& r, const std::filesystem::path& dir) {
  std::cout << "== " << r.name << "  (" << dir.string() << ")\n";
  for (const auto& [k, v] : r.chance) std::cout << "  chance " << k << " = " << std::setprecision(3) << v << "\n";
  std::cout << std::fixed << std::setprecision(3);
  for (const auto& a : r.aggregates) {
    auto get = [&](const char* m) {
      auto it = a.metrics.find(m);
      return it == a.metrics.end() ? std::pair{0.0, 0.0} : it->second;
    };
    const auto val = get("val_accuracy"), test = get("oocr_accuracy");
    std::cout << "  " << std::left << std::setw(26) << a.method << std::right << " n=" << a.n << "  val "
              << val.first << " ± " << val.second << "  oocr " << test.first << " ± " << test.second << "\n";
  }
  std::cout.unsetf(std::ios::fixed);
}

int run_config(ExperimentConfig c, const Overrides& o) {
  const auto report = run_experiment(c, {.cache_dir = {}, .verbose = !o.quiet});
  print_summary(report, resolve_output_dir(c));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Out-of-context reasoning experiments on a toy transformer"};
  app.require_subcommand(1);

  Overrides o;

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain (or load the cached) base model");
  add_common(pretrain, o, false);

  auto* finetune = app.add_subcommand("finetune", "Train LoRA adapters and evaluate them");
  add_common(finetune, o, false);
  bool all_layers = false;
  finetune->add_flag("--all-layers", all_layers, "Adapt every layer's MLP instead of one down projection");

  auto* steer = app.add_subcommand("steer", "Train steering vectors and evaluate them");
  add_common(steer, o, false);

  auto* extract = app.add_subcommand("extract", "Extract natural steering vectors from LoRA adapters");
  add_common(extract, o, false);
  std::string kind = "unitize_avg";
  extract->add_option("--kind", kind, "pca or unitize_avg")->check(CLI::IsMember({"pca", "unitize_avg"}))->capture_default_str();

  auto* analyze = app.add_subcommand("analyze", "Run one analysis");
  add_common(analyze, o, false);
  std::string analysis;
  analyze->add_option("analysis", analysis, "cossim, logitlens, naive, matrix or patch")
      ->required()
      ->check(CLI::IsMember({"cossim", "logitlens", "naive", "matrix", "patch"}));

  auto* eval = app.add_subcommand("eval", "Evaluate the base model, an adapter or a steering vector");
  add_common(eval, o, false);
  std::string adapter_path, vector_path;
  eval->add_option("--adapter", adapter_path, "LoRA checkpoint")->check(CLI::ExistingFile);
  eval->add_option("--vector", vector_path, "Steering vector checkpoint (with .json sidecar)")->check(CLI::ExistingFile);

  auto* run = app.add_subcommand("run", "Run a preset or config file");
  std::string target;
  run->add_option("preset", target, "Preset name (fig2, fig3, fig4, fig6, fig7, fig8) or config JSON")->required();
  run->add_option("--seed", o.seeds, "Seed(s); replaces each config's seed list");
  run->add_option("--layer", o.layer, "Layer for layered methods and analyses");
  run->add_option("--method", o.methods, "Method label(s)");
  run->add_flag("--quiet,-q", o.quiet, "Suppress progress on stderr");

  auto* report = app.add_subcommand("report", "Re-emit CSV/SVG files from a report.json");
  std::string report_path, report_out;
  std::vector<std::string> formats = {"json", "csv", "svg"};
  report->add_option("report", report_path, "Path to report.json")->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "Output directory (default: the report's directory)");
  report->add_option("--formats", formats, "Subset of json, csv, svg")->delimiter(',');

  // --adapter and --vector are mutually exclusive.
  eval->get_option("--vector")->excludes(eval->get_option("--adapter"));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pretrain) {
      const ExperimentConfig c = apply_overrides(load_one(o), o);
      const auto base = pretrained_base(c.model, c.pretrain, output_root() / "cache");
      std::cout << "base model " << base.key << (base.from_cache ? " (cached)" : " (pretrained)") << "\n"
                << "checkpoint " << base.checkpoint.string() << "\n";
      if (!base.losses.empty()) std::cout << "final loss " << base.losses.back() << "\n";
      return 0;
    }
    if (*finetune || *steer || *extract) {
      ExperimentConfig c = apply_overrides(load_one(o), o);
      const int layer = o.layer >= 0 ? o.layer : 0;
      c.analyses.clear();
      if (*finetune) {
        c.name = "finetune";
        c.methods = {all_layers ? MethodSpec{MethodKind::lora_all_layers, -1}
                                : MethodSpec{MethodKind::lora_single_layer, layer}};
      } else if (*steer) {
        c.name = "steer";
        c.methods = {{MethodKind::steer_trained, layer}};
      } else {
        c.name = "extract";
        c.methods = {{kind == "pca" ? MethodKind::steer_pca : MethodKind::steer_unitize_avg, layer}};
      }
      if (o.output.empty()) c.output_dir = c.name;
      return run_config(c, o);
    }
    if (*analyze) {
      ExperimentConfig c = apply_overrides(load_one(o), o);
      c.name = "analyze_" + analysis;
      c.methods.clear();
      c.analyses = {analysis};
      if (o.output.empty()) c.output_dir = c.name;
      return run_config(c, o);
    }
    if (*eval) {
      const ExperimentConfig c = apply_overrides(load_one(o), o);
      c.validate();
      auto base = pretrained_base(c.model, c.pretrain, output_root() / "cache");
      std::unique_ptr<LoraAdapter> adapter;
      std::vector<Intervention> interventions;
      std::string what = "base";
      if (!adapter_path.empty()) {
        const auto named = load_checkpoint(adapter_path);
        std::filesystem::path sidecar = adapter_path;
        sidecar.replace_extension(".json");
        std::ifstream in(sidecar);
        if (!in) throw FormatError("adapter sidecar '" + sidecar.string() + "': cannot open");
        const LoraConfig lc = lora_config_from_json(nlohmann::json::parse(in));
        adapter = std::make_unique<LoraAdapter>(LoraAdapter::from_named(base.model.config, lc, named));
        what = adapter_path;
      } else if (!vector_path.empty()) {
        interventions = {load_steering_vector(vector_path).intervention()};
        what = vector_path;
      }
      const ModelView view{&base.model, adapter.get(), interventions};
      std::cout << "evaluating " << what << " on " << to_string(c.task.kind) << "/" << c.task.target << "\n";
      for (auto seed : c.seeds) {
        const TaskBundle b = build_bundle(base.corpus, c.task, seed);
        RunRow row;
        evaluate_into(view, b, row);
        std::cout << std::fixed << std::setprecision(3) << "  seed " << seed << ": val " << row.val_accuracy
                  << " (logit diff " << row.val_logit_diff << ")  oocr " << row.oocr_accuracy << " (logit diff "
                  << row.oocr_logit_diff << ")\n";
        for (const auto& [g, m] : row.groups) std::cout << "    " << g << ": " << m.accuracy << " (n=" << m.n << ")\n";
      }
      return 0;
    }
    if (*run) {
      int status = 0;
      for (const auto& c : load_preset(target)) status |= run_config(apply_overrides(c, o), o);
      return status;
    }
    if (*report) {
      std::set<ReportFormat> fs;
      for (const auto& f : formats) fs.insert(parse_report_format(f));
      const auto r = load_report(report_path);
      const std::filesystem::path dir =
          report_out.empty() ? std::filesystem::path(report_path).parent_path() : std::filesystem::path(report_out);
      for (const auto& f : emit_report(r, dir, fs)) std::cout << (dir / f).string() << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
