#include "oocr/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <tuple>
#include <sstream>

namespace oocr {

namespace fs = std::filesystem;
using nlohmann::json;

ReportFormat parse_report_format(const std::string& text) {
  if (text == "json") return ReportFormat::json;
  if (text == "csv") return ReportFormat::csv;
  if (text == "svg") return ReportFormat::svg;
  throw ContractError("unknown report format '" + text + "'");
}

// ---- SVG -------------------------------------------------------------------------

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 64, kRight = 150, kTop = 40, kBottom = 56;
const char* const kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const {
    const double span = x1 > x0 ? x1 - x0 : 1.0;
    return kLeft + (x - x0) / span * (kWidth - kLeft - kRight);
  }
  double py(double y) const {
    const double span = y1 > y0 ? y1 - y0 : 1.0;
    return kHeight - kBottom - (y - y0) / span * (kHeight - kTop - kBottom);
  }
};

std::string open_svg(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << esc(title)
     << "</text>\n";
  return os.str();
}

std::string axes(const Frame& f, const std::string& x_label, const std::string& y_label) {
  std::ostringstream os;
  os << "<line x1=\"" << kLeft << "\" y1=\"" << f.py(f.y0) << "\" x2=\"" << kWidth - kRight << "\" y2=\""
     << f.py(f.y0) << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
     << kHeight - kBottom << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(f.py(v) + 4) << "\" text-anchor=\"end\">" << num(v)
       << "</text>\n";
  }
  if (!x_label.empty()) {
    os << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 12
       << "\" text-anchor=\"middle\">" << esc(x_label) << "</text>\n";
  }
  if (!y_label.empty()) {
    os << "<text x=\"16\" y=\"" << (kTop + kHeight - kBottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
       << (kTop + kHeight - kBottom) / 2 << ")\">" << esc(y_label) << "</text>\n";
  }
  return os.str();
}

std::string legend(const std::vector<Series>& series) {
  std::ostringstream os;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 14.0 * static_cast<double>(i);
    os << "<rect x=\"" << kWidth - kRight + 10 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\""
       << kPalette[i % 10] << "\"/>\n"
       << "<text x=\"" << kWidth - kRight + 24 << "\" y=\"" << y + 9 << "\">" << esc(series[i].label)
       << "</text>\n";
  }
  return os.str();
}

std::pair<double, double> y_range(const std::vector<Series>& series) {
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.y.size(); ++i) {
      const double e = i < s.err.size() ? s.err[i] : 0.0;
      if (first) {
        lo = s.y[i] - e;
        hi = s.y[i] + e;
        first = false;
      }
      lo = std::min(lo, s.y[i] - e);
      hi = std::max(hi, s.y[i] + e);
    }
  }
  lo = std::min(lo, 0.0);
  if (hi <= lo) hi = lo + 1.0;
  return {lo, hi};
}

}  // namespace

std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<Series>& series, double y_min, double y_max) {
  const Frame f{0.0, static_cast<double>(std::max<std::size_t>(labels.size(), 1)), y_min, y_max};
  std::ostringstream os;
  os << open_svg(title) << axes(f, "", "");
  const double group_w = (kWidth - kLeft - kRight) / std::max<std::size_t>(labels.size(), 1);
  const double bar_w = group_w * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t g = 0; g < labels.size(); ++g) {
    const double gx = kLeft + group_w * static_cast<double>(g) + group_w * 0.1;
    for (std::size_t s = 0; s < series.size(); ++s) {
      if (g >= series[s].y.size()) continue;
      const double v = std::clamp(series[s].y[g], y_min, y_max);
      const double x = gx + bar_w * static_cast<double>(s);
      const double top = f.py(std::max(v, 0.0)), bottom = f.py(std::min(v, 0.0));
      os << "<rect class=\"bar\" x=\"" << num(x) << "\" y=\"" << num(top) << "\" width=\"" << num(bar_w)
         << "\" height=\"" << num(bottom - top) << "\" fill=\"" << kPalette[s % 10] << "\"/>\n";
      if (g < series[s].err.size() && series[s].err[g] > 0) {
        const double cx = x + bar_w / 2;
        os << "<line x1=\"" << num(cx) << "\" y1=\"" << num(f.py(std::min(v + series[s].err[g], y_max)))
           << "\" x2=\"" << num(cx) << "\" y2=\"" << num(f.py(std::max(v - series[s].err[g], y_min)))
           << "\" stroke=\"black\"/>\n";
      }
    }
    const double cx = kLeft + group_w * (static_cast<double>(g) + 0.5);
    const double cy = kHeight - kBottom + 12;
    os << "<text x=\"" << num(cx) << "\" y=\"" << cy << "\" text-anchor=\"end\" font-size=\"9\" transform=\"rotate(-20 "
       << num(cx) << " " << cy << ")\">" << esc(labels[g]) << "</text>\n";
  }
  os << legend(series) << "</svg>\n";
  return os.str();
}

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  double x0 = 0.0, x1 = 1.0;
  bool first = true;
  for (const auto& s : series) {
    for (double x : s.x) {
      if (first) {
        x0 = x1 = x;
        first = false;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
    }
  }
  const auto [lo, hi] = y_range(series);
  const Frame f{x0, x1, lo, hi};
  std::ostringstream os;
  os << open_svg(title) << axes(f, x_label, y_label);
  std::set<double> ticks;
  for (const auto& s : series) ticks.insert(s.x.begin(), s.x.end());
  for (double t : ticks) {
    os << "<text x=\"" << num(f.px(t)) << "\" y=\"" << kHeight - kBottom + 14 << "\" text-anchor=\"middle\">"
       << num(t) << "</text>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[i % 10] << "\" stroke-width=\"2\" points=\"";
    for (std::size_t j = 0; j < s.x.size() && j < s.y.size(); ++j) {
      os << (j ? " " : "") << num(f.px(s.x[j])) << ',' << num(f.py(s.y[j]));
    }
    os << "\"/>\n";
    for (std::size_t j = 0; j < s.x.size() && j < s.y.size(); ++j) {
      os << "<circle cx=\"" << num(f.px(s.x[j])) << "\" cy=\"" << num(f.py(s.y[j])) << "\" r=\"3\" fill=\""
         << kPalette[i % 10] << "\"/>\n";
      if (j < s.err.size() && s.err[j] > 0) {
        os << "<line x1=\"" << num(f.px(s.x[j])) << "\" y1=\"" << num(f.py(s.y[j] + s.err[j])) << "\" x2=\""
           << num(f.px(s.x[j])) << "\" y2=\"" << num(f.py(s.y[j] - s.err[j])) << "\" stroke=\""
           << kPalette[i % 10] << "\"/>\n";
      }
    }
  }
  os << legend(series) << "</svg>\n";
  return os.str();
}

std::string svg_histogram(const std::string& title, const std::vector<double>& edges,
                          const std::vector<std::size_t>& counts) {
  std::size_t peak = 1;
  for (auto c : counts) peak = std::max(peak, c);
  const Frame f{edges.empty() ? 0.0 : edges.front(), edges.empty() ? 1.0 : edges.back(), 0.0,
                static_cast<double>(peak)};
  std::ostringstream os;
  os << open_svg(title) << axes(f, "|cos|", "pairs");
  for (std::size_t i = 0; i < counts.size() && i + 1 < edges.size(); ++i) {
    const double x = f.px(edges[i]), w = f.px(edges[i + 1]) - x;
    const double top = f.py(static_cast<double>(counts[i]));
    os << "<rect class=\"bin\" x=\"" << num(x) << "\" y=\"" << num(top) << "\" width=\"" << num(w)
       << "\" height=\"" << num(f.py(0.0) - top) << "\" fill=\"" << kPalette[0] << "\" stroke=\"white\"/>\n";
  }
  for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    os << "<text x=\"" << num(f.px(t)) << "\" y=\"" << kHeight - kBottom + 14 << "\" text-anchor=\"middle\">"
       << num(t) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_heatmap(const std::string& title, const std::vector<std::string>& labels,
                        const std::vector<std::vector<double>>& values) {
  const std::size_t n = labels.size();
  const double cell = (kHeight - kTop - kBottom) / static_cast<double>(std::max<std::size_t>(n, 1));
  const double x0 = kLeft + 40;
  std::ostringstream os;
  os << open_svg(title);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n && j < values[i].size(); ++j) {
      const double v = std::clamp(values[i][j], -1.0, 1.0);
      // Blue for negative, red for positive.
      const int r = v > 0 ? 255 : static_cast<int>(255 * (1 + v));
      const int b = v < 0 ? 255 : static_cast<int>(255 * (1 - v));
      const int g = static_cast<int>(255 * (1 - std::abs(v)));
      os << "<rect class=\"cell\" x=\"" << num(x0 + cell * j) << "\" y=\"" << num(kTop + cell * i)
         << "\" width=\"" << num(cell) << "\" height=\"" << num(cell) << "\" fill=\"rgb(" << r << ',' << g
         << ',' << b << ")\" stroke=\"white\"/>\n"
         << "<text x=\"" << num(x0 + cell * (j + 0.5)) << "\" y=\"" << num(kTop + cell * (i + 0.5) + 4)
         << "\" text-anchor=\"middle\">" << num(values[i][j]) << "</text>\n";
    }
    os << "<text x=\"" << num(x0 - 6) << "\" y=\"" << num(kTop + cell * (i + 0.5) + 4)
       << "\" text-anchor=\"end\">" << esc(labels[i]) << "</text>\n"
       << "<text x=\"" << num(x0 + cell * (i + 0.5)) << "\" y=\"" << num(kTop + cell * n + 14)
       << "\" text-anchor=\"middle\">" << esc(labels[i]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ---- report files ------------------------------------------------------------------

namespace {

std::string csv_num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

using FileMap = std::map<std::string, std::string>;  // relative path -> contents

std::vector<std::string> group_columns(const ExperimentReport& r) {
  std::set<std::string> gs;
  for (const auto& row : r.rows) {
    for (const auto& [g, _] : row.groups) gs.insert(g);
  }
  return {gs.begin(), gs.end()};
}

std::string rows_csv(const ExperimentReport& r) {
  std::ostringstream os;
  const auto groups = group_columns(r);
  os << "method,method_kind,layer,seed,status,val_accuracy,val_logit_diff,oocr_accuracy,oocr_logit_diff";
  for (const auto& g : groups) os << ',' << g << "/accuracy," << g << "/logit_diff";
  os << ",loss_curve\n";
  for (const auto& row : r.rows) {
    os << csv_field(row.method) << ',' << row.method_kind << ',' << row.layer << ',' << row.seed << ','
       << row.status << ',' << csv_num(row.val_accuracy) << ',' << csv_num(row.val_logit_diff) << ','
       << csv_num(row.oocr_accuracy) << ',' << csv_num(row.oocr_logit_diff);
    for (const auto& g : groups) {
      auto it = row.groups.find(g);
      if (it == row.groups.end()) os << ",,";
      else os << ',' << csv_num(it->second.accuracy) << ',' << csv_num(it->second.logit_diff);
    }
    os << ',' << row.loss_curve << '\n';
  }
  return os.str();
}

std::string aggregates_csv(const ExperimentReport& r) {
  std::ostringstream os;
  os << "method,layer,n,metric,mean,std\n";
  for (const auto& a : r.aggregates) {
    for (const auto& [name, v] : a.metrics) {
      os << csv_field(a.method) << ',' << a.layer << ',' << a.n << ',' << name << ',' << csv_num(v.first) << ','
         << csv_num(v.second) << '\n';
    }
  }
  return os.str();
}

double metric_or(const Aggregate& a, const std::string& name, bool sd) {
  auto it = a.metrics.find(name);
  if (it == a.metrics.end()) return 0.0;
  return sd ? it->second.second : it->second.first;
}

void summary_svg(const ExperimentReport& r, FileMap& files) {
  std::vector<std::string> labels;
  Series val{"validation", {}, {}, {}}, test{"OOCR test", {}, {}, {}};
  for (const auto& a : r.aggregates) {
    labels.push_back(a.method);
    val.y.push_back(metric_or(a, "val_accuracy", false));
    val.err.push_back(metric_or(a, "val_accuracy", true));
    test.y.push_back(metric_or(a, "oocr_accuracy", false));
    test.err.push_back(metric_or(a, "oocr_accuracy", true));
  }
  files["summary.svg"] = svg_bar_chart(r.name + ": accuracy (mean ± std over seeds)", labels, {val, test}, 0.0, 1.0);
}

// Layer sweeps for every method kind evaluated at two or more layers.
void sweep_svgs(const ExperimentReport& r, FileMap& files) {
  std::map<std::string, std::vector<const Aggregate*>> by_kind;
  std::vector<std::string> order;
  for (const auto& a : r.aggregates) {
    if (a.layer < 0) continue;
    const std::string kind = a.method.substr(0, a.method.find('('));
    if (!by_kind.contains(kind)) order.push_back(kind);
    by_kind[kind].push_back(&a);
  }
  std::vector<std::string> swept;
  for (const auto& k : order) {
    if (by_kind[k].size() >= 2) swept.push_back(k);
  }
  if (swept.empty()) return;
  for (const auto& [metric, file, title] :
       {std::tuple{"val_accuracy", "sweep_validation.svg", "validation accuracy"},
        std::tuple{"oocr_accuracy", "sweep_oocr.svg", "OOCR test accuracy"}}) {
    std::vector<Series> series;
    for (const auto& k : swept) {
      Series s{k, {}, {}, {}};
      for (const auto* a : by_kind[k]) {
        s.x.push_back(a->layer);
        s.y.push_back(metric_or(*a, metric, false));
        s.err.push_back(metric_or(*a, metric, true));
      }
      series.push_back(std::move(s));
    }
    files[file] = svg_line_chart(r.name + ": " + title + " by layer", "layer", title, series);
  }
}

void cossim_files(const json& a, const std::string& name, bool csv, bool svg, FileMap& files) {
  for (const auto& s : a.at("seeds")) {
    if (!s.contains("histogram")) continue;
    const auto& h = s.at("histogram");
    const auto edges = h.at("edges").get<std::vector<double>>();
    const auto counts = h.at("counts").get<std::vector<std::size_t>>();
    const std::string stem = "cossim_hist_seed" + std::to_string(s.at("seed").get<std::uint64_t>());
    if (csv) {
      std::ostringstream os;
      os << "bin_lo,bin_hi,count\n";
      for (std::size_t i = 0; i < counts.size(); ++i) {
        os << csv_num(edges[i]) << ',' << csv_num(edges[i + 1]) << ',' << counts[i] << '\n';
      }
      files[stem + ".csv"] = os.str();
    }
    if (svg) {
      files[stem + ".svg"] = svg_histogram(
          name + ": pairwise |cos| of LoRA difference vectors, seed " + std::to_string(s.at("seed").get<std::uint64_t>()) +
              " (median " + num(h.at("median").get<double>()) + ")",
          edges, counts);
    }
  }
}

void logitlens_files(const json& a, const std::string& name, bool csv, bool svg, FileMap& files) {
  if (csv) {
    std::ostringstream os;
    os << "layer,seed,overlap,target_rank,natural_val_accuracy,lora_val_accuracy,top\n";
    for (const auto& l : a.at("layers")) {
      for (const auto& s : l.at("seeds")) {
        if (!s.contains("overlap")) continue;
        std::string top;
        for (const auto& t : s.at("top")) top += (top.empty() ? "" : " ") + t.get<std::string>();
        os << l.at("layer").get<int>() << ',' << s.at("seed").get<std::uint64_t>() << ','
           << csv_num(s.at("overlap").get<double>()) << ',' << s.at("target_rank").get<int>() << ','
           << csv_num(s.at("natural_val_accuracy").get<double>()) << ','
           << csv_num(s.at("lora_val_accuracy").get<double>()) << ',' << csv_field(top) << '\n';
      }
    }
    files["logitlens_sweep.csv"] = os.str();
  }
  if (svg) {
    Series overlap{"top-10 concept overlap", {}, {}, {}}, nat{"natural vector val acc", {}, {}, {}},
        lora{"LoRA val acc", {}, {}, {}};
    for (const auto& l : a.at("layers")) {
      const double x = l.at("layer").get<int>();
      overlap.x.push_back(x);
      overlap.y.push_back(l.at("overlap_mean").get<double>());
      nat.x.push_back(x);
      nat.y.push_back(l.at("natural_val_accuracy_mean").get<double>());
      lora.x.push_back(x);
      lora.y.push_back(l.at("lora_val_accuracy_mean").get<double>());
    }
    files["logitlens_sweep.svg"] =
        svg_line_chart(name + ": logit lens of natural steering vectors", "layer", "mean over seeds", {overlap, nat, lora});
  }
}

void matrix_files(const json& a, const std::string& name, bool csv, bool svg, FileMap& files) {
  const auto labels = a.at("labels").get<std::vector<std::string>>();
  const auto values = a.at("values").get<std::vector<std::vector<double>>>();
  if (csv) {
    std::ostringstream os;
    os << "label";
    for (const auto& l : labels) os << ',' << l;
    os << '\n';
    for (std::size_t i = 0; i < labels.size(); ++i) {
      os << labels[i];
      for (double v : values[i]) os << ',' << csv_num(v);
      os << '\n';
    }
    files["cosine_matrix.csv"] = os.str();
  }
  if (svg) files["cosine_matrix.svg"] = svg_heatmap(name + ": cosine similarity of steering vectors", labels, values);
}

void naive_files(const json& a, bool csv, FileMap& files) {
  if (!csv) return;
  std::ostringstream os;
  os << "train_seed,cosine\n";
  for (const auto& c : a.at("cosine_to_trained")) {
    os << c.at("train_seed").get<std::uint64_t>() << ',' << csv_num(c.at("cosine").get<double>()) << '\n';
  }
  files["naive_cosines.csv"] = os.str();
}

void patch_files(const json& a, const std::string& name, bool csv, bool svg, FileMap& files) {
  if (csv) {
    std::ostringstream os;
    os << "seed,start_layer,logit_diff,base_logit_diff,steered_logit_diff\n";
    for (const auto& s : a.at("seeds")) {
      const auto starts = s.at("start_layers").get<std::vector<int>>();
      const auto ld = s.at("logit_diff").get<std::vector<double>>();
      for (std::size_t i = 0; i < starts.size(); ++i) {
        os << s.at("seed").get<std::uint64_t>() << ',' << starts[i] << ',' << csv_num(ld[i]) << ','
           << csv_num(s.at("base_logit_diff").get<double>()) << ','
           << csv_num(s.at("steered_logit_diff").get<double>()) << '\n';
      }
    }
    files["patch_sweep.csv"] = os.str();
  }
  if (svg) {
    const auto& m = a.at("mean");
    Series curve{"patched", {}, {}, {}}, base{"base model", {}, {}, {}}, steered{"steered, unpatched", {}, {}, {}};
    const auto starts = m.at("start_layers").get<std::vector<int>>();
    const auto ld = m.at("logit_diff").get<std::vector<double>>();
    for (std::size_t i = 0; i < starts.size(); ++i) {
      curve.x.push_back(starts[i]);
      curve.y.push_back(ld[i]);
      base.x.push_back(starts[i]);
      base.y.push_back(m.at("base_logit_diff").get<double>());
      steered.x.push_back(starts[i]);
      steered.y.push_back(m.at("steered_logit_diff").get<double>());
    }
    files["patch_sweep.svg"] = svg_line_chart(name + ": patching base queries from layer i onward",
                                              "first patched layer", "logit difference", {curve, base, steered});
  }
}

FileMap render(const ExperimentReport& r, const std::set<ReportFormat>& formats) {
  FileMap files;
  const bool csv = formats.contains(ReportFormat::csv), svg = formats.contains(ReportFormat::svg);
  if (formats.contains(ReportFormat::json)) files["report.json"] = to_json(r).dump(2) + "\n";
  if (csv) {
    files["rows.csv"] = rows_csv(r);
    files["aggregates.csv"] = aggregates_csv(r);
  }
  if (svg && !r.aggregates.empty()) {
    summary_svg(r, files);
    sweep_svgs(r, files);
  }
  const json& an = r.analyses;
  if (an.contains("cossim")) cossim_files(an.at("cossim"), r.name, csv, svg, files);
  if (an.contains("logitlens")) logitlens_files(an.at("logitlens"), r.name, csv, svg, files);
  if (an.contains("matrix")) matrix_files(an.at("matrix"), r.name, csv, svg, files);
  if (an.contains("naive")) naive_files(an.at("naive"), csv, files);
  if (an.contains("patch")) patch_files(an.at("patch"), r.name, csv, svg, files);
  return files;
}

}  // namespace

std::vector<std::string> report_files(const ExperimentReport& report, const std::set<ReportFormat>& formats) {
  // report.json lists itself, so its rendering must not depend on this call.
  std::vector<std::string> out;
  for (const auto& [path, _] : render(report, formats)) out.push_back(path);
  return out;
}

std::vector<std::string> emit_report(const ExperimentReport& report, const fs::path& dir,
                                     const std::set<ReportFormat>& formats) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::vector<std::string> out;
  for (const auto& [rel, text] : render(report, formats)) {
    const fs::path path = dir / rel;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("report: cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw FormatError("report: write failed for '" + path.string() + "'");
    out.push_back(rel);
  }
  return out;
}

ExperimentReport load_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("report '" + path.string() + "': cannot open");
  try {
    return report_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw FormatError("report '" + path.string() + "': " + e.what());
  }
}

}  // namespace oocr
