#pragma once

// Report persistence: report.json is the source of truth; CSV and SVG files
// are derived from it, so re-emitting a loaded report reproduces them.

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "oocr/harness.hpp"

namespace oocr {

enum class ReportFormat { json, csv, svg };
ReportFormat parse_report_format(const std::string& text);

/// Relative paths emit_report would write for `formats`.
std::vector<std::string> report_files(const ExperimentReport& report,
                                      const std::set<ReportFormat>& formats);

/// Writes the files under `dir` and returns their relative paths. Throws
/// FormatError when a file cannot be written.
std::vector<std::string> emit_report(const ExperimentReport& report, const std::filesystem::path& dir,
                                     const std::set<ReportFormat>& formats = {ReportFormat::json,
                                                                              ReportFormat::csv,
                                                                              ReportFormat::svg});

ExperimentReport load_report(const std::filesystem::path& path);

/// Minimal SVG charts, exposed for tests.
struct Series {
  std::string label;
  std::vector<double> x, y, err;  // err may be empty
};
std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<Series>& series, double y_min, double y_max);
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series);
std::string svg_histogram(const std::string& title, const std::vector<double>& edges,
                          const std::vector<std::size_t>& counts);
std::string svg_heatmap(const std::string& title, const std::vector<std::string>& labels,
                        const std::vector<std::vector<double>>& values);

}  // namespace oocr
