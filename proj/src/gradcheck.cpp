#include "oocr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace oocr {

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<NamedTensor> params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  std::erase_if(params, [](const NamedTensor& p) { return !p.second.requires_grad(); });
  for (auto& [name, t] : params) {
    t.zero_grad();
    report.checked_params.push_back(name);
  }

  loss_fn().backward();
  std::vector<std::vector<float>> analytic;
  for (auto& [name, t] : params) {
    if (t.has_grad()) {
      auto g = t.grad();
      analytic.emplace_back(g.begin(), g.end());
    } else {
      analytic.emplace_back(t.numel(), 0.0f);
    }
  }

  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& [name, t] = params[pi];
    auto values = t.data();
    const std::size_t n = values.size();
    std::size_t stride = 1;
    if (options.max_entries_per_param > 0 && n > options.max_entries_per_param) {
      stride = (n + options.max_entries_per_param - 1) / options.max_entries_per_param;
    }
    for (std::size_t j = 0; j < n; j += stride) {
      const float saved = values[j];
      auto at = [&](float offset) {
        values[j] = saved + offset;
        return static_cast<double>(loss_fn().item());
      };
      const float h = options.step;
      const double near = at(h) - at(-h);
      const double far = at(2 * h) - at(-2 * h);
      values[j] = saved;
      const double numeric = (8.0 * near - far) / (12.0 * h);
      const double a = analytic[pi][j];
      const double denom =
          std::max({std::abs(a), std::abs(numeric), static_cast<double>(options.floor)});
      const double rel = std::abs(a - numeric) / denom;
      ++report.entries_checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = rel;
        report.worst_param = name;
        report.worst_index = j;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace oocr
