#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "oocr/optim.hpp"

namespace oocr {

struct GradCheckOptions {
  /// Base width h of the five-point central stencil
  ///   f'(x) ~ [8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))] / 12h.
  /// Its O(h^4) truncation error allows an h large enough that float32
  /// round-off in the loss (~1e-7 * |loss| per evaluation) stays small.
  float step = 1e-2f;
  float tolerance = 1e-3f;
  /// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  /// The floor keeps entries whose true gradient is ~0 from dividing float32
  /// round-off by zero; at the default step that round-off is ~2e-5 for
  /// cross-entropy-sized losses, so 0.03 keeps it under the tolerance.
  float floor = 3e-2f;
  /// Check at most this many entries per parameter (0 = all), evenly strided.
  std::size_t max_entries_per_param = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  std::vector<std::string> checked_params;
  bool passed = false;
};

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences. Parameters that do not require gradients are skipped and do
/// not appear in the report.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<NamedTensor> params,
                           const GradCheckOptions& options = {});

}  // namespace oocr
