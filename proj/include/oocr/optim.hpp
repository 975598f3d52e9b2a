#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "oocr/tensor.hpp"

namespace oocr {

using NamedTensor = std::pair<std::string, Tensor>;

/// Linear warmup to `base_lr` over `warmup_steps`, then linear decay to zero
/// at `total_steps`. Step indices are zero-based: step 0 of a 20-step warmup
/// runs at base_lr / 20.
struct LrSchedule {
  float base_lr = 1e-3f;
  std::size_t warmup_steps = 20;
  std::size_t total_steps = 1000;

  float at(std::size_t step) const;
};

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  LrSchedule schedule;
};

/// Adam without weight decay. Moment buffers are owned per parameter in the
/// order the parameters were registered.
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamConfig config);

  /// Applies one update using the gradients currently stored on the
  /// parameters. Parameters without a gradient buffer are treated as having
  /// zero gradient. Throws DivergenceError naming the parameter if any
  /// gradient entry is not finite; no parameter is modified in that case.
  void step();
  void zero_grad();

  std::size_t step_count() const { return step_; }
  float current_lr() const { return config_.schedule.at(step_); }
  const AdamConfig& config() const { return config_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  std::span<const float> first_moment(std::size_t i) const { return m_[i]; }
  std::span<const float> second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<NamedTensor> params_;
  AdamConfig config_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::size_t step_ = 0;
};

}  // namespace oocr
