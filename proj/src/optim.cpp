#include "oocr/optim.hpp"

#include <algorithm>
#include <cmath>

namespace oocr {

float LrSchedule::at(std::size_t step) const {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<float>(step + 1) / static_cast<float>(warmup_steps);
  }
  if (step >= total_steps) return 0.0f;
  const std::size_t decay_span = total_steps - std::min(warmup_steps, total_steps);
  if (decay_span == 0) return base_lr;
  const std::size_t into = step - warmup_steps;
  return base_lr * static_cast<float>(decay_span - into) / static_cast<float>(decay_span);
}

Adam::Adam(std::vector<NamedTensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, t] : params_) {
    if (!t.defined()) throw ContractError("adam: parameter '" + name + "' is undefined");
    m_.emplace_back(t.numel(), 0.0f);
    v_.emplace_back(t.numel(), 0.0f);
  }
}

void Adam::step() {
  for (const auto& [name, t] : params_) {
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw DivergenceError("adam: non-finite gradient in parameter '" + name + "' at index " +
                              std::to_string(j) + " (step " + std::to_string(step_) + ")");
      }
    }
  }
  const float lr = config_.schedule.at(step_);
  const auto t = static_cast<float>(step_ + 1);
  const float bc1 = 1.0f - std::pow(config_.beta1, t);
  const float bc2 = 1.0f - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0f - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0f - config_.beta2) * g[j] * g[j];
      const float mhat = m[j] / bc1;
      const float vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
  ++step_;
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

}  // namespace oocr
