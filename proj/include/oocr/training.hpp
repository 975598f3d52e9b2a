#pragma once

// Training loops and evaluation shared by LoRA, steering vectors and
// pretraining. Fine-tuning losses are cross-entropy at the answer position
// only (the row of each prompt's final token).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "oocr/tasks.hpp"
#include "oocr/transformer.hpp"

namespace oocr {

/// A model as seen by evaluation: base weights plus an optional adapter and
/// interventions. Non-owning; the referenced objects must outlive the view.
struct ModelView {
  const TransformerModel* model = nullptr;
  const MlpAdapter* adapter = nullptr;
  std::vector<Intervention> interventions;
};

struct TrainConfig {
  float lr = 1e-3f;
  std::size_t steps = 500;
  std::size_t batch_size = 16;
  std::size_t warmup_steps = 20;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<float> losses;  // one per completed step
  bool diverged = false;
  std::string divergence;  // diagnostic when diverged
};

/// Minimizes answer-position cross-entropy over `data` with Adam, updating
/// only `params`. `view.interventions` may carry trainable vectors. On a
/// non-finite loss or gradient the loop stops and the parameters keep their
/// last finite values.
TrainResult train_answer_loss(const ModelView& view, const std::vector<Example>& data,
                              const std::vector<NamedTensor>& params, const TrainConfig& config);

/// Next-token language-model training of every model parameter on `corpus`.
TrainResult pretrain_lm(TransformerModel& model, const Corpus& corpus, const TrainConfig& config);

/// Right-padded batch of prompts with their codename masks.
TokenBatch prompt_batch(const std::vector<Example>& data, std::size_t begin, std::size_t end);

/// Fraction of examples whose greedy next token equals the answer.
/// Throws ContractError on an empty split.
double eval_accuracy(const ModelView& view, const std::vector<Example>& split);
/// Mean of logit(answer) - logit(incorrect) at the final position.
double eval_logit_diff(const ModelView& view, const std::vector<Example>& split);
/// Per-example logit differences, same order as `split`.
std::vector<double> logit_diffs(const ModelView& view, const std::vector<Example>& split);

}  // namespace oocr
