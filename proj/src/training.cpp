#include "oocr/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace oocr {
namespace {

constexpr std::size_t kEvalBatch = 64;

bool is_finite(float v) { return std::isfinite(v); }

// Logits at each example's final position, one row per example.
std::vector<std::vector<float>> last_logits(const ModelView& view, const std::vector<Example>& split) {
  if (!view.model) throw ContractError("eval: model view has no model");
  NoGradGuard no_grad;
  std::vector<std::vector<float>> out;
  out.reserve(split.size());
  for (std::size_t begin = 0; begin < split.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(split.size(), begin + kEvalBatch);
    TokenBatch batch = prompt_batch(split, begin, end);
    ForwardOptions opts;
    opts.adapter = view.adapter;
    opts.interventions = view.interventions;
    opts.logit_rows = batch.last_rows();
    const ForwardResult res = forward(*view.model, batch, opts);
    const std::size_t v = res.logits.cols();
    auto data = res.logits.data();
    for (std::size_t i = 0; i < end - begin; ++i) out.emplace_back(data.begin() + i * v, data.begin() + (i + 1) * v);
  }
  return out;
}

void require_nonempty(const std::vector<Example>& split, const char* op) {
  if (split.empty()) throw ContractError(std::string(op) + ": empty split");
}

}  // namespace

TokenBatch prompt_batch(const std::vector<Example>& data, std::size_t begin, std::size_t end) {
  TokenBatch batch;
  for (std::size_t i = begin; i < end; ++i) {
    batch.sequences.push_back(data[i].prompt);
    batch.masks.push_back(data[i].mask);
  }
  return batch;
}

TrainResult train_answer_loss(const ModelView& view, const std::vector<Example>& data,
                              const std::vector<NamedTensor>& params, const TrainConfig& config) {
  if (!view.model) throw ContractError("train: model view has no model");
  TrainResult result;
  if (config.steps == 0) return result;
  require_nonempty(data, "train");
  if (config.batch_size == 0) throw ContractError("train: batch_size must be positive");

  Adam adam(params, AdamConfig{0.9f, 0.999f, 1e-8f, {config.lr, config.warmup_steps, config.steps}});
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<Example> batch_examples;
    for (std::size_t i = 0; i < config.batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch_examples.push_back(data[order[cursor++]]);
    }
    TokenBatch batch = prompt_batch(batch_examples, 0, batch_examples.size());
    ForwardOptions opts;
    opts.adapter = view.adapter;
    opts.interventions = view.interventions;
    opts.train = true;
    opts.rng = &rng;
    opts.logit_rows = batch.last_rows();
    const ForwardResult res = forward(*view.model, batch, opts);
    std::vector<int> targets;
    for (const auto& e : batch_examples) targets.push_back(e.answer);
    Tensor loss = cross_entropy(res.logits, targets);

    const float value = loss.item();
    if (!is_finite(value)) {
      result.diverged = true;
      result.divergence = "non-finite loss at step " + std::to_string(step);
      return result;
    }
    adam.zero_grad();
    loss.backward();
    try {
      adam.step();
    } catch (const DivergenceError& e) {
      result.diverged = true;
      result.divergence = "step " + std::to_string(step) + ": " + e.what();
      return result;
    }
    result.losses.push_back(value);
  }
  return result;
}

TrainResult pretrain_lm(TransformerModel& model, const Corpus& corpus, const TrainConfig& config) {
  TrainResult result;
  if (config.steps == 0) return result;
  if (corpus.sequences.empty()) throw ContractError("pretrain: empty corpus");
  model.set_trainable(true);
  const auto params = model.named_parameters();
  Adam adam(params, AdamConfig{0.9f, 0.999f, 1e-8f, {config.lr, config.warmup_steps, config.steps}});
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(corpus.sequences.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  for (std::size_t step = 0; step < config.steps; ++step) {
    TokenBatch batch;
    for (std::size_t i = 0; i < config.batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.sequences.push_back(corpus.sequences[order[cursor++]]);
    }
    const std::size_t seq = batch.max_len();
    std::vector<int> targets(batch.sequences.size() * seq, -1);
    for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
      const auto& s = batch.sequences[b];
      for (std::size_t t = 0; t + 1 < s.size(); ++t) targets[b * seq + t] = s[t + 1];
    }
    const ForwardResult res = forward(model, batch, {});
    Tensor loss = cross_entropy(res.logits, targets);
    const float value = loss.item();
    if (!is_finite(value)) {
      result.diverged = true;
      result.divergence = "non-finite loss at step " + std::to_string(step);
      break;
    }
    adam.zero_grad();
    loss.backward();
    try {
      adam.step();
    } catch (const DivergenceError& e) {
      result.diverged = true;
      result.divergence = "step " + std::to_string(step) + ": " + e.what();
      break;
    }
    result.losses.push_back(value);
  }
  model.set_trainable(false);
  return result;
}

double eval_accuracy(const ModelView& view, const std::vector<Example>& split) {
  require_nonempty(split, "eval_accuracy");
  const auto logits = last_logits(view, split);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (argmax_lowest(logits[i]) == split[i].answer) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

std::vector<double> logit_diffs(const ModelView& view, const std::vector<Example>& split) {
  const auto logits = last_logits(view, split);
  std::vector<double> out;
  out.reserve(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    out.push_back(static_cast<double>(logits[i][split[i].answer]) - logits[i][split[i].incorrect]);
  }
  return out;
}

double eval_logit_diff(const ModelView& view, const std::vector<Example>& split) {
  require_nonempty(split, "eval_logit_diff");
  const auto diffs = logit_diffs(view, split);
  return std::accumulate(diffs.begin(), diffs.end(), 0.0) / static_cast<double>(diffs.size());
}

}  // namespace oocr
