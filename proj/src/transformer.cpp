#include "oocr/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace oocr {

void ModelConfig::validate() const {
  if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_head <= 0 || d_mlp <= 0 ||
      vocab_size <= 0 || max_seq_len <= 0) {
    throw ContractError("model config: all sizes must be positive");
  }
  if (n_heads * d_head != d_model) {
    throw ContractError("model config: n_heads * d_head (" + std::to_string(n_heads * d_head) +
                        ") != d_model (" + std::to_string(d_model) + ")");
  }
}

const char* to_string(MlpMatrix m) {
  switch (m) {
    case MlpMatrix::gate: return "gate";
    case MlpMatrix::up: return "up";
    case MlpMatrix::down: return "down";
  }
  return "?";
}

const Tensor& LayerWeights::mlp(MlpMatrix m) const {
  switch (m) {
    case MlpMatrix::gate: return w_gate;
    case MlpMatrix::up: return w_up;
    case MlpMatrix::down: return w_down;
  }
  return w_down;
}

TransformerModel TransformerModel::initialize(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_mlp);
  const float embed_std = 1.0f / std::sqrt(float(d));
  const float out_scale = 1.0f / std::sqrt(2.0f * float(config.n_layers));
  auto ones = [](std::size_t n) { return Tensor({n}, std::vector<float>(n, 1.0f)); };

  TransformerModel m;
  m.config = config;
  m.token_embedding = Tensor::randn({std::size_t(config.vocab_size), d}, embed_std, rng);
  m.position_embedding = Tensor::randn({std::size_t(config.max_seq_len), d}, embed_std, rng);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.attn_norm = ones(d);
    w.wq = Tensor::randn({d, d}, 1.0f / std::sqrt(float(d)), rng);
    w.wk = Tensor::randn({d, d}, 1.0f / std::sqrt(float(d)), rng);
    w.wv = Tensor::randn({d, d}, 1.0f / std::sqrt(float(d)), rng);
    w.wo = Tensor::randn({d, d}, out_scale / std::sqrt(float(d)), rng);
    w.mlp_norm = ones(d);
    w.w_gate = Tensor::randn({f, d}, 1.0f / std::sqrt(float(d)), rng);
    w.w_up = Tensor::randn({f, d}, 1.0f / std::sqrt(float(d)), rng);
    w.w_down = Tensor::randn({d, f}, out_scale / std::sqrt(float(f)), rng);
    w.post_mlp_norm = ones(d);
    m.layers.push_back(std::move(w));
  }
  m.final_norm = ones(d);
  return m;
}

std::vector<NamedTensor> TransformerModel::named_parameters() const {
  std::vector<NamedTensor> out;
  out.emplace_back("tok_embed", token_embedding);
  out.emplace_back("pos_embed", position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "attn_norm", w.attn_norm);
    out.emplace_back(p + "wq", w.wq);
    out.emplace_back(p + "wk", w.wk);
    out.emplace_back(p + "wv", w.wv);
    out.emplace_back(p + "wo", w.wo);
    out.emplace_back(p + "mlp_norm", w.mlp_norm);
    out.emplace_back(p + "w_gate", w.w_gate);
    out.emplace_back(p + "w_up", w.w_up);
    out.emplace_back(p + "w_down", w.w_down);
    out.emplace_back(p + "post_mlp_norm", w.post_mlp_norm);
  }
  out.emplace_back("final_norm", final_norm);
  return out;
}

TransformerModel TransformerModel::from_named(const ModelConfig& config,
                                              const std::vector<NamedTensor>& named) {
  config.validate();
  TransformerModel m = initialize(config);
  std::map<std::string, Tensor> by_name(named.begin(), named.end());
  for (auto& [name, slot] : m.named_parameters()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("model: missing tensor '" + name + "'");
    if (it->second.shape() != slot.shape()) {
      throw FormatError("model: tensor '" + name + "' has shape " +
                        shape_str(it->second.shape()) + ", expected " + shape_str(slot.shape()));
    }
    std::copy(it->second.data().begin(), it->second.data().end(), slot.data().begin());
  }
  return m;
}

void TransformerModel::set_trainable(bool trainable) {
  for (auto& [name, t] : named_parameters()) t.set_requires_grad(trainable);
}

TransformerModel TransformerModel::clone() const {
  std::vector<NamedTensor> copies;
  for (const auto& [name, t] : named_parameters()) copies.emplace_back(name, t.detach());
  return from_named(config, copies);
}

// ---- hooks -----------------------------------------------------------------

namespace {

const char* kind_name(HookKind k) {
  switch (k) {
    case HookKind::mlp_out: return "mlp_out";
    case HookKind::residual_post: return "residual_post";
    case HookKind::query: return "query";
    case HookKind::key: return "key";
    case HookKind::attn_pattern: return "attn_pattern";
    case HookKind::mlp_hidden: return "mlp_hidden";
  }
  return "?";
}

}  // namespace

std::string to_string(const HookPoint& hook) {
  std::string s = std::string(kind_name(hook.kind)) + "." + std::to_string(hook.layer);
  if (hook.head >= 0) s += ".h" + std::to_string(hook.head);
  return s;
}

HookPoint parse_hook(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  if (parts.size() < 2 || parts.size() > 3) throw ContractError("unknown hook point '" + text + "'");
  HookPoint hook;
  static const std::pair<const char*, HookKind> kinds[] = {
      {"mlp_out", HookKind::mlp_out}, {"residual_post", HookKind::residual_post},
      {"query", HookKind::query},     {"key", HookKind::key},
      {"attn_pattern", HookKind::attn_pattern}, {"mlp_hidden", HookKind::mlp_hidden}};
  bool found = false;
  for (const auto& [name, kind] : kinds) {
    if (parts[0] == name) {
      hook.kind = kind;
      found = true;
    }
  }
  if (!found) throw ContractError("unknown hook point '" + text + "'");
  try {
    hook.layer = std::stoi(parts[1]);
    if (parts.size() == 3) {
      if (parts[2].empty() || parts[2][0] != 'h') throw ContractError("bad head");
      hook.head = std::stoi(parts[2].substr(1));
    }
  } catch (const std::exception&) {
    throw ContractError("unknown hook point '" + text + "'");
  }
  return hook;
}

const Tensor& ActivationTrace::at(const HookPoint& hook) const {
  auto it = values.find(hook);
  if (it == values.end()) throw ContractError("hook point '" + to_string(hook) + "' not captured");
  return it->second;
}

const char* to_string(PositionPolicy p) {
  switch (p) {
    case PositionPolicy::last_token: return "last_token";
    case PositionPolicy::token_mask: return "token_mask";
    case PositionPolicy::all_tokens: return "all_tokens";
    case PositionPolicy::last_k: return "last_k";
  }
  return "?";
}

PositionPolicy parse_position_policy(const std::string& text) {
  for (auto p : {PositionPolicy::last_token, PositionPolicy::token_mask, PositionPolicy::all_tokens,
                 PositionPolicy::last_k}) {
    if (text == to_string(p)) return p;
  }
  throw ContractError("unknown position policy '" + text + "'");
}

Intervention Intervention::add_vector(int layer, Tensor vector, PositionPolicy positions,
                                      std::size_t k) {
  Intervention iv;
  iv.kind = Kind::add_vector;
  iv.layers = {layer};
  iv.vector = std::move(vector);
  iv.positions = positions;
  iv.k = k;
  return iv;
}

Intervention Intervention::patch_queries(std::vector<int> layers,
                                         std::shared_ptr<const ActivationTrace> source) {
  Intervention iv;
  iv.kind = Kind::patch_queries;
  iv.layers = std::move(layers);
  iv.source = std::move(source);
  iv.positions = PositionPolicy::last_token;
  return iv;
}

// ---- batch -----------------------------------------------------------------

TokenBatch TokenBatch::single(std::span<const int> tokens) {
  TokenBatch b;
  b.sequences.emplace_back(tokens.begin(), tokens.end());
  return b;
}

std::size_t TokenBatch::max_len() const {
  std::size_t t = 0;
  for (const auto& s : sequences) t = std::max(t, s.size());
  return t;
}

std::vector<std::size_t> TokenBatch::last_rows() const {
  const std::size_t t = max_len();
  std::vector<std::size_t> rows;
  rows.reserve(sequences.size());
  for (std::size_t b = 0; b < sequences.size(); ++b) rows.push_back(b * t + sequences[b].size() - 1);
  return rows;
}

// ---- forward ---------------------------------------------------------------

namespace {

void validate_hook(const HookPoint& hook, const ModelConfig& c) {
  if (hook.layer < 0 || hook.layer >= c.n_layers) {
    throw ContractError("hook point '" + to_string(hook) + "': layer out of range");
  }
  const bool per_head_kind = hook.kind == HookKind::query || hook.kind == HookKind::key ||
                             hook.kind == HookKind::attn_pattern;
  if (hook.head >= c.n_heads || hook.head < -1 || (hook.head >= 0 && !per_head_kind)) {
    throw ContractError("hook point '" + to_string(hook) + "': invalid head");
  }
}

std::vector<std::uint8_t> position_mask(const TokenBatch& batch, std::size_t seq_len,
                                        const Intervention& iv) {
  std::vector<std::uint8_t> mask(batch.sequences.size() * seq_len, 0);
  for (std::size_t b = 0; b < batch.sequences.size(); ++b) {
    const std::size_t len = batch.sequences[b].size();
    auto set = [&](std::size_t t) { mask[b * seq_len + t] = 1; };
    switch (iv.positions) {
      case PositionPolicy::last_token:
        set(len - 1);
        break;
      case PositionPolicy::all_tokens:
        for (std::size_t t = 0; t < len; ++t) set(t);
        break;
      case PositionPolicy::last_k:
        if (iv.k > len) {
          throw ContractError("add_vector: last_k of " + std::to_string(iv.k) +
                              " exceeds sequence length " + std::to_string(len));
        }
        for (std::size_t t = len - iv.k; t < len; ++t) set(t);
        break;
      case PositionPolicy::token_mask:
        if (batch.masks.size() != batch.sequences.size() || batch.masks[b].size() != len) {
          throw ContractError("add_vector: token_mask policy needs a mask per token");
        }
        for (std::size_t t = 0; t < len; ++t) {
          if (batch.masks[b][t]) set(t);
        }
        break;
    }
  }
  return mask;
}

// Slices one head's columns out of a packed (rows x heads*d_head) tensor.
Tensor head_columns(const Tensor& packed, int head, int d_head) {
  const std::size_t rows = packed.rows(), width = packed.cols();
  std::vector<float> out(rows * d_head);
  auto src = packed.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(src.begin() + r * width + head * d_head, d_head, out.begin() + r * d_head);
  }
  return Tensor({rows, std::size_t(d_head)}, std::move(out));
}

// Selects one head's blocks from a (batch*heads*seq) x seq pattern.
Tensor head_pattern(const Tensor& pattern, std::size_t batch, int heads, int head,
                    std::size_t seq) {
  std::vector<float> out(batch * seq * seq);
  auto src = pattern.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t from = ((b * heads + head) * seq) * seq;
    std::copy_n(src.begin() + from, seq * seq, out.begin() + b * seq * seq);
  }
  return Tensor({batch * seq, seq}, std::move(out));
}

}  // namespace

ForwardResult forward(const TransformerModel& model, const TokenBatch& batch,
                      const ForwardOptions& options) {
  const ModelConfig& c = model.config;
  if (batch.sequences.empty()) throw ContractError("forward: empty batch");
  const std::size_t seq = batch.max_len();
  for (const auto& s : batch.sequences) {
    if (s.empty()) throw ContractError("forward: empty sequence");
  }
  if (seq > static_cast<std::size_t>(c.max_seq_len)) {
    throw ContractError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                        std::to_string(c.max_seq_len));
  }
  const std::size_t nb = batch.sequences.size();
  const std::size_t rows = nb * seq;
  const std::vector<std::size_t> last_rows = batch.last_rows();

  std::set<HookPoint> wanted(options.capture.begin(), options.capture.end());
  for (const auto& h : wanted) validate_hook(h, c);
  auto wants = [&](HookKind kind, int layer) {
    auto it = wanted.lower_bound(HookPoint{kind, layer, -1});
    return it != wanted.end() && it->kind == kind && it->layer == layer;
  };

  // Intervention validation up front so errors surface before any compute.
  std::vector<std::vector<const Intervention*>> adds(c.n_layers);
  std::vector<const Intervention*> patch_by_layer(c.n_layers, nullptr);
  for (const auto& iv : options.interventions) {
    for (int l : iv.layers) {
      if (l < 0 || l >= c.n_layers) {
        throw ContractError("intervention: layer " + std::to_string(l) + " out of range");
      }
    }
    if (iv.kind == Intervention::Kind::add_vector) {
      if (!iv.vector.defined() || iv.vector.numel() != static_cast<std::size_t>(c.d_model)) {
        throw DimensionError("add_vector: payload width " +
                             std::to_string(iv.vector.defined() ? iv.vector.numel() : 0) +
                             " != d_model " + std::to_string(c.d_model));
      }
      for (int l : iv.layers) adds[l].push_back(&iv);
    } else {
      if (!iv.source) throw ContractError("patch_queries: missing source trace");
      for (int l : iv.layers) {
        const HookPoint qh{HookKind::query, l, -1};
        if (!iv.source->contains(qh)) {
          throw ContractError("patch_queries: source trace lacks layer " + std::to_string(l));
        }
        if (iv.source->at(qh).rows() != rows || iv.source->at(qh).cols() != std::size_t(c.d_model)) {
          throw DimensionError("patch_queries: source queries for layer " + std::to_string(l) +
                               " have shape " + shape_str(iv.source->at(qh).shape()));
        }
        patch_by_layer[l] = &iv;
      }
    }
  }

  std::vector<int> ids(rows, 0);
  std::vector<int> pos(rows, 0);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      pos[b * seq + t] = static_cast<int>(t);
      if (t < batch.sequences[b].size()) ids[b * seq + t] = batch.sequences[b][t];
    }
  }

  ForwardResult result;
  result.seq_len = seq;
  result.last_rows = last_rows;
  result.trace.batch = nb;
  result.trace.seq_len = seq;
  auto capture = [&](HookKind kind, int layer, const Tensor& t) {
    for (auto it = wanted.lower_bound(HookPoint{kind, layer, -1});
         it != wanted.end() && it->kind == kind && it->layer == layer; ++it) {
      if (it->head < 0) {
        result.trace.values[*it] = t.detach();
      } else if (kind == HookKind::attn_pattern) {
        result.trace.values[*it] = head_pattern(t, nb, c.n_heads, it->head, seq);
      } else {
        result.trace.values[*it] = head_columns(t, it->head, c.d_head);
      }
    }
  };

  auto linear = [&](const Tensor& input, int layer, MlpMatrix which) {
    Tensor out = matmul_nt(input, model.layers[layer].mlp(which));
    if (options.adapter && options.adapter->adapts(layer, which)) {
      out = add(out, options.adapter->branch(layer, which, input, options.train, options.rng));
    }
    return out;
  };

  const float attn_scale = 1.0f / std::sqrt(static_cast<float>(c.d_head));
  Tensor x = add(embedding(ids, model.token_embedding), embedding(pos, model.position_embedding));
  for (int l = 0; l < c.n_layers; ++l) {
    const LayerWeights& w = model.layers[l];
    Tensor a = rms_norm(x, w.attn_norm, c.norm_eps);
    Tensor q = matmul_nt(a, w.wq);
    Tensor k = matmul_nt(a, w.wk);
    Tensor v = matmul_nt(a, w.wv);
    if (const Intervention* patch = patch_by_layer[l]) {
      const Tensor& src = patch->source->at(HookPoint{HookKind::query, l, -1});
      q = replace_rows(q, last_rows, select_rows(src, last_rows));
    }
    if (wants(HookKind::query, l)) capture(HookKind::query, l, q);
    if (wants(HookKind::key, l)) capture(HookKind::key, l, k);
    Tensor scores = causal_mask(head_scores(q, k, c.n_heads, seq, attn_scale), seq);
    Tensor pattern = softmax_rows(scores);
    if (wants(HookKind::attn_pattern, l)) capture(HookKind::attn_pattern, l, pattern);
    x = add(x, matmul_nt(head_mix(pattern, v, c.n_heads, seq), w.wo));

    Tensor m = rms_norm(x, w.mlp_norm, c.norm_eps);
    Tensor hidden = mul(silu(linear(m, l, MlpMatrix::gate)), linear(m, l, MlpMatrix::up));
    if (wants(HookKind::mlp_hidden, l)) capture(HookKind::mlp_hidden, l, hidden);
    Tensor mlp_out = linear(hidden, l, MlpMatrix::down);
    for (const Intervention* iv : adds[l]) {
      mlp_out = add_rowvec_masked(mlp_out, iv->vector, position_mask(batch, seq, *iv));
    }
    if (wants(HookKind::mlp_out, l)) capture(HookKind::mlp_out, l, mlp_out);
    x = add(x, rms_norm(mlp_out, w.post_mlp_norm, c.norm_eps));
    if (wants(HookKind::residual_post, l)) capture(HookKind::residual_post, l, x);
  }

  if (options.logit_rows) x = select_rows(x, *options.logit_rows);
  result.logits = matmul_nt(rms_norm(x, model.final_norm, c.norm_eps), model.token_embedding);
  return result;
}

ForwardResult forward(const TransformerModel& model, std::span<const int> tokens,
                      const ForwardOptions& options) {
  return forward(model, TokenBatch::single(tokens), options);
}

int argmax_lowest(std::span<const float> row) {
  int best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = static_cast<int>(j);
  }
  return best;
}

int greedy_next_token(const TransformerModel& model, std::span<const int> tokens,
                      const std::vector<Intervention>& interventions, const MlpAdapter* adapter) {
  if (tokens.empty()) throw ContractError("greedy_next_token: empty prompt");
  NoGradGuard no_grad;
  ForwardOptions opts;
  opts.interventions = interventions;
  opts.adapter = adapter;
  opts.logit_rows = std::vector<std::size_t>{tokens.size() - 1};
  auto res = forward(model, tokens, opts);
  return argmax_lowest(res.logits.data());
}

Tensor capture_last_k_vectors(const TransformerModel& model, std::span<const int> tokens,
                              const HookPoint& hook, std::size_t k, const MlpAdapter* adapter,
                              const std::vector<Intervention>& interventions) {
  if (k == 0 || k > tokens.size()) {
    throw ContractError("capture_last_k_vectors: k=" + std::to_string(k) +
                        " exceeds sequence length " + std::to_string(tokens.size()));
  }
  if (hook.kind == HookKind::attn_pattern) {
    throw ContractError("capture_last_k_vectors: '" + to_string(hook) + "' is not a vector hook");
  }
  NoGradGuard no_grad;
  ForwardOptions opts;
  opts.capture = {hook};
  opts.adapter = adapter;
  opts.interventions = interventions;
  opts.logit_rows = std::vector<std::size_t>{tokens.size() - 1};
  auto res = forward(model, tokens, opts);
  const Tensor& full = res.trace.at(hook);
  std::vector<std::size_t> rows;
  for (std::size_t t = tokens.size() - k; t < tokens.size(); ++t) rows.push_back(t);
  return select_rows(full, rows).detach();
}

}  // namespace oocr
