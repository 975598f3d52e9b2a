#include "oocr/lora.hpp"

#include <cmath>

namespace oocr {

const char* to_string(LoraTarget t) {
  return t == LoraTarget::all_layers_mlp ? "all_layers_mlp" : "single_layer_down";
}

LoraTarget parse_lora_target(const std::string& text) {
  if (text == "all_layers_mlp") return LoraTarget::all_layers_mlp;
  if (text == "single_layer_down") return LoraTarget::single_layer_down;
  throw ContractError("unknown LoRA target '" + text + "'");
}

const char* to_string(PromptSource s) {
  return s == PromptSource::in_distribution ? "in_distribution" : "out_of_distribution";
}

void LoraConfig::validate() const {
  if (rank < 1) throw ContractError("lora: rank must be >= 1");
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw ContractError("lora: dropout must be in [0, 1)");
  if (!(alpha > 0.0f)) throw ContractError("lora: alpha must be > 0");
}

bool LoraAdapter::adapts(int layer, MlpMatrix matrix) const {
  return factors_.contains({layer, matrix});
}

const LoraFactors& LoraAdapter::factors(int layer, MlpMatrix matrix) const {
  auto it = factors_.find({layer, matrix});
  if (it == factors_.end()) {
    throw ContractError("lora: layer " + std::to_string(layer) + " " + to_string(matrix) +
                        " is not adapted");
  }
  return it->second;
}

Tensor LoraAdapter::branch(int layer, MlpMatrix matrix, const Tensor& input, bool train,
                           std::mt19937_64* rng) const {
  const LoraFactors& f = factors(layer, matrix);
  Tensor x = input;
  if (train && config_.dropout > 0.0f) {
    if (!rng) throw ContractError("lora: training with dropout needs an rng");
    x = dropout(input, config_.dropout, true, *rng);
  }
  return scale(matmul_nt(matmul_nt(x, f.a), f.b), scaling());
}

std::vector<std::pair<int, MlpMatrix>> LoraAdapter::targets() const {
  std::vector<std::pair<int, MlpMatrix>> out;
  for (const auto& [key, f] : factors_) out.push_back(key);
  return out;
}

std::vector<NamedTensor> LoraAdapter::named_parameters() const {
  std::vector<NamedTensor> out;
  for (const auto& [key, f] : factors_) {
    const std::string p = "lora." + std::to_string(key.first) + "." + to_string(key.second) + ".";
    out.emplace_back(p + "A", f.a);
    out.emplace_back(p + "B", f.b);
  }
  return out;
}

LoraAdapter LoraAdapter::clone() const {
  LoraAdapter copy;
  copy.config_ = config_;
  for (const auto& [key, f] : factors_) {
    Tensor a = f.a.detach();
    Tensor b = f.b.detach();
    a.set_requires_grad(f.a.requires_grad());
    b.set_requires_grad(f.b.requires_grad());
    copy.factors_[key] = {a, b};
  }
  return copy;
}

namespace {

std::vector<std::pair<int, MlpMatrix>> planned_targets(const ModelConfig& model,
                                                       const LoraConfig& config) {
  std::vector<std::pair<int, MlpMatrix>> out;
  if (config.target == LoraTarget::single_layer_down) {
    if (config.layer < 0 || config.layer >= model.n_layers) {
      throw ContractError("lora: layer " + std::to_string(config.layer) + " outside model with " +
                          std::to_string(model.n_layers) + " layers");
    }
    out.emplace_back(config.layer, MlpMatrix::down);
  } else {
    for (int l = 0; l < model.n_layers; ++l) {
      for (auto m : {MlpMatrix::gate, MlpMatrix::up, MlpMatrix::down}) out.emplace_back(l, m);
    }
  }
  return out;
}

std::pair<std::size_t, std::size_t> matrix_dims(const ModelConfig& model, MlpMatrix m) {
  const auto d = static_cast<std::size_t>(model.d_model);
  const auto f = static_cast<std::size_t>(model.d_mlp);
  return m == MlpMatrix::down ? std::pair{f, d} : std::pair{d, f};  // (d_in, d_out)
}

}  // namespace

LoraAdapter attach_lora(TransformerModel& model, const LoraConfig& config, std::uint64_t seed) {
  config.validate();
  model.set_trainable(false);
  LoraAdapter adapter;
  adapter.config_ = config;
  std::mt19937_64 rng(seed);
  for (const auto& [layer, m] : planned_targets(model.config, config)) {
    const auto [d_in, d_out] = matrix_dims(model.config, m);
    if (static_cast<std::size_t>(config.rank) > std::min(d_in, d_out)) {
      throw ContractError("lora: rank " + std::to_string(config.rank) + " exceeds " +
                          to_string(m) + " projection dims " + std::to_string(d_out) + "x" +
                          std::to_string(d_in));
    }
    const auto r = static_cast<std::size_t>(config.rank);
    LoraFactors f;
    f.a = Tensor::uniform({r, d_in}, 1.0f / std::sqrt(static_cast<float>(d_in)), rng, true);
    f.b = Tensor({d_out, r}, true);
    adapter.factors_[{layer, m}] = f;
  }
  return adapter;
}

LoraAdapter LoraAdapter::from_named(const ModelConfig& model, const LoraConfig& config,
                                    const std::vector<NamedTensor>& named) {
  config.validate();
  std::map<std::string, Tensor> by_name(named.begin(), named.end());
  LoraAdapter adapter;
  adapter.config_ = config;
  for (const auto& [layer, m] : planned_targets(model, config)) {
    const std::string p = "lora." + std::to_string(layer) + "." + to_string(m) + ".";
    auto a = by_name.find(p + "A");
    auto b = by_name.find(p + "B");
    if (a == by_name.end() || b == by_name.end()) {
      throw FormatError("lora: missing factors for '" + p + "'");
    }
    const auto [d_in, d_out] = matrix_dims(model, m);
    const auto r = static_cast<std::size_t>(config.rank);
    if (a->second.shape() != Shape{r, d_in} || b->second.shape() != Shape{d_out, r}) {
      throw FormatError("lora: factor shapes for '" + p + "' do not match the config");
    }
    adapter.factors_[{layer, m}] = {a->second.detach(), b->second.detach()};
  }
  return adapter;
}

std::vector<float> DiffVectorSet::row(std::size_t i) const {
  const std::size_t d = vectors.cols();
  auto data = vectors.data();
  return {data.begin() + i * d, data.begin() + (i + 1) * d};
}

DiffVectorSet lora_delta_vectors(const TransformerModel& model, const LoraAdapter& adapter,
                                 std::span<const int> prompt, int layer, std::size_t k,
                                 PromptSource source) {
  if (!adapter.adapts(layer, MlpMatrix::down)) {
    throw ContractError("lora_delta_vectors: layer " + std::to_string(layer) +
                        " down projection is not adapted");
  }
  if (k == 0 || k > prompt.size()) {
    throw ContractError("lora_delta_vectors: k=" + std::to_string(k) +
                        " exceeds prompt length " + std::to_string(prompt.size()));
  }
  const Tensor hidden =
      capture_last_k_vectors(model, prompt, HookPoint{HookKind::mlp_hidden, layer, -1}, k, &adapter);
  NoGradGuard no_grad;
  DiffVectorSet out;
  out.source = source;
  out.layer = layer;
  for (std::size_t t = prompt.size() - k; t < prompt.size(); ++t) out.positions.push_back(t);
  out.vectors = adapter.branch(layer, MlpMatrix::down, hidden, false, nullptr).detach();
  return out;
}

}  // namespace oocr
