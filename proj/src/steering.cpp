#include "oocr/steering.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "oocr/analysis.hpp"
#include "oocr/checkpoint.hpp"

namespace oocr {

const char* to_string(SteeringProvenance p) {
  switch (p) {
    case SteeringProvenance::trained: return "trained";
    case SteeringProvenance::pca: return "pca";
    case SteeringProvenance::unitize_avg: return "unitize_avg";
    case SteeringProvenance::naive: return "naive";
  }
  return "?";
}

SteeringProvenance parse_provenance(const std::string& text) {
  for (auto p : {SteeringProvenance::trained, SteeringProvenance::pca,
                 SteeringProvenance::unitize_avg, SteeringProvenance::naive}) {
    if (text == to_string(p)) return p;
  }
  throw ContractError("unknown steering provenance '" + text + "'");
}

std::vector<float> SteeringVector::applied() const {
  std::vector<float> out(direction.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = magnitude * direction[i];
  return out;
}

Intervention SteeringVector::intervention() const {
  return Intervention::add_vector(layer, Tensor({direction.size()}, applied()), policy, k);
}

SteeringVector SteeringVector::from_raw(int layer, std::span<const float> raw,
                                        PositionPolicy policy, SteeringProvenance provenance) {
  double norm = 0.0;
  for (float v : raw) norm += static_cast<double>(v) * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw DegenerateInputError("steering vector: zero vector has no direction");
  SteeringVector sv;
  sv.layer = layer;
  sv.policy = policy;
  sv.provenance = provenance;
  sv.magnitude = static_cast<float>(norm);
  for (float v : raw) sv.direction.push_back(static_cast<float>(v / norm));
  return sv;
}

SteeringTrainResult train_steering_vector(const TransformerModel& model,
                                          const std::vector<Example>& data, int layer,
                                          PositionPolicy policy, const TrainConfig& config) {
  if (layer < 0 || layer >= model.config.n_layers) {
    throw ContractError("train_steering_vector: layer " + std::to_string(layer) + " out of range");
  }
  if (policy == PositionPolicy::token_mask) {
    for (const auto& e : data) {
      bool any = false;
      for (auto m : e.mask) any = any || m;
      if (!any) throw ContractError("train_steering_vector: codename policy with an empty mask");
    }
  }
  const auto d = static_cast<std::size_t>(model.config.d_model);
  std::mt19937_64 rng(config.seed ^ 0x5eedu);
  std::vector<float> init(d);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  double norm = 0.0;
  for (float& v : init) {
    v = normal(rng);
    norm += static_cast<double>(v) * v;
  }
  for (float& v : init) v = static_cast<float>(v / std::sqrt(norm));

  Tensor raw({d}, init, true);
  ModelView view{&model, nullptr, {Intervention::add_vector(layer, raw, policy)}};
  SteeringTrainResult out;
  out.training = train_answer_loss(view, data, {{"steer." + std::to_string(layer), raw}}, config);
  out.vector = SteeringVector::from_raw(layer, raw.data(), policy, SteeringProvenance::trained);
  return out;
}

float steering_magnitude(const DiffVectorSet& diffs, std::span<const float> direction) {
  const std::size_t n = diffs.vectors.rows(), d = diffs.vectors.cols();
  if (direction.size() != d) {
    throw DimensionError("steering_magnitude: direction width " + std::to_string(direction.size()) +
                         " != diff width " + std::to_string(d));
  }
  if (n == 0) return 0.0f;
  auto data = diffs.vectors.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(data[i * d + j]) * direction[j];
    total += dot;
  }
  return static_cast<float>(total / static_cast<double>(n));
}

namespace {

SteeringVector with_direction(const DiffVectorSet& diffs, std::vector<float> direction,
                              PositionPolicy policy, SteeringProvenance provenance) {
  SteeringVector sv;
  sv.layer = diffs.layer;
  sv.policy = policy;
  sv.provenance = provenance;
  sv.direction = std::move(direction);
  sv.magnitude = steering_magnitude(diffs, sv.direction);
  return sv;
}

}  // namespace

SteeringVector extract_pca_vector(const DiffVectorSet& diffs, PositionPolicy policy) {
  const PcaResult pca = pca_first_component(rows_of(diffs.vectors));
  return with_direction(diffs, pca.direction, policy, SteeringProvenance::pca);
}

SteeringVector extract_unitize_average_vector(const DiffVectorSet& diffs, PositionPolicy policy,
                                              std::size_t* skipped) {
  const std::size_t n = diffs.vectors.rows(), d = diffs.vectors.cols();
  auto data = diffs.vectors.data();
  std::vector<double> sum(d, 0.0);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += static_cast<double>(data[i * d + j]) * data[i * d + j];
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      ++zeros;
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) sum[j] += data[i * d + j] / norm;
  }
  if (skipped) *skipped = zeros;
  if (zeros > 0 && zeros < n) {
    std::cerr << "warning: unitize-average skipped " << zeros << " zero difference vector(s)\n";
  }
  double norm = 0.0;
  for (double v : sum) norm += v * v;
  norm = std::sqrt(norm);
  if (zeros == n || norm == 0.0) {
    throw DegenerateInputError("extract_unitize_average_vector: all difference vectors are zero");
  }
  std::vector<float> direction(d);
  for (std::size_t j = 0; j < d; ++j) direction[j] = static_cast<float>(sum[j] / norm);
  return with_direction(diffs, std::move(direction), policy, SteeringProvenance::unitize_avg);
}

ModelView apply_steering(const TransformerModel& model, const SteeringVector& sv,
                         const MlpAdapter* adapter) {
  if (sv.direction.size() != static_cast<std::size_t>(model.config.d_model)) {
    throw DimensionError("apply_steering: vector width " + std::to_string(sv.direction.size()) +
                         " != d_model " + std::to_string(model.config.d_model));
  }
  return ModelView{&model, adapter, {sv.intervention()}};
}

ForwardResult steer_forward(const TransformerModel& model, const SteeringVector& sv,
                            std::span<const int> prompt,
                            std::optional<std::span<const std::uint8_t>> mask) {
  const bool needs_mask = sv.policy == PositionPolicy::token_mask;
  if (needs_mask != mask.has_value()) {
    throw ContractError(needs_mask ? "steer_forward: token_mask policy needs a codename mask"
                                   : "steer_forward: mask given for a policy that ignores it");
  }
  TokenBatch batch = TokenBatch::single(prompt);
  if (mask) batch.masks.emplace_back(mask->begin(), mask->end());
  NoGradGuard no_grad;
  ForwardOptions opts;
  opts.interventions = apply_steering(model, sv).interventions;
  return forward(model, batch, opts);
}

void save_steering_vector(const SteeringVector& sv, const std::filesystem::path& path) {
  const std::string name = "steer." + std::to_string(sv.layer) + ".direction";
  save_checkpoint({{name, Tensor({sv.direction.size()}, sv.direction)}}, path);
  nlohmann::json meta = {{"layer", sv.layer},
                         {"magnitude", sv.magnitude},
                         {"policy", to_string(sv.policy)},
                         {"k", sv.k},
                         {"provenance", to_string(sv.provenance)}};
  std::filesystem::path sidecar = path;
  sidecar.replace_extension(".json");
  std::ofstream out(sidecar, std::ios::trunc);
  if (!out) throw FormatError("steering sidecar '" + sidecar.string() + "': cannot write");
  out << meta.dump(2) << '\n';
}

SteeringVector load_steering_vector(const std::filesystem::path& path) {
  std::filesystem::path sidecar = path;
  sidecar.replace_extension(".json");
  std::ifstream in(sidecar);
  if (!in) throw FormatError("steering sidecar '" + sidecar.string() + "': cannot open");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("steering sidecar '" + sidecar.string() + "': " + e.what());
  }
  SteeringVector sv;
  sv.layer = meta.at("layer").get<int>();
  sv.magnitude = meta.at("magnitude").get<float>();
  sv.policy = parse_position_policy(meta.at("policy").get<std::string>());
  sv.k = meta.value("k", std::size_t{0});
  sv.provenance = parse_provenance(meta.at("provenance").get<std::string>());
  const std::string name = "steer." + std::to_string(sv.layer) + ".direction";
  for (const auto& [n, t] : load_checkpoint(path)) {
    if (n == name) sv.direction = t.to_vector();
  }
  if (sv.direction.empty()) throw FormatError("steering vector '" + path.string() + "': missing " + name);
  return sv;
}

}  // namespace oocr
