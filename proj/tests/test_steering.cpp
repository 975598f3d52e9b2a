#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oocr/steering.hpp"
#include "test_util.hpp"

using namespace oocr;

namespace {

DiffVectorSet diffs_of(const std::vector<std::vector<float>>& rows, int layer = 0) {
  DiffVectorSet d;
  d.layer = layer;
  std::vector<float> flat;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    d.positions.push_back(i);
    flat.insert(flat.end(), rows[i].begin(), rows[i].end());
  }
  d.vectors = Tensor({rows.size(), rows.front().size()}, flat);
  return d;
}

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * b[i];
  return s;
}

double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

const TaskBundle& functions_bundle() {
  static const TaskBundle b = [] {
    TaskOptions o;
    o.finetune_size = 200;
    return build_functions_task(testutil::small_corpus(), 4, "fn_double", o);
  }();
  return b;
}

SteeringVector unit_vector(int layer, std::size_t d, float magnitude, PositionPolicy policy, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto raw = testutil::random_vector(d, rng);
  auto sv = SteeringVector::from_raw(layer, raw, policy, SteeringProvenance::naive);
  sv.magnitude = magnitude;
  return sv;
}

}  // namespace

TEST_CASE("PCA extraction") {
  SUBCASE("copies of one vector recover it") {
    const std::vector<float> v = {3, -4, 0, 12};
    const auto sv = extract_pca_vector(diffs_of({v, v, v}));
    for (std::size_t j = 0; j < v.size(); ++j) CHECK(sv.direction[j] == doctest::Approx(v[j] / 13.0).epsilon(1e-5));
    CHECK(sv.magnitude == doctest::Approx(13.0).epsilon(1e-5));
    CHECK(sv.provenance == SteeringProvenance::pca);
  }
  SUBCASE("opposing pair dominates a small orthogonal row") {
    const auto sv = extract_pca_vector(diffs_of({{1, 0}, {-1, 0}, {0, 0.1f}}));
    CHECK(std::abs(sv.direction[0]) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(sv.direction[1]) < 1e-6);
  }
  SUBCASE("direction is signed toward the mean") {
    const auto sv = extract_pca_vector(diffs_of({{-2, -1}, {-2, 1}, {-3, 0}}));
    CHECK(sv.direction[0] < 0);
    CHECK(sv.magnitude > 0);
  }
  SUBCASE("agrees with an Eigen SVD on random rows") {
    std::mt19937_64 rng(9);
    std::vector<std::vector<float>> rows;
    Eigen::MatrixXd m(20, 24);
    const auto bias = testutil::random_vector(24, rng);
    for (int i = 0; i < 20; ++i) {
      auto r = testutil::random_vector(24, rng);
      for (int j = 0; j < 24; ++j) {
        r[j] += 2.0f * bias[j];
        m(i, j) = r[j];
      }
      rows.push_back(r);
    }
    const auto sv = extract_pca_vector(diffs_of(rows));
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinV);
    const Eigen::VectorXd oracle = svd.matrixV().col(0);
    double c = 0;
    for (int j = 0; j < 24; ++j) c += oracle(j) * sv.direction[j];
    CHECK(std::abs(c) > 0.999);
    CHECK(norm(sv.direction) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(extract_pca_vector(diffs_of({{1, 2}})), ContractError);
    CHECK_THROWS_AS(extract_pca_vector(diffs_of({{0, 0}, {0, 0}})), DegenerateInputError);
  }
}

TEST_CASE("unitize-average extraction") {
  SUBCASE("a singleton yields its own direction") {
    const auto sv = extract_unitize_average_vector(diffs_of({{0, 3, 4}}));
    CHECK(sv.direction[1] == doctest::Approx(0.6));
    CHECK(sv.direction[2] == doctest::Approx(0.8));
    CHECK(sv.magnitude == doctest::Approx(5.0));
  }
  SUBCASE("rows are normalized before averaging") {
    const auto sv = extract_unitize_average_vector(diffs_of({{1, 0}, {5, 0}, {0, 1}, {0, 0.01f}}));
    CHECK(sv.direction[0] == doctest::Approx(1 / std::sqrt(2.0)));
    CHECK(sv.direction[1] == doctest::Approx(1 / std::sqrt(2.0)));
  }
  SUBCASE("zero rows are skipped and counted") {
    std::size_t skipped = 99;
    const auto sv = extract_unitize_average_vector(diffs_of({{0, 0}, {2, 0}, {0, 0}}), PositionPolicy::all_tokens,
                                                   &skipped);
    CHECK(skipped == 2);
    CHECK(sv.direction == std::vector<float>{1, 0});
    // Magnitude still averages over every row, zeros included.
    CHECK(sv.magnitude == doctest::Approx(2.0 / 3.0));
  }
  SUBCASE("all zero rows are degenerate") {
    CHECK_THROWS_AS(extract_unitize_average_vector(diffs_of({{0, 0}, {0, 0}})), DegenerateInputError);
  }
}

TEST_CASE("extraction methods agree on collinear data") {
  std::mt19937_64 rng(4);
  const auto base = testutil::random_vector(16, rng);
  std::vector<std::vector<float>> rows;
  for (float s : {0.5f, 1.0f, 2.5f, 4.0f}) {
    rows.push_back(base);
    for (auto& x : rows.back()) x *= s;
  }
  const auto d = diffs_of(rows);
  const auto pca = extract_pca_vector(d), unit = extract_unitize_average_vector(d);
  CHECK(dot(pca.direction, unit.direction) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(pca.magnitude == doctest::Approx(unit.magnitude).epsilon(1e-5));
}

TEST_CASE("steering magnitude") {
  SUBCASE("scaled copy") {
    CHECK(steering_magnitude(diffs_of({{0, 3, 0}}), std::vector<float>{0, 1, 0}) == doctest::Approx(3.0));
  }
  SUBCASE("orthogonal direction") {
    CHECK(steering_magnitude(diffs_of({{1, 0}, {2, 0}}), std::vector<float>{0, 1}) == 0.0f);
  }
  SUBCASE("random rows match a double-precision oracle and ignore order") {
    std::mt19937_64 rng(2);
    std::vector<std::vector<float>> rows;
    for (int i = 0; i < 30; ++i) rows.push_back(testutil::random_vector(12, rng));
    auto dir = testutil::random_vector(12, rng);
    const double n = norm(dir);
    for (auto& x : dir) x = static_cast<float>(x / n);
    double oracle = 0;
    for (const auto& r : rows) oracle += dot(r, dir);
    oracle /= rows.size();
    const float got = steering_magnitude(diffs_of(rows), dir);
    CHECK(std::abs(got - oracle) < 1e-6);
    std::reverse(rows.begin(), rows.end());
    CHECK(std::abs(steering_magnitude(diffs_of(rows), dir) - oracle) < 1e-6);
  }
  SUBCASE("width mismatch") {
    CHECK_THROWS_AS(steering_magnitude(diffs_of({{1, 0}}), std::vector<float>{1}), DimensionError);
  }
}

TEST_CASE("SteeringVector basics") {
  const std::vector<float> raw = {0, -6, 8};
  const auto sv = SteeringVector::from_raw(2, raw, PositionPolicy::last_k, SteeringProvenance::trained);
  CHECK(sv.magnitude == doctest::Approx(10.0));
  CHECK(sv.direction[2] == doctest::Approx(0.8));
  const auto applied = sv.applied();
  for (std::size_t i = 0; i < raw.size(); ++i) CHECK(applied[i] == doctest::Approx(raw[i]));
  CHECK(sv.intervention().layers == std::vector<int>{2});
  CHECK_THROWS_AS(SteeringVector::from_raw(0, std::vector<float>{0, 0}, PositionPolicy::last_token,
                                           SteeringProvenance::trained),
                  DegenerateInputError);
  CHECK(parse_provenance(to_string(SteeringProvenance::unitize_avg)) == SteeringProvenance::unitize_avg);
}

TEST_CASE("steered forward") {
  const auto& model = testutil::trained_tiny_model();
  const auto prompt = functions_bundle().validation.front().prompt;
  const Tensor base = forward(model, prompt).logits;
  const std::size_t vocab = base.cols(), n = prompt.size();

  SUBCASE("zero magnitude equals the base model") {
    const auto sv = unit_vector(1, 32, 0.0f, PositionPolicy::all_tokens, 1);
    CHECK(testutil::bit_equal(steer_forward(model, sv, prompt).logits, base));
  }
  SUBCASE("last_token steering only moves the final row") {
    const auto sv = unit_vector(0, 32, 5.0f, PositionPolicy::last_token, 2);
    const Tensor steered = steer_forward(model, sv, prompt).logits;
    const auto a = steered.data(), b = base.data();
    CHECK(std::equal(a.begin(), a.begin() + (n - 1) * vocab, b.begin()));
    CHECK(testutil::max_abs_diff(a.subspan((n - 1) * vocab), b.subspan((n - 1) * vocab)) > 1e-3);
  }
  SUBCASE("token masks reproduce the positional policies") {
    auto sv = unit_vector(0, 32, 4.0f, PositionPolicy::token_mask, 3);
    std::vector<std::uint8_t> last(n, 0), every(n, 1);
    last.back() = 1;
    const Tensor by_last = steer_forward(model, sv, prompt, last).logits;
    const Tensor by_all = steer_forward(model, sv, prompt, every).logits;
    sv.policy = PositionPolicy::last_token;
    CHECK(testutil::bit_equal(by_last, steer_forward(model, sv, prompt).logits));
    sv.policy = PositionPolicy::all_tokens;
    CHECK(testutil::bit_equal(by_all, steer_forward(model, sv, prompt).logits));
  }
  SUBCASE("mask must match the policy") {
    const auto masked = unit_vector(0, 32, 1.0f, PositionPolicy::token_mask, 3);
    CHECK_THROWS_AS(steer_forward(model, masked, prompt), ContractError);
    const auto plain = unit_vector(0, 32, 1.0f, PositionPolicy::last_token, 3);
    const std::vector<std::uint8_t> mask(n, 1);
    CHECK_THROWS_AS(steer_forward(model, plain, prompt, mask), ContractError);
  }
  SUBCASE("width mismatch") {
    const auto sv = unit_vector(0, 8, 1.0f, PositionPolicy::last_token, 3);
    CHECK_THROWS_AS(apply_steering(model, sv), DimensionError);
  }
}

TEST_CASE("steering vector training") {
  const auto& model = testutil::trained_tiny_model();
  const auto& bundle = functions_bundle();
  SUBCASE("zero steps return the unit-norm initialization") {
    const auto r = train_steering_vector(model, bundle.finetune, 0, PositionPolicy::all_tokens, {1e-2f, 0, 8, 5, 3});
    CHECK(r.training.losses.empty());
    CHECK(r.vector.magnitude == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(r.vector.provenance == SteeringProvenance::trained);
  }
  SUBCASE("training lowers the loss and leaves the model untouched") {
    const auto before = model.clone();
    const auto r = train_steering_vector(model, bundle.finetune, 1, PositionPolicy::all_tokens, {3e-2f, 40, 8, 5, 3});
    REQUIRE(r.training.losses.size() == 40);
    const auto& l = r.training.losses;
    CHECK(std::accumulate(l.end() - 10, l.end(), 0.0) < std::accumulate(l.begin(), l.begin() + 10, 0.0));
    const auto now = model.named_parameters(), then = before.named_parameters();
    for (std::size_t i = 0; i < now.size(); ++i) CHECK(testutil::bit_equal(now[i].second, then[i].second));
  }
  SUBCASE("codename policy needs a non-empty mask everywhere") {
    auto data = bundle.finetune;
    data[3].mask.assign(data[3].prompt.size(), 0);
    CHECK_THROWS_AS(train_steering_vector(model, data, 0, PositionPolicy::token_mask, {1e-2f, 1, 8, 0, 0}),
                    ContractError);
  }
  SUBCASE("layer out of range") {
    CHECK_THROWS_AS(train_steering_vector(model, bundle.finetune, 2, PositionPolicy::last_token, {}), ContractError);
  }
}

TEST_CASE("steering vector persistence") {
  auto sv = SteeringVector::from_raw(1, std::vector<float>{0.25f, -1.5f, 3.0f}, PositionPolicy::last_k,
                                     SteeringProvenance::pca);
  sv.k = 7;
  const auto path = testutil::tmp_dir("steer") / "v.ckpt";
  save_steering_vector(sv, path);
  CHECK(std::filesystem::exists(std::filesystem::path(path).replace_extension(".json")));
  const auto back = load_steering_vector(path);
  CHECK(back.layer == 1);
  CHECK(back.direction == sv.direction);
  CHECK(back.magnitude == sv.magnitude);
  CHECK(back.policy == PositionPolicy::last_k);
  CHECK(back.k == 7);
  CHECK(back.provenance == SteeringProvenance::pca);
  CHECK_THROWS(load_steering_vector(path.parent_path() / "missing.ckpt"));
}
