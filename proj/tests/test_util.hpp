#pragma once

#include <bit>
#include <cmath>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <doctest.h>

#include "oocr/tasks.hpp"
#include "oocr/tensor.hpp"
#include "oocr/training.hpp"
#include "oocr/transformer.hpp"

namespace testutil {

inline oocr::ModelConfig tiny_config(int layers = 2, int vocab = 40) {
  oocr::ModelConfig c;
  c.n_layers = layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_mlp = 32;
  c.vocab_size = vocab;
  c.max_seq_len = 32;
  c.seed = 11;
  return c;
}

inline std::vector<int> random_tokens(std::size_t n, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, vocab - 1);
  std::vector<int> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

inline std::vector<float> random_vector(std::size_t n, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  std::vector<float> out(n);
  for (auto& v : out) v = d(rng);
  return out;
}

inline bool bit_equal(const oocr::Tensor& a, const oocr::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(x[i]) != std::bit_cast<std::uint32_t>(y[i])) return false;
  }
  return true;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

/// Small pretraining corpus shared by the task-level tests.
inline std::shared_ptr<const oocr::Corpus> small_corpus() {
  static auto corpus = std::make_shared<const oocr::Corpus>(oocr::build_pretrain_corpus(1, 3000));
  return corpus;
}

/// Tiny model briefly pretrained on small_corpus(); shared, never mutated.
inline const oocr::TransformerModel& trained_tiny_model() {
  static const oocr::TransformerModel model = [] {
    auto cfg = tiny_config(2, static_cast<int>(small_corpus()->world->vocab.size()));
    cfg.d_model = 32;
    cfg.d_head = 16;
    cfg.d_mlp = 64;
    cfg.max_seq_len = 40;
    auto m = oocr::TransformerModel::initialize(cfg);
    oocr::pretrain_lm(m, *small_corpus(), {3e-3f, 150, 16, 10, 1});
    m.set_trainable(false);
    return m;
  }();
  return model;
}

inline std::filesystem::path tmp_dir(const std::string& name) {
  auto dir = std::filesystem::path(OOCR_TEST_TMP) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
