#include <cmath>
#include <limits>

#include "oocr/optim.hpp"
#include "test_util.hpp"

using namespace oocr;

TEST_CASE("warmup then linear decay") {
  const LrSchedule s{0.1f, 20, 120};
  CHECK(s.at(0) == doctest::Approx(0.1 / 20));
  CHECK(s.at(9) == doctest::Approx(0.1 * 10 / 20));
  CHECK(s.at(19) == doctest::Approx(0.1));
  CHECK(s.at(20) == doctest::Approx(0.1));
  CHECK(s.at(70) == doctest::Approx(0.05));
  CHECK(s.at(120) == 0.0f);
  CHECK(s.at(500) == 0.0f);
  const LrSchedule flat{0.1f, 0, 10};
  CHECK(flat.at(0) == doctest::Approx(0.1));
}

TEST_CASE("zero gradient leaves parameters unchanged") {
  std::mt19937_64 rng(1);
  Tensor w = Tensor::uniform({3, 4}, 1.0f, rng, true);
  const Tensor before = w.detach();
  Adam opt({{"w", w}}, {});
  for (int i = 0; i < 5; ++i) {
    opt.zero_grad();
    sum(scale(w, 0.0f)).backward();
    opt.step();
  }
  CHECK(testutil::bit_equal(w, before));
  CHECK(opt.step_count() == 5);
}

TEST_CASE("parameters without gradients are skipped") {
  Tensor a({1}, {1.0f}, true), b({1}, {2.0f}, true);
  Adam opt({{"a", a}, {"b", b}}, {});
  sum(a).backward();
  opt.step();
  CHECK(a.data()[0] != 1.0f);
  CHECK(b.data()[0] == 2.0f);
}

TEST_CASE("first step runs at base/20 under a 20-step warmup") {
  Tensor w = Tensor::scalar(0.0f, true);
  AdamConfig cfg;
  cfg.schedule = {0.2f, 20, 100};
  Adam opt({{"w", w}}, cfg);
  CHECK(opt.current_lr() == doctest::Approx(0.01));
  sum(w).backward();
  opt.step();
  // The first bias-corrected Adam step has unit magnitude: w moves by exactly lr.
  CHECK(w.item() == doctest::Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("scalar Adam matches the hand recurrence") {
  AdamConfig cfg;
  cfg.schedule = {0.1f, 20, 100};
  SUBCASE("constant gradient 1") {
    Tensor w = Tensor::scalar(0.5f, true);
    Adam opt({{"w", w}}, cfg);
    for (int i = 0; i < 2; ++i) {
      opt.zero_grad();
      sum(w).backward();
      opt.step();
    }
    // m = 0.19, v = 0.001999; bias corrections make both hats 1, so the
    // steps are exactly the two warmup rates 0.005 and 0.01.
    CHECK(w.item() == doctest::Approx(0.485).epsilon(1e-6));
    CHECK(opt.first_moment(0)[0] == doctest::Approx(0.19).epsilon(1e-6));
    CHECK(opt.second_moment(0)[0] == doctest::Approx(0.001999).epsilon(1e-5));
  }
  SUBCASE("quadratic loss, three steps") {
    Tensor w = Tensor::scalar(0.5f, true);
    Adam opt({{"w", w}}, cfg);
    const double expected[] = {0.49500000005, 0.48500274604636995, 0.47001986964946535};
    for (double e : expected) {
      opt.zero_grad();
      mul(w, w).backward();
      opt.step();
      CHECK(w.item() == doctest::Approx(e).epsilon(1e-6));
    }
    CHECK(opt.first_moment(0)[0] == doctest::Approx(0.2671005492182739).epsilon(1e-5));
    CHECK(opt.second_moment(0)[0] == doctest::Approx(0.0029180315548878832).epsilon(1e-5));
  }
}

TEST_CASE("non-finite gradient aborts without touching parameters") {
  Tensor good({2}, {1.0f, 2.0f}, true), bad({2}, {3.0f, 4.0f}, true);
  Adam opt({{"good", good}, {"bad", bad}}, {});
  sum(add(good, bad)).backward();
  bad.mutable_grad()[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("'bad'"), DivergenceError);
  CHECK(good.to_vector() == std::vector<float>{1.0f, 2.0f});
  CHECK(bad.to_vector() == std::vector<float>{3.0f, 4.0f});
  CHECK(opt.step_count() == 0);
}

TEST_CASE("moment buffers match parameter shapes") {
  Tensor a({2, 3}, true), b({5}, true);
  Adam opt({{"a", a}, {"b", b}}, {});
  CHECK(opt.first_moment(0).size() == 6);
  CHECK(opt.second_moment(1).size() == 5);
}
