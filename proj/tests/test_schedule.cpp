#include "doctest.h"

#include <cmath>

#include "cspd/random.hpp"
#include "cspd/schedule.hpp"

using namespace cspd;

TEST_CASE("linear schedule endpoints and monotone corruption") {
  auto s = NoiseSchedule::linear(100);
  CHECK(s.beta(1) == doctest::Approx(1e-4));
  CHECK(s.beta(100) == doctest::Approx(2e-2));
  CHECK(s.alpha_bar(0) == 1.0);
  for (int t = 1; t <= 100; ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
}

TEST_CASE("schedule validation") {
  CHECK_THROWS_AS(NoiseSchedule(std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSchedule({0.0}), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSchedule({1.0}), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSchedule({-0.1}), std::invalid_argument);
  auto s = NoiseSchedule::linear(4);
  CHECK_THROWS_AS(s.beta(0), std::out_of_range);
  CHECK_THROWS_AS(s.beta(5), std::out_of_range);
  CHECK_THROWS_AS(s.alpha_bar(-1), std::out_of_range);
}

TEST_CASE("forward_diffuse closed-form point") {
  // alpha_bar(1) = 0.64 -> 0.8 * x0 + 0.6 * eps
  NoiseSchedule s({0.36});
  Vec x0 = Vec::Constant(1, 1.0);
  Vec eps = Vec::Constant(1, 1.0);
  Vec xt = forward_diffuse(x0, 1, s, eps);
  CHECK(xt[0] == doctest::Approx(1.4).epsilon(1e-12));
  CHECK_THROWS_AS(forward_diffuse(x0, 0, s, eps), std::out_of_range);
  CHECK_THROWS_AS(forward_diffuse(x0, 2, s, eps), std::out_of_range);
}

TEST_CASE("forward_diffuse marginals match closed form") {
  auto s = NoiseSchedule::linear(50, 1e-3, 0.05);
  const int t = 30;
  const double abar = s.alpha_bar(t);
  Vec x0 = Vec::Constant(1, 2.0);
  RandomSource rng(17);
  const int n = 100000;
  double acc = 0, acc2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = forward_diffuse(x0, t, s, rng.normal_vec(1))[0];
    acc += x;
    acc2 += x * x;
  }
  const double mean = acc / n;
  const double var = acc2 / n - mean * mean;
  CHECK(mean == doctest::Approx(std::sqrt(abar) * 2.0).epsilon(0.01));
  CHECK(var == doctest::Approx(1.0 - abar).epsilon(0.05));
}

TEST_CASE("continuous interpolation agrees at integers and between") {
  auto s = NoiseSchedule::linear(10);
  for (int t = 0; t <= 10; ++t)
    CHECK(s.alpha_bar_cont(t) == doctest::Approx(s.alpha_bar(t)).epsilon(1e-15));
  const double mid = s.alpha_bar_cont(3.5);
  CHECK(mid < s.alpha_bar(3));
  CHECK(mid > s.alpha_bar(4));
  CHECK_THROWS_AS(s.alpha_bar_cont(-0.5), std::out_of_range);
  CHECK_THROWS_AS(s.alpha_bar_cont(10.5), std::out_of_range);
}

TEST_CASE("uniform_total splits corruption evenly") {
  auto s = NoiseSchedule::uniform_total(8, 0.8);
  double total = 0;
  for (int t = 1; t <= 8; ++t) total += s.beta(t);
  CHECK(total == doctest::Approx(0.8).epsilon(1e-12));
}
