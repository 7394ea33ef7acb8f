#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "mango/optimizer.hpp"
#include "mango/rng.hpp"

using namespace mango;

TEST_CASE("lr schedule: warmup then linear decay") {
  CHECK(lr_at_step(8e-5, 0.10, 1000, 0) == 0.0);
  CHECK(lr_at_step(8e-5, 0.10, 1000, 50) == doctest::Approx(4e-5).epsilon(1e-12));
  CHECK(lr_at_step(8e-5, 0.10, 1000, 100) == doctest::Approx(8e-5).epsilon(1e-12));
  CHECK(lr_at_step(8e-5, 0.10, 1000, 1000) == 0.0);
  CHECK_THROWS_AS(lr_at_step(8e-5, 0.10, 1000, 1001), std::invalid_argument);
  CHECK_THROWS_AS(lr_at_step(8e-5, 0.10, 1000, -1), std::invalid_argument);

  SUBCASE("piecewise linear, continuous, peak equals peak_lr") {
    double prev = lr_at_step(3e-4, 0.2, 500, 0);
    double max_seen = prev;
    for (int64_t s = 1; s <= 500; ++s) {
      const double cur = lr_at_step(3e-4, 0.2, 500, s);
      CHECK(std::fabs(cur - prev) < 3e-4 / 50.0);  // bounded slope
      max_seen = std::max(max_seen, cur);
      prev = cur;
    }
    CHECK(max_seen == doctest::Approx(3e-4).epsilon(1e-12));
  }
}

TEST_CASE("adamw update") {
  SUBCASE("zero grad with weight decay is pure decay") {
    ad::Parameter p("p", {3});
    p.value = {1.0, -2.0, 0.5};
    adamw_update(p, 0.1, 0.9, 0.98, 0.01, 1e-8);
    CHECK(p.value[0] == doctest::Approx(1.0 * (1.0 - 0.001)).epsilon(1e-15));
    CHECK(p.value[1] == doctest::Approx(-2.0 * (1.0 - 0.001)).epsilon(1e-15));
    CHECK(p.value[2] == doctest::Approx(0.5 * (1.0 - 0.001)).epsilon(1e-15));
    CHECK(p.step_count == 1);
  }
  SUBCASE("first step moves by about lr against the gradient sign") {
    ad::Parameter p("p", {2});
    p.value = {0.0, 0.0};
    p.grad = {0.3, -0.7};
    adamw_update(p, 1e-2, 0.9, 0.98, 0.0, 1e-8);
    // bias-corrected moments collapse to g / |g| on the first step
    CHECK(p.value[0] == doctest::Approx(-1e-2).epsilon(1e-6));
    CHECK(p.value[1] == doctest::Approx(1e-2).epsilon(1e-6));
  }
  SUBCASE("repeated identical calls differ because moments evolve") {
    ad::Parameter p("p", {1});
    p.value = {1.0};
    p.grad = {0.5};
    adamw_update(p, 1e-2, 0.9, 0.98, 0.0, 1e-8);
    const double delta1 = 1.0 - p.value[0];
    const double before = p.value[0];
    p.grad = {0.5};
    adamw_update(p, 1e-2, 0.9, 0.98, 0.0, 1e-8);
    const double delta2 = before - p.value[0];
    CHECK(delta1 != delta2);
    CHECK(p.step_count == 2);
  }
}

TEST_CASE("param set registration") {
  ParamSet set;
  set.create("a", {2, 3});
  set.create("b", {4});
  CHECK(set.count() == 2);
  CHECK(set.total_size() == 10);
  CHECK_THROWS_AS(set.create("a", {1}), std::invalid_argument);
  CHECK(set.find("missing") == nullptr);
  CHECK_THROWS_AS(set.at("missing"), std::out_of_range);
}

TEST_CASE("truncated normal init stays within two standard deviations") {
  Rng rng(99);
  std::vector<double> v(20000);
  fill_truncated_normal(v, 0.02, rng);
  double mean = 0.0;
  for (double x : v) {
    CHECK(std::fabs(x) <= 0.04);
    mean += x;
  }
  mean /= static_cast<double>(v.size());
  CHECK(std::fabs(mean) < 4.0 * 0.02 / std::sqrt(static_cast<double>(v.size())));
}
