#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "mango/autodiff.hpp"
#include "mango/gradcheck.hpp"
#include "mango/optimizer.hpp"
#include "mango/rng.hpp"

using namespace mango;

namespace {

std::vector<double> randn(size_t n, Rng rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

}  // namespace

TEST_CASE("matmul identity and hand-computed products") {
  ad::Tape tape;
  auto eye = tape.constant({2, 2}, {1, 0, 0, 1});
  auto m = tape.constant({2, 2}, {5, 6, 7, 8});
  auto prod = tape.matmul(eye, m);
  CHECK(prod.value()[0] == 5.0);
  CHECK(prod.value()[1] == 6.0);
  CHECK(prod.value()[2] == 7.0);
  CHECK(prod.value()[3] == 8.0);

  auto a = tape.constant({1, 2}, {1, 2});
  auto b = tape.constant({2, 1}, {3, 4});
  CHECK(tape.matmul(a, b).scalar() == doctest::Approx(11.0).epsilon(1e-15));

  auto bad = tape.constant({3, 1}, {1, 2, 3});
  CHECK_THROWS_WITH_AS(tape.matmul(a, bad), doctest::Contains("incompatible shapes"),
                       std::invalid_argument);
}

TEST_CASE("matmul gradient matches central finite differences") {
  Rng rng(11);
  ad::Parameter pa("a", {3, 4});
  ad::Parameter pb("b", {4, 2});
  pa.value = randn(12, rng);
  pb.value = randn(8, rng);
  auto f = [&](bool with_grad) {
    ad::Tape tape;
    auto out = tape.sum_all(tape.matmul(tape.leaf(pa), tape.leaf(pb)));
    if (with_grad) tape.backward(out);
    return out.scalar();
  };
  std::vector<ad::Parameter*> params{&pa, &pb};
  auto report = finite_difference_check(f, params, {.h = 1e-3, .tol = 1e-6, .samples_per_param = 20});
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("softmax rows") {
  ad::Tape tape;
  auto x = tape.constant({1, 3}, {0, 0, 0});
  auto y = tape.softmax_rows(x);
  for (double v : y.value()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

  auto big = tape.softmax_rows(tape.constant({1, 2}, {1000, 0}));
  CHECK(big.value()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(big.value()[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(big.all_finite());

  // independent high-precision evaluation for the row [1, 2, 3]
  const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
  const double z = e1 + e2 + e3;
  auto s = tape.softmax_rows(tape.constant({1, 3}, {1, 2, 3}));
  CHECK(s.value()[0] == doctest::Approx(e1 / z).epsilon(1e-14));
  CHECK(s.value()[1] == doctest::Approx(e2 / z).epsilon(1e-14));
  CHECK(s.value()[2] == doctest::Approx(e3 / z).epsilon(1e-14));

  double sum = 0.0;
  for (double v : s.value()) sum += v;
  CHECK(std::fabs(sum - 1.0) < 1e-12);
}

TEST_CASE("softmax gradient vs finite differences") {
  Rng rng(3);
  ad::Parameter px("x", {2, 5});
  px.value = randn(10, rng);
  auto f = [&](bool with_grad) {
    ad::Tape tape;
    auto probs = tape.softmax_rows(tape.leaf(px));
    auto weights = tape.constant({2, 5}, randn(10, Rng(7).child(0)));
    auto out = tape.sum_all(tape.mul(probs, weights));
    if (with_grad) tape.backward(out);
    return out.scalar();
  };
  std::vector<ad::Parameter*> params{&px};
  auto report = finite_difference_check(f, params, {.h = 1e-3, .tol = 1e-5, .samples_per_param = 10});
  CHECK(report.pass);
}

TEST_CASE("layer norm") {
  ad::Tape tape;
  ad::Parameter gain("g", {4}), bias("b", {4});
  fill_constant(gain.value, 1.0);
  auto g = tape.leaf(gain), b = tape.leaf(bias);

  auto constant_row = tape.layer_norm_rows(tape.constant({1, 4}, {2, 2, 2, 2}), g, b, 1e-5);
  for (double v : constant_row.value()) CHECK(v == 0.0);

  ad::Parameter gain2("g2", {2}), bias2("b2", {2});
  fill_constant(gain2.value, 1.0);
  auto two = tape.layer_norm_rows(tape.constant({1, 2}, {1, 3}), tape.leaf(gain2),
                                  tape.leaf(bias2), 1e-12);
  CHECK(two.value()[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(two.value()[1] == doctest::Approx(1.0).epsilon(1e-6));

  CHECK_THROWS_AS(tape.layer_norm_rows(tape.constant({1, 4}, {1, 2, 3, 4}), g, b, 0.0),
                  std::invalid_argument);
}

TEST_CASE("layer norm gradient vs finite differences on 2x5 input") {
  Rng rng(5);
  ad::Parameter px("x", {2, 5}), pg("gain", {5}), pb("bias", {5});
  px.value = randn(10, rng);
  pg.value = randn(5, rng, 0.3);
  for (auto& v : pg.value) v += 1.0;
  pb.value = randn(5, rng, 0.1);
  auto f = [&](bool with_grad) {
    ad::Tape tape;
    auto y = tape.layer_norm_rows(tape.leaf(px), tape.leaf(pg), tape.leaf(pb), 1e-5);
    auto w = tape.constant({2, 5}, randn(10, Rng(13).child(1)));
    auto out = tape.sum_all(tape.mul(y, w));
    if (with_grad) tape.backward(out);
    return out.scalar();
  };
  std::vector<ad::Parameter*> params{&px, &pg, &pb};
  auto report = finite_difference_check(f, params, {.h = 1e-3, .tol = 1e-5, .samples_per_param = 10});
  CHECK(report.pass);
}

TEST_CASE("bce with logits") {
  ad::Tape tape;
  auto l0 = tape.bce_with_logits(tape.constant({1, 1}, {0.0}), tape.constant({1, 1}, {0.5}));
  CHECK(l0.scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-14));

  auto sat = tape.bce_with_logits(tape.constant({1, 1}, {50.0}), tape.constant({1, 1}, {1.0}));
  CHECK(sat.scalar() < 1e-20);
  CHECK(sat.all_finite());

  CHECK_THROWS_AS(tape.bce_with_logits(tape.constant({1, 1}, {0.0}),
                                       tape.constant({1, 1}, {1.5})),
                  std::domain_error);

  // independent high-precision evaluation on a random 2x3 case
  Rng rng(23);
  std::vector<double> logits = randn(6, rng, 2.0);
  std::vector<double> targets(6);
  for (auto& t : targets) t = rng.uniform();
  double expect = 0.0;
  for (size_t i = 0; i < 6; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    expect += -(targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p));
  }
  expect /= 6.0;
  auto loss = tape.bce_with_logits(tape.constant({2, 3}, logits), tape.constant({2, 3}, targets));
  CHECK(std::fabs(loss.scalar() - expect) < 1e-10);
}

TEST_CASE("backward basics") {
  ad::Parameter px("x", {2, 3});
  Rng rng(1);
  px.value = randn(6, rng);

  SUBCASE("sum gives all-ones gradient") {
    ad::Tape tape;
    auto loss = tape.sum_all(tape.leaf(px));
    tape.backward(loss);
    for (double g : px.grad) CHECK(g == 1.0);
  }
  SUBCASE("half squared norm gives x back") {
    ad::Tape tape;
    auto x = tape.leaf(px);
    auto loss = tape.scale(tape.sum_all(tape.mul(x, x)), 0.5);
    tape.backward(loss);
    for (size_t i = 0; i < 6; ++i) CHECK(px.grad[i] == doctest::Approx(px.value[i]).epsilon(1e-15));
  }
  SUBCASE("non-scalar loss is a contract error") {
    ad::Tape tape;
    auto x = tape.leaf(px);
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
  }
  SUBCASE("backward adds into grad buffers until zeroed") {
    ad::Tape tape;
    auto loss = tape.sum_all(tape.leaf(px));
    tape.backward(loss);
    tape.backward(loss);
    for (double g : px.grad) CHECK(g == 2.0);
    px.zero_grad();
    for (double g : px.grad) CHECK(g == 0.0);
  }
  SUBCASE("parameter ignored by the loss gets exactly zero gradient") {
    ad::Parameter unused("unused", {3});
    ad::Tape tape;
    auto x = tape.leaf(px);
    (void)tape.leaf(unused);
    tape.backward(tape.sum_all(x));
    for (double g : unused.grad) CHECK(g == 0.0);
  }
  SUBCASE("leafing the same parameter twice yields one node") {
    ad::Tape tape;
    auto a = tape.leaf(px);
    auto b = tape.leaf(px);
    auto loss = tape.sum_all(tape.add(a, b));
    tape.backward(loss);
    for (double g : px.grad) CHECK(g == 2.0);
  }
}

TEST_CASE("replaying the same graph is bit-identical") {
  Rng rng(77);
  const auto data = randn(24, rng);
  auto run = [&]() {
    ad::Parameter p("p", {4, 6});
    p.value = data;
    ad::Tape tape;
    auto x = tape.leaf(p);
    auto y = tape.softmax_rows(tape.gelu(x));
    auto loss = tape.mean_all(tape.mul(y, y));
    tape.backward(loss);
    return std::pair(loss.scalar(), p.grad);
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("sphere projection") {
  ad::Tape tape;
  auto v = tape.project_rows(tape.constant({1, 2}, {3, 4}), 1.0);
  CHECK(v.value()[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(v.value()[1] == doctest::Approx(0.8).epsilon(1e-15));

  auto z = tape.project_rows(tape.constant({1, 2}, {0, 0}), 1.0);
  CHECK(z.value()[0] == 0.0);
  CHECK(z.value()[1] == 0.0);

  SUBCASE("row norms land on epsilon within 1e-9") {
    Rng rng(9);
    auto x = tape.constant({5, 8}, randn(40, rng, 3.0));
    auto p = tape.project_rows(x, 1.0);
    for (int r = 0; r < 5; ++r) {
      double ss = 0.0;
      for (int j = 0; j < 8; ++j) {
        const double val = p.value()[static_cast<size_t>(r) * 8 + j];
        ss += val * val;
      }
      CHECK(std::fabs(std::sqrt(ss) - 1.0) < 1e-9);
    }
  }

  SUBCASE("projection is bit-exactly idempotent for nonzero inputs") {
    Rng rng(10);
    for (int trial = 0; trial < 2000; ++trial) {
      std::vector<double> row = randn(8, rng, std::exp(rng.normal(0.0, 4.0)));
      std::vector<double> once = row;
      ad::scale_rows_to_norm(once, 8, 1.0);
      std::vector<double> twice = once;
      ad::scale_rows_to_norm(twice, 8, 1.0);
      CHECK(once == twice);
    }
  }

  SUBCASE("projection gradient vs finite differences") {
    Rng rng(12);
    ad::Parameter px("x", {3, 4});
    px.value = randn(12, rng);
    auto f = [&](bool with_grad) {
      ad::Tape t;
      auto p = t.project_rows(t.leaf(px), 1.0);
      auto w = t.constant({3, 4}, randn(12, Rng(2).child(5)));
      auto out = t.sum_all(t.mul(p, w));
      if (with_grad) t.backward(out);
      return out.scalar();
    };
    std::vector<ad::Parameter*> params{&px};
    auto report = finite_difference_check(f, params, {.h = 1e-4, .tol = 1e-5, .samples_per_param = 12});
    CHECK(report.pass);
  }
}

TEST_CASE("symmetric kl") {
  ad::Tape tape;
  auto p = tape.constant({1, 2}, {0.75, 0.25});
  auto q = tape.constant({1, 2}, {0.25, 0.75});
  auto kl = tape.symmetric_kl(p, q);
  CHECK(std::fabs(kl.scalar() - std::log(3.0)) < 1e-12);

  auto same = tape.symmetric_kl(p, p);
  CHECK(same.scalar() == 0.0);

  auto reversed = tape.symmetric_kl(q, p);
  CHECK(kl.scalar() == reversed.scalar());

  CHECK_THROWS_AS(tape.symmetric_kl(tape.constant({1, 2}, {0.9, 0.3}), p),
                  std::invalid_argument);

  SUBCASE("nonnegative on random distributions, zero only at equality") {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> a(4), b(4);
      double sa = 0.0, sb = 0.0;
      for (int i = 0; i < 4; ++i) {
        a[static_cast<size_t>(i)] = rng.uniform() + 1e-3;
        b[static_cast<size_t>(i)] = rng.uniform() + 1e-3;
        sa += a[static_cast<size_t>(i)];
        sb += b[static_cast<size_t>(i)];
      }
      for (int i = 0; i < 4; ++i) {
        a[static_cast<size_t>(i)] /= sa;
        b[static_cast<size_t>(i)] /= sb;
      }
      ad::Tape t;
      auto val = t.symmetric_kl(t.constant({1, 4}, a), t.constant({1, 4}, b)).scalar();
      CHECK(val >= 0.0);
    }
  }
}

TEST_CASE("gelu and attention gradients vs finite differences") {
  Rng rng(17);
  ad::Parameter pq("q", {2, 3, 8}), pk("k", {2, 3, 8}), pv("v", {2, 3, 8});
  pq.value = randn(48, rng);
  pk.value = randn(48, rng);
  pv.value = randn(48, rng);
  std::vector<double> key_valid(6, 1.0);
  key_valid[5] = 0.0;  // one padded position
  auto f = [&](bool with_grad) {
    ad::Tape t;
    auto scores = t.attention_scores(t.gelu(t.leaf(pq)), t.leaf(pk), 2);
    scores = t.mask_attention_scores(scores, key_valid);
    auto ctx = t.attention_context(t.softmax_rows(scores), t.leaf(pv));
    auto w = t.constant({2, 3, 8}, randn(48, Rng(4).child(2)));
    auto out = t.sum_all(t.mul(ctx, w));
    if (with_grad) t.backward(out);
    return out.scalar();
  };
  std::vector<ad::Parameter*> params{&pq, &pk, &pv};
  auto report = finite_difference_check(f, params, {.h = 1e-3, .tol = 1e-4, .samples_per_param = 10});
  CHECK(report.pass);
}

TEST_CASE("embedding lookup") {
  ad::Parameter table("emb", {4, 3});
  Rng rng(2);
  table.value = randn(12, rng);

  ad::Tape tape;
  auto out = tape.embedding_lookup(tape.leaf(table), {0, 2, 2, 1}, 2, 2);
  CHECK(out.shape() == ad::Shape{2, 2, 3});
  CHECK(out.value()[3] == table.value[6]);

  CHECK_THROWS_AS(tape.embedding_lookup(tape.leaf(table), {0, 4}, 1, 2), std::domain_error);

  tape.backward(tape.sum_all(out));
  CHECK(table.grad[6] == 2.0);  // id 2 appears twice
  CHECK(table.grad[3] == 1.0);  // id 1 appears once
  CHECK(table.grad[9] == 0.0);  // id 3 never appears
}

TEST_CASE("finite difference harness flags non-deterministic objectives") {
  ad::Parameter p("p", {2});
  p.value = {1.0, 2.0};
  int calls = 0;
  auto f = [&](bool) {
    calls += 1;
    return static_cast<double>(calls);  // changes every call
  };
  std::vector<ad::Parameter*> params{&p};
  auto report = finite_difference_check(f, params, {});
  CHECK_FALSE(report.deterministic);
  CHECK_FALSE(report.pass);
}

TEST_CASE("finite difference harness on simple closed forms") {
  ad::Parameter p("x", {1});
  p.value = {3.0};
  auto f = [&](bool with_grad) {
    ad::Tape t;
    auto x = t.leaf(p);
    auto loss = t.sum_all(t.mul(x, x));
    if (with_grad) t.backward(loss);
    return loss.scalar();
  };
  std::vector<ad::Parameter*> params{&p};
  auto report = finite_difference_check(f, params, {.h = 1e-3, .tol = 1e-6});
  CHECK(report.pass);
  p.zero_grad();
  f(true);  // derivative of x^2 at 3 is 6
  CHECK(std::fabs(p.grad.back() - 6.0) < 1e-6);
}
