#include <doctest.h>

#include <cmath>

#include "c2f/checks.hpp"
#include "c2f/gradcheck.hpp"
#include "c2f/tape.hpp"
#include "oracles.hpp"

using namespace c2f;

TEST_CASE("softmax: symmetric and shifted inputs") {
  Tape t;
  const Array p = softmax(t.constant(Array({2}, {0.0, 0.0}))).value();
  CHECK(p[0] == 0.5);
  CHECK(p[1] == 0.5);
  for (double a : {-300.0, 0.0, 7.5, 800.0}) {
    const Array q = softmax(t.constant(Array({4}, a))).value();
    for (double v : q.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  }
}

TEST_CASE("softmax matches a scalar evaluation") {
  Tape t;
  const Array p = softmax(t.constant(Array({3}, {1.0, 2.0, 3.0}))).value();
  const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
  const double s = e1 + e2 + e3;
  CHECK(std::fabs(p[0] - e1 / s) < 1e-15);
  CHECK(std::fabs(p[1] - e2 / s) < 1e-15);
  CHECK(std::fabs(p[2] - e3 / s) < 1e-15);
}

TEST_CASE("softmax rows are simplices and shift invariant") {
  RandomStream rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    const Array z = random_logits(rng, 1, 3, 3, 1 + rng.below(8), 4.0);
    Array shifted = z;
    const std::size_t k = z.last_dim();
    for (std::size_t px = 0; px < z.size() / k; ++px) {
      const double c = 50.0 * rng.normal();
      for (std::size_t j = 0; j < k; ++j) shifted[px * k + j] += c;
    }
    Tape t;
    const Array p = softmax(t.constant(z)).value();
    const Array q = softmax(t.constant(shifted)).value();
    for (std::size_t px = 0; px < z.size() / k; ++px) {
      double s = 0;
      for (std::size_t j = 0; j < k; ++j) {
        const double v = p[px * k + j];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(std::fabs(v - q[px * k + j]) <= 1e-12);
        s += v;
      }
      CHECK(std::fabs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("softmax rejects non-finite logits") {
  Tape t;
  CHECK_THROWS_AS(softmax(t.constant(Array({2}, {0.0, NAN}))), TapeError);
  CHECK_THROWS_AS(log_softmax(t.constant(Array({2}, {INFINITY, 0.0}))), TapeError);
}

TEST_CASE("backward of sum of squares") {
  Tape t;
  const Var p = t.parameter(Array({2}, {0.2, 0.8}));
  const auto g = backward(t, sum(square(p)));
  CHECK(g[0][0] == doctest::Approx(0.4));
  CHECK(g[0][1] == doctest::Approx(1.6));
}

TEST_CASE("parameter not reaching the loss has zero gradient") {
  Tape t;
  const Var a = t.parameter(Array({3}, 1.0));
  const Var b = t.parameter(Array({2}, 5.0));
  const auto g = backward(t, sum(mul(a, a)));
  CHECK(g[1] == Array({2}));
  (void)b;
}

TEST_CASE("backward errors") {
  Tape t, other;
  const Var a = t.parameter(Array({3}, 1.0));
  CHECK_THROWS_AS(t.backward(a), TapeError);
  const Var foreign = other.constant(Array::scalar(1.0));
  CHECK_THROWS_AS(t.backward(foreign), TapeError);
}

TEST_CASE("backward twice is bit-identical") {
  RandomStream rng(4);
  Tape t;
  const Var x = t.constant(random_images(rng, 2, 5, 5));
  const Var w = t.parameter(random_logits(rng, 3, 3, 3, 4));
  const Var b = t.parameter(random_logits(rng, 1, 1, 1, 4).reshaped({4}));
  const Var loss = mean(square(relu(conv3x3(x, w, b))));
  const auto g1 = backward(t, loss);
  const auto g2 = backward(t, loss);
  CHECK(g1 == g2);
}

TEST_CASE("conv3x3 matches a direct loop") {
  RandomStream rng(2);
  const std::size_t h = 5, w = 4, ci = 3, co = 2;
  const Array x = random_images(rng, 1, h, w);
  const Array k = random_logits(rng, 3, 3, ci, co);
  const Array b({co}, {0.3, -0.2});
  Tape t;
  const Array y = conv3x3(t.constant(x), t.constant(k), t.constant(b)).value();
  const auto ref = oracle::conv3x3(x.storage(), h, w, ci, k.storage(), b.storage(), co);
  REQUIRE(y.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::fabs(y[i] - ref[i]) < 1e-12);
}

TEST_CASE("conv1x1 is a per-pixel matrix product") {
  Tape t;
  const Array x({1, 1, 2, 2}, {1, 2, 3, 4});
  const Array w({3, 2}, {1, 0, 0, 1, 1, 1});
  const Array b({3}, {0, 0, 10});
  const Array y = conv1x1(t.constant(x), t.constant(w), t.constant(b)).value();
  CHECK(y.storage() == std::vector<double>{1, 2, 13, 3, 4, 17});
}

TEST_CASE("group reductions") {
  Tape t;
  const Var a = t.constant(Array({1, 4}, {0.1, 0.2, 0.3, 0.4}));
  const std::vector<std::size_t> g{1, 0, 1, 0};
  const Array s = group_sum(a, g, 2).value();
  CHECK(s[0] == doctest::Approx(0.6));
  CHECK(s[1] == doctest::Approx(0.4));
  const Array l = group_logsumexp(a, g, 2).value();
  CHECK(l[0] == doctest::Approx(std::log(std::exp(0.2) + std::exp(0.4))));
  CHECK_THROWS(group_sum(a, std::vector<std::size_t>{0, 0, 0, 0}, 2));
}

TEST_CASE("log floor stops the gradient") {
  Tape t;
  const Var a = t.parameter(Array({2}, {0.0, 2.0}));
  const Var y = sum(log(a, 1e-12));
  CHECK(y.value().item() == doctest::Approx(std::log(1e-12) + std::log(2.0)));
  const auto g = backward(t, y);
  CHECK(g[0][0] == 0.0);
  CHECK(g[0][1] == doctest::Approx(0.5));
}

TEST_CASE("finite_diff_check on p^2") {
  const auto r = finite_diff_check([](Tape&, const std::vector<Var>& p) { return sum(square(p[0])); },
                                   {Array({1}, {3.0})}, 1e-3, 1e-4);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-6 / 6.0);
}

TEST_CASE("finite_diff_check on a random two-layer network") {
  RandomStream rng(8);
  const Array x = random_images(rng, 1, 3, 3);
  std::vector<Array> params{random_logits(rng, 3, 3, 3, 4, 0.5), Array({4}, 0.3), random_logits(rng, 1, 1, 2, 4, 0.5).reshaped({2, 4}),
                            Array({2}, 0.0)};
  const auto r = finite_diff_check(
      [&](Tape& t, const std::vector<Var>& p) {
        return mean(square(conv1x1(exp(scale(conv3x3(t.constant(x), p[0], p[1]), 0.5)), p[2], p[3])));
      },
      params, 1e-3, 1e-4);
  CHECK(r.passed);
  CHECK(r.blocks.size() == 4);
}

TEST_CASE("finite_diff_check on single-pixel cross-entropy") {
  const std::vector<double> z{0.3, -1.2, 0.8};
  const auto r = finite_diff_check(
      [](Tape&, const std::vector<Var>& p) {
        return weighted_sum(log_softmax(p[0]), Array({1, 1, 1, 3}, {0, 1, 0}), -1.0);
      },
      {Array({1, 1, 1, 3}, z)}, 1e-3, 1e-4);
  CHECK(r.passed);
  // Analytic gradient is softmax - onehot.
  const auto s = oracle::softmax(z);
  Tape t;
  const auto g = backward(t, weighted_sum(log_softmax(t.parameter(Array({1, 1, 1, 3}, z))),
                                          Array({1, 1, 1, 3}, {0, 1, 0}), -1.0));
  CHECK(g[0][0] == doctest::Approx(s[0]));
  CHECK(g[0][1] == doctest::Approx(s[1] - 1.0));
}

TEST_CASE("corrupted gradient is caught") {
  const Array p({3}, {0.5, -1.0, 2.0});
  const ValueObjective f = [](const std::vector<Array>& q) {
    double s = 0;
    for (double v : q[0].values()) s += v * v * v;
    return s;
  };
  Array grad({3});
  for (std::size_t i = 0; i < 3; ++i) grad[i] = 3 * p[i] * p[i];
  CHECK(compare_gradients(f, {p}, {grad}, 1e-3, 1e-4).passed);
  grad[1] *= 1.1;
  const auto r = compare_gradients(f, {p}, {grad}, 1e-3, 1e-4, {"p"});
  CHECK_FALSE(r.passed);
  CHECK(r.blocks[0].worst_index == 1);
  CHECK(r.blocks[0].name == "p");
}

TEST_CASE("non-finite evaluation counts as a failure") {
  const ValueObjective f = [](const std::vector<Array>& q) { return q[0][0] > 0 ? std::log(q[0][0]) : NAN; };
  const auto r = compare_gradients(f, {Array({1}, {0.0})}, {Array({1}, {1.0})}, 1e-3, 1e-4);
  CHECK_FALSE(r.passed);
  CHECK(r.blocks[0].non_finite == 1);
}

TEST_CASE("relative error denominator") {
  CHECK(relative_error(1.0, 1.1) == doctest::Approx(0.1 / 1.1));
  CHECK(relative_error(0.0, 1e-9) == doctest::Approx(0.1));
  CHECK(relative_error(0.0, 0.0) == 0.0);
}
