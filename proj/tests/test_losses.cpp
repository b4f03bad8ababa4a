#include <doctest.h>

#include <cmath>
#include <memory>

#include "c2f/checks.hpp"
#include "c2f/desk.hpp"
#include "c2f/losses.hpp"
#include "c2f/model.hpp"
#include "oracles.hpp"

using namespace c2f;

namespace {

std::shared_ptr<const HierarchyTree> tree_of(std::string_view json) {
  return std::make_shared<const HierarchyTree>(parse_hierarchy(json));
}

constexpr std::string_view kOneSplit = R"({"roots":[{"name":"c","children":[{"name":"f1"},{"name":"f2"}]},{"name":"c2"}]})";

double ms_oracle(const Array& p, double alpha) {
  const std::size_t n = p.dim(0), h = p.dim(1), w = p.dim(2), k = p.dim(3);
  const double coeff = 1.0 / (2.0 * std::pow(double(k), alpha) * std::pow(double(h * w), 1.0 - alpha));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t px = 0; px < h * w; ++px)
      for (std::size_t c = 0; c < k; ++c) {
        const double v = p[(i * h * w + px) * k + c];
        total += coeff * v * v;
      }
  return -total / double(n);
}

}  // namespace

TEST_CASE("cross entropy closed forms") {
  Tape tape;
  const Var z = tape.constant(Array({1, 1, 2, 4}, 0.3));
  const std::vector<Label> labels{2, 0};
  CHECK(ce_loss(z, labels, 255).loss.value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  const Var sharp = tape.constant(Array({1, 3}, {60.0, 0.0, 0.0}));
  CHECK(ce_loss(sharp, std::vector<Label>{0}, 255).loss.value().item() < 1e-20);
}

TEST_CASE("cross entropy matches a per-pixel loop and ignores VOID") {
  RandomStream rng(1);
  const Array z = random_logits(rng, 2, 3, 3, 5, 2.0);
  std::vector<Label> labels(18);
  for (auto& l : labels) l = rng.uniform() < 0.3 ? 255 : static_cast<Label>(rng.below(5));
  double ref = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < 18; ++p) {
    if (labels[p] == 255) continue;
    const auto s = oracle::softmax(std::vector<double>(z.data() + p * 5, z.data() + p * 5 + 5));
    ref -= std::log(s[labels[p]]);
    ++n;
  }
  ref /= double(n);
  Tape tape;
  const CeResult r = ce_loss(tape.constant(z), labels, 255);
  CHECK(r.labeled_pixels == n);
  CHECK_FALSE(r.all_void);
  CHECK(r.loss.value().item() == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("cross entropy edge cases") {
  Tape tape;
  const Var z = tape.parameter(Array({1, 2, 3}, 0.1));
  const CeResult r = ce_loss(z, std::vector<Label>{255, 255}, 255);
  CHECK(r.all_void);
  CHECK(r.loss.value().item() == 0.0);
  CHECK_THROWS_AS(ce_loss(z, std::vector<Label>{3, 0}, 255), LossError);
  CHECK_THROWS_AS(ce_loss(z, std::vector<Label>{0}, 255), LossError);
}

TEST_CASE("cross entropy is invariant to per-pixel logit shifts") {
  RandomStream rng(2);
  Array z = random_logits(rng, 1, 2, 2, 4);
  std::vector<Label> labels{0, 1, 2, 3};
  Tape tape;
  const double a = ce_loss(tape.constant(z), labels, 255).loss.value().item();
  for (std::size_t p = 0; p < 4; ++p) {
    const double shift = 10.0 * rng.normal();
    for (std::size_t c = 0; c < 4; ++c) z[p * 4 + c] += shift;
  }
  CHECK(ce_loss(tape.constant(z), labels, 255).loss.value().item() == doctest::Approx(a).epsilon(1e-12));
}

TEST_CASE("max squares closed forms") {
  Tape tape;
  const Var uniform = tape.constant(Array({1, 1, 1, 2}, {0.5, 0.5}));
  const Var onehot = tape.constant(Array({1, 1, 1, 2}, {1.0, 0.0}));
  CHECK(max_squares_loss(uniform, 2.0).value().item() == -0.0625);
  CHECK(max_squares_loss(onehot, 2.0).value().item() == -0.125);
  CHECK_THROWS_AS(max_squares_loss(uniform, std::nan("")), LossError);
  CHECK_THROWS_AS(max_squares_loss(tape.constant(Array({2, 2}, 0.5)), 2.0), LossError);
}

TEST_CASE("max squares matches a scalar loop") {
  RandomStream rng(3);
  for (double alpha : {0.0, 1.0, 2.0}) {
    const Array p = random_simplex(rng, 2, 4, 4, 5, 1.5);
    Tape tape;
    CHECK(max_squares_loss(tape.constant(p), alpha).value().item() ==
          doctest::Approx(ms_oracle(p, alpha)).epsilon(1e-12));
  }
}

TEST_CASE("max squares is permutation invariant and minimized by one-hot maps") {
  RandomStream rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Array p = random_simplex(rng, 1, 3, 3, 4, 1.0);
    Array perm(p.shape());
    Array sharp(p.shape(), 0.0);
    for (std::size_t px = 0; px < 9; ++px) {
      const std::size_t src = 8 - px;
      std::size_t best = 0;
      for (std::size_t c = 0; c < 4; ++c) {
        perm[px * 4 + c] = p[src * 4 + (c + 1) % 4];
        if (p[px * 4 + c] > p[px * 4 + best]) best = c;
      }
      sharp[px * 4 + best] = 1.0;
    }
    Tape tape;
    const double base = max_squares_loss(tape.constant(p), 2.0).value().item();
    CHECK(max_squares_loss(tape.constant(perm), 2.0).value().item() == doctest::Approx(base).epsilon(1e-12));
    CHECK(max_squares_loss(tape.constant(sharp), 2.0).value().item() < base);
  }
}

TEST_CASE("c2f distillation scalar example") {
  const auto tree = tree_of(kOneSplit);
  const StepView v = step_view(tree, 1, LabelMode::masked);
  REQUIRE(v.class_count() == 3);
  const Array prev({1, 1, 1, 2}, {0.8, 0.2});
  Tape tape;
  const Var cur = tape.constant(Array({1, 1, 1, 3}, {0.5, 0.3, 0.2}));
  const KdTerms kd = kd_c2f_loss(prev, cur, v);
  CHECK(kd.coarse.value().item() == doctest::Approx(-0.8 * std::log(0.8)).epsilon(1e-12));
  CHECK(kd.fine.value().item() == doctest::Approx(-0.2 * std::log(0.2)).epsilon(1e-12));
  CHECK(kd.coarse.value().item() == doctest::Approx(0.17851).epsilon(1e-4));
  CHECK(kd.fine.value().item() == doctest::Approx(0.32189).epsilon(1e-4));
  const KdTerms sol = kd_c2f_loss(prev, cur, v, KdAggregation::sum_of_logs);
  CHECK(sol.coarse.value().item() == doctest::Approx(-0.8 * (std::log(0.5) + std::log(0.3))).epsilon(1e-12));
  const Array certain({1, 1, 1, 2}, {1.0, 0.0});
  const Var full = tape.constant(Array({1, 1, 1, 3}, {0.7, 0.3, 0.0}));
  CHECK(std::fabs(kd_c2f_loss(certain, full, v).coarse.value().item()) < 1e-15);
}

TEST_CASE("distillation after unbiased expansion equals the teacher entropy") {
  const auto tree = std::make_shared<const HierarchyTree>(desk::hierarchy());
  RandomStream rng(5);
  for (std::size_t t = 1; t <= tree->max_step(); ++t) {
    const auto v0 = std::make_shared<const StepView>(step_view(tree, t - 1, LabelMode::masked));
    const auto v1 = std::make_shared<const StepView>(step_view(tree, t, LabelMode::masked));
    SegModel prev = init_model(v0, rng);
    for (double& b : prev.head_b.values()) b = rng.normal();
    const Array img = random_images(rng, 2, 3, 3);
    const Array p_prev = predict(prev, img).probs;
    const Array p_cur = predict(expand_head(prev, v1, BiasMode::unbiased), img).probs;
    Tape tape;
    const KdTerms kd = kd_c2f_loss(p_prev, tape.constant(p_cur), *v1);
    double h = 0.0;
    const std::size_t k = p_prev.last_dim(), n = p_prev.size() / k;
    for (std::size_t px = 0; px < n; ++px) h += oracle::entropy(std::vector<double>(p_prev.data() + px * k, p_prev.data() + (px + 1) * k));
    CHECK(kd.coarse.value().item() + kd.fine.value().item() == doctest::Approx(h / double(n)).epsilon(1e-9));
  }
}

TEST_CASE("distillation is bounded below by the teacher entropy") {
  const auto tree = std::make_shared<const HierarchyTree>(desk::hierarchy());
  RandomStream rng(6);
  for (std::size_t t = 1; t <= tree->max_step(); ++t) {
    const StepView v = step_view(tree, t, LabelMode::masked);
    for (int trial = 0; trial < 10; ++trial) {
      const Array prev = random_simplex(rng, 1, 2, 2, v.prev_class_count());
      const Array cur = random_simplex(rng, 1, 2, 2, v.class_count());
      Tape tape;
      const KdTerms kd = kd_c2f_loss(prev, tape.constant(cur), v);
      double h = 0.0;
      const std::size_t k = prev.last_dim();
      for (std::size_t px = 0; px < 4; ++px) h += oracle::entropy(std::vector<double>(prev.data() + px * k, prev.data() + (px + 1) * k));
      CHECK(kd.coarse.value().item() + kd.fine.value().item() >= h / 4.0 - 1e-12);
    }
  }
}

TEST_CASE("distillation shape errors") {
  const auto tree = tree_of(kOneSplit);
  Tape tape;
  const Var cur = tape.constant(Array({1, 1, 1, 3}, 1.0 / 3));
  CHECK_THROWS_AS(kd_c2f_loss(Array({1, 1, 1, 3}, 1.0 / 3), cur, step_view(tree, 1, LabelMode::masked)), LossError);
  CHECK_THROWS_AS(kd_c2f_loss(Array({1, 1, 2, 2}, 0.5), cur, step_view(tree, 1, LabelMode::masked)), LossError);
  CHECK_THROWS_AS(kd_c2f_loss(Array({1, 1, 1, 2}, 0.5), cur, step_view(tree, 0, LabelMode::masked)), LossError);
}

TEST_CASE("distance variants") {
  const auto tree = tree_of(kOneSplit);
  const StepView v = step_view(tree, 1, LabelMode::masked);
  PrevOutputs prev{Array({1, 1, 1, 2}, {0.5, 0.5}), Array({1, 1, 1, 2}, {0.0, 0.0})};
  // Aggregated [0.4, 0.6].
  const std::vector<double> cur_p{0.2, 0.2, 0.6};
  Array cur_logits({1, 1, 1, 3});
  for (std::size_t c = 0; c < 3; ++c) cur_logits[c] = std::log(cur_p[c]);
  Tape tape;
  const Var z = tape.constant(cur_logits);
  CHECK(kd_variant_loss(prev, z, v, KdVariant::l1).value().item() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(kd_variant_loss(prev, z, v, KdVariant::l2).value().item() == doctest::Approx(0.01).epsilon(1e-12));
  // Logit variants: log-sum-exp of children gives [log .4, log .6].
  const double l1z = (std::fabs(std::log(0.4)) + std::fabs(std::log(0.6))) / 2.0;
  CHECK(kd_variant_loss(prev, z, v, KdVariant::l1_logits).value().item() == doctest::Approx(l1z).epsilon(1e-12));
  const double l2z = (std::log(0.4) * std::log(0.4) + std::log(0.6) * std::log(0.6)) / 2.0;
  CHECK(kd_variant_loss(prev, z, v, KdVariant::l2_logits).value().item() == doctest::Approx(l2z).epsilon(1e-12));
  PrevOutputs same{Array({1, 1, 1, 2}, {0.4, 0.6}), Array({1, 1, 1, 2}, {std::log(0.4), std::log(0.6)})};
  for (KdVariant var : {KdVariant::l1, KdVariant::l2, KdVariant::l1_logits, KdVariant::l2_logits}) {
    CHECK(std::fabs(kd_variant_loss(same, z, v, var).value().item()) < 1e-15);
  }
}

TEST_CASE("mib equals the coarse term when one class splits") {
  const auto tree = tree_of(kOneSplit);
  const StepView v = step_view(tree, 1, LabelMode::masked);
  RandomStream rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const Array prev_logits = random_logits(rng, 1, 2, 3, 2);
    Tape tape;
    const Array prev_p = softmax(tape.constant(prev_logits)).value();
    const Var z = tape.constant(random_logits(rng, 1, 2, 3, 3));
    const double mib = kd_variant_loss({prev_p, prev_logits}, z, v, KdVariant::mib).value().item();
    const double ref = kd_c2f_loss(prev_p, softmax(z), v).coarse.value().item();
    CHECK(mib == doctest::Approx(ref).epsilon(1e-12));
    const KdTerms both = kd_c2f_loss(prev_p, softmax(z), v);
    CHECK(kd_variant_loss({prev_p, prev_logits}, z, v, KdVariant::c2f).value().item() ==
          doctest::Approx(both.coarse.value().item() + both.fine.value().item()).epsilon(1e-12));
    CHECK(kd_carried_loss(prev_p, softmax(z), v).value().item() == doctest::Approx(both.fine.value().item()).epsilon(1e-12));
  }
}

TEST_CASE("mib merges every split class into one group") {
  const auto tree = std::make_shared<const HierarchyTree>(desk::hierarchy());
  const StepView v = step_view(tree, 2, LabelMode::masked);
  RandomStream rng(8);
  const Array prev_logits = random_logits(rng, 1, 1, 1, v.prev_class_count());
  Tape tape;
  const Array prev_p = softmax(tape.constant(prev_logits)).value();
  const Var z = tape.constant(random_logits(rng, 1, 1, 1, v.class_count()));
  const Array cur_p = softmax(z).value();
  double pm = 0.0, cm = 0.0;
  for (std::size_t c : v.split_origin()) {
    pm += prev_p[c];
    for (std::size_t f : v.split(c)) cm += cur_p[f];
  }
  CHECK(kd_variant_loss({prev_p, prev_logits}, z, v, KdVariant::mib).value().item() ==
        doctest::Approx(-pm * std::log(cm)).epsilon(1e-12));
}

TEST_CASE("variant names") {
  for (KdVariant var : {KdVariant::l1, KdVariant::l1_logits, KdVariant::l2, KdVariant::l2_logits, KdVariant::mib,
                        KdVariant::c2f}) {
    CHECK(kd_variant_from_string(to_string(var)) == var);
  }
  CHECK_THROWS_AS(kd_variant_from_string("l3"), LossError);
}

TEST_CASE("total loss is a weighted sum") {
  Tape tape;
  const LossTerms terms{tape.constant(Array::scalar(1.5)), tape.constant(Array::scalar(-0.25)),
                        tape.constant(Array::scalar(0.4)), tape.constant(Array::scalar(0.7))};
  LossWeights w;
  w.lambda_uda = 0.1;
  w.lambda_kd_c = 10;
  w.lambda_kd_f = 10;
  CHECK(total_loss(terms, w).value().item() == doctest::Approx(1.5 - 0.025 + 4.0 + 7.0).epsilon(1e-14));
  LossWeights zero{0, 0, 0, 2};
  CHECK(total_loss(terms, zero).value().item() == 1.5);
  const LossTerms ce_only{terms.ce, std::nullopt, std::nullopt, std::nullopt};
  CHECK(total_loss(ce_only, w).value().item() == 1.5);
  const LossWeights defaults;
  CHECK(defaults.lambda_uda == 0.1);
  CHECK(defaults.lambda_kd_f == 10.0);
  LossWeights neg;
  neg.lambda_kd_f = -1;
  CHECK_THROWS_AS(neg.validate(), LossError);
}

TEST_CASE("every loss passes a finite-difference check") {
  for (const CheckResult& r : gradient_checks(0)) CHECK_MESSAGE(r.passed, r.name << ": " << r.detail);
}
