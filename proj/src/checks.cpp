#include "c2f/checks.hpp"

#include <cmath>
#include <cstdio>
#include <memory>

#include "c2f/dataset.hpp"
#include "c2f/desk.hpp"
#include "c2f/eval.hpp"
#include "c2f/gradcheck.hpp"
#include "c2f/losses.hpp"
#include "c2f/model.hpp"

namespace c2f {

Array random_logits(RandomStream& rng, std::size_t n, std::size_t h, std::size_t w, std::size_t k, double spread) {
  Array a({n, h, w, k});
  for (double& v : a.storage()) v = spread * rng.normal();
  return a;
}

Array random_images(RandomStream& rng, std::size_t n, std::size_t h, std::size_t w) {
  Array a({n, h, w, 3});
  for (double& v : a.storage()) v = rng.uniform();
  return a;
}

Array random_simplex(RandomStream& rng, std::size_t n, std::size_t h, std::size_t w, std::size_t k, double spread) {
  Tape tape;
  return softmax(tape.constant(random_logits(rng, n, h, w, k, spread))).value();
}

namespace {

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

CheckResult from_report(std::string name, const GradCheckReport& r) {
  return {std::move(name), r.passed, "max rel err " + number(r.max_rel_error)};
}

std::vector<Label> random_labels(RandomStream& rng, std::size_t n, std::size_t k, Label void_id) {
  std::vector<Label> l(n);
  for (auto& v : l) v = rng.bernoulli(0.2) ? void_id : static_cast<Label>(rng.below(k));
  return l;
}

constexpr std::size_t kSide = 2;

/// Smallest |pre-activation| over both encoder layers.
double relu_margin(const SegModel& m, const Array& images) {
  Tape tape;
  const Var a1 = conv3x3(tape.constant(images), tape.constant(m.conv1_w), tape.constant(m.conv1_b));
  const Var a2 = conv3x3(relu(a1), tape.constant(m.conv2_w), tape.constant(m.conv2_b));
  double margin = INFINITY;
  for (const Var& a : {a1, a2})
    for (double v : a.value().values()) margin = std::min(margin, std::fabs(v));
  return margin;
}

double l1_margin(const Array& prev_probs, const Array& prev_logits, const Array& z, const StepView& view,
                 KdVariant v) {
  Tape tape;
  const Var cur = tape.constant(z);
  const std::size_t kp = view.prev_class_count();
  const Array agg = v == KdVariant::l1 ? group_sum(softmax(cur), view.parent_in_prev(), kp).value()
                                       : group_logsumexp(cur, view.parent_in_prev(), kp).value();
  const Array& ref = v == KdVariant::l1 ? prev_probs : prev_logits;
  double margin = INFINITY;
  for (std::size_t i = 0; i < agg.size(); ++i) margin = std::min(margin, std::fabs(agg[i] - ref[i]));
  return margin;
}

}  // namespace

std::vector<CheckResult> gradient_checks(std::uint64_t seed, double eps, double tol) {
  RandomStream rng = RandomStream(seed).derive("gradient-checks");
  const auto tree = std::make_shared<const HierarchyTree>(desk::hierarchy());
  std::vector<CheckResult> out;

  {
    const Array z = random_logits(rng, 2, kSide, kSide, 6);
    const auto labels = random_labels(rng, 2 * kSide * kSide, 6, kDefaultVoid);
    out.push_back(from_report("ce_loss", finite_diff_check(
        [&](Tape&, const std::vector<Var>& p) { return ce_loss(p[0], labels, kDefaultVoid).loss; }, {z}, eps, tol)));
  }
  for (double alpha : {1.0, 2.0}) {
    const Array probs = random_simplex(rng, 1, kSide, kSide, 5);
    out.push_back(from_report("max_squares_loss alpha=" + number(alpha),
                              finite_diff_check([&](Tape&, const std::vector<Var>& p) {
                                return max_squares_loss(p[0], alpha);
                              }, {probs}, eps, tol)));
  }
  for (std::size_t t = 1; t <= tree->max_step(); ++t) {
    const StepView view = step_view(tree, t, LabelMode::masked);
    const Array prev_logits = random_logits(rng, 1, kSide, kSide, view.prev_class_count());
    Tape scratch;
    const Array prev_probs = softmax(scratch.constant(prev_logits)).value();
    const Array z = random_logits(rng, 1, kSide, kSide, view.class_count());
    for (KdAggregation agg : {KdAggregation::log_of_sum, KdAggregation::sum_of_logs}) {
      const std::string tag = agg == KdAggregation::log_of_sum ? "" : " sum-of-logs";
      out.push_back(from_report("kd_c2f_loss coarse step " + std::to_string(t) + tag,
                                finite_diff_check([&](Tape&, const std::vector<Var>& p) {
                                  return kd_c2f_loss(prev_probs, softmax(p[0]), view, agg).coarse;
                                }, {z}, eps, tol)));
    }
    out.push_back(from_report("kd_c2f_loss fine step " + std::to_string(t),
                              finite_diff_check([&](Tape&, const std::vector<Var>& p) {
                                return kd_c2f_loss(prev_probs, softmax(p[0]), view).fine;
                              }, {z}, eps, tol)));
    for (KdVariant v : {KdVariant::l1, KdVariant::l1_logits, KdVariant::l2, KdVariant::l2_logits, KdVariant::mib,
                        KdVariant::c2f}) {
      Array point = z;
      if (v == KdVariant::l1 || v == KdVariant::l1_logits) {
        // Keep |difference| away from the kink of the absolute value.
        for (std::size_t attempt = 0; attempt < 1000 && l1_margin(prev_probs, prev_logits, point, view, v) < 0.01;
             ++attempt) {
          point = random_logits(rng, 1, kSide, kSide, view.class_count());
        }
      }
      out.push_back(from_report("kd_variant_loss " + std::string(to_string(v)) + " step " + std::to_string(t),
                                finite_diff_check([&](Tape&, const std::vector<Var>& p) {
                                  return kd_variant_loss({prev_probs, prev_logits}, p[0], view, v);
                                }, {point}, eps, tol)));
    }
  }
  {
    const auto view = std::make_shared<const StepView>(step_view(tree, 1, LabelMode::masked));
    RandomStream init = rng.derive("model");
    SegModel m;
    Array images;
    // Resample until no ReLU input sits within reach of a perturbation.
    for (std::size_t attempt = 0;; ++attempt) {
      m = init_model(view, init, false);
      for (Array* b : {&m.conv1_b, &m.conv2_b, &m.head_b})
        for (double& v : b->storage()) v = 0.5 * init.normal();
      images = random_images(rng, 1, 2, 2);
      if (relu_margin(m, images) > 5e-3 || attempt == 1000) break;
    }
    const auto labels = random_labels(rng, 4, view->class_count(), view->void_id());
    std::vector<Array> params;
    for (const Array* a : m.parameters()) params.push_back(*a);
    out.push_back(from_report("model + ce_loss", finite_diff_check(
        [&](Tape& tape, const std::vector<Var>& p) {
          const ModelVars vars{p[0], p[1], p[2], p[3], p[4], p[5]};
          return ce_loss(forward(vars, tape.constant(images)).logits, labels, view->void_id()).loss;
        }, params, eps, tol, SegModel::parameter_names())));
  }
  return out;
}

std::vector<CheckResult> invariant_checks(std::uint64_t seed) {
  RandomStream rng = RandomStream(seed).derive("invariant-checks");
  const auto tree = std::make_shared<const HierarchyTree>(desk::hierarchy());
  std::vector<CheckResult> out;

  {
    double worst = 0.0;
    for (std::size_t m = 0; m < 20; ++m) {
      const std::size_t t = 1 + m % tree->max_step();
      const auto prev_view = std::make_shared<const StepView>(step_view(tree, t - 1, LabelMode::masked));
      const auto view = std::make_shared<const StepView>(step_view(tree, t, LabelMode::masked));
      RandomStream init = rng.derive("model", m);
      SegModel prev = init_model(prev_view, init);
      for (double& b : prev.head_b.storage()) b = init.normal();
      const SegModel cur = expand_head(prev, view, BiasMode::unbiased);
      const Array images = random_images(rng, 2, 6, 6);
      const Array a = aggregate_probs(predict(cur, images).probs, *view);
      const Array p = predict(prev, images).probs;
      for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - p[i]));
    }
    out.push_back({"expansion conservation", worst <= 1e-9, "max deviation " + number(worst)});
  }
  {
    double worst = 0.0;
    for (std::size_t m = 0; m < 10; ++m) {
      const std::size_t t = 1 + m % tree->max_step();
      const auto prev_view = std::make_shared<const StepView>(step_view(tree, t - 1, LabelMode::masked));
      const auto view = std::make_shared<const StepView>(step_view(tree, t, LabelMode::masked));
      RandomStream init = rng.derive("kd-model", m);
      SegModel prev = init_model(prev_view, init);
      for (double& b : prev.head_b.storage()) b = init.normal();
      const SegModel cur = expand_head(prev, view, BiasMode::unbiased);
      const Array images = random_images(rng, 1, 6, 6);
      const Array pp = predict(prev, images).probs;
      Tape tape;
      const KdTerms k = kd_c2f_loss(pp, tape.constant(predict(cur, images).probs), *view);
      const double gap = std::fabs(k.coarse.value().item() + k.fine.value().item() - mean_entropy(pp));
      worst = std::max(worst, gap);
    }
    out.push_back({"kd-entropy identity", worst <= 1e-6, "max gap " + number(worst)});
  }
  {
    bool ok = true;
    for (std::size_t c = 0; c < 100 && ok; ++c) {
      const std::size_t k = 2 + rng.below(6);
      const Array p = random_simplex(rng, 1, 3, 3, k, 1.5);
      Array sharp(p.shape());
      for (std::size_t px = 0; px < p.size() / k; ++px) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
          if (p[px * k + j] > p[px * k + best]) best = j;
        sharp[px * k + best] = 1.0;
      }
      Tape tape;
      ok = max_squares_loss(tape.constant(sharp), 2.0).value().item() <
           max_squares_loss(tape.constant(p), 2.0).value().item();
    }
    out.push_back({"max-squares ordering", ok, ok ? "100 cases" : "one-hot not lower"});
  }
  {
    double worst = -1.0;
    for (std::size_t c = 0; c < 100; ++c) {
      std::vector<double> p(tree->leaf_count()), q(tree->leaf_count());
      double sp = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = rng.uniform(0.01, 1.0);
        q[i] = rng.uniform(0.01, 1.0);
        sp += p[i];
        sq += q[i];
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] /= sp;
        q[i] /= sq;
      }
      const double leaf = kl_divergence(p, q);
      for (std::size_t t = 0; t <= tree->max_step(); ++t) {
        const StepView view = step_view(tree, t, LabelMode::full);
        const double coarse = kl_divergence(coarsen_distribution(p, view), coarsen_distribution(q, view));
        worst = std::max(worst, coarse - leaf);
      }
    }
    out.push_back({"KL coarsening inequality", worst <= 1e-12, "max excess " + number(worst)});
  }
  return out;
}

}  // namespace c2f
