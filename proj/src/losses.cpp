#include "c2f/losses.hpp"

#include <cmath>
#include <string>

namespace c2f {

void LossWeights::validate() const {
  if (!(lambda_uda >= 0.0 && lambda_kd_c >= 0.0 && lambda_kd_f >= 0.0)) {
    throw LossError("loss weights must be non-negative");
  }
  if (!std::isfinite(alpha)) throw LossError("max-squares alpha must be finite");
}

CeResult ce_loss(Var logits, std::span<const Label> labels, Label void_id) {
  const Array& z = logits.value();
  const std::size_t k = z.last_dim();
  if (z.size() / std::max<std::size_t>(k, 1) != labels.size()) {
    throw LossError("ce_loss: " + std::to_string(labels.size()) + " labels for logits " + shape_string(z.shape()));
  }
  Array weights(z.shape());
  std::size_t count = 0;
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const Label l = labels[p];
    if (l == void_id) continue;
    if (l >= k) throw LossError("ce_loss: label " + std::to_string(l) + " >= class count " + std::to_string(k));
    weights[p * k + l] = 1.0;
    ++count;
  }
  CeResult r;
  r.labeled_pixels = count;
  if (count == 0) {
    r.all_void = true;
    r.loss = logits.tape->constant(Array::scalar(0.0));
    return r;
  }
  r.loss = weighted_sum(log_softmax(logits), weights, -1.0 / static_cast<double>(count));
  return r;
}

Var max_squares_loss(Var probs, double alpha) {
  if (!std::isfinite(alpha)) throw LossError("max_squares_loss: alpha must be finite");
  const Shape& s = probs.shape();
  if (s.size() != 4) throw LossError("max_squares_loss: expected [N,H,W,K], got " + shape_string(s));
  const double n = static_cast<double>(s[0]);
  const double hw = static_cast<double>(s[1] * s[2]);
  const double k = static_cast<double>(s[3]);
  const double coeff = 1.0 / (2.0 * std::pow(k, alpha) * std::pow(hw, 1.0 - alpha));
  return weighted_sum(square(probs), Array(s, 1.0), -coeff / n);
}

namespace {

void check_kd_shapes(const Array& prev, const Array& cur, const StepView& view) {
  if (view.step() == 0) throw LossError("distillation needs a step > 0 view");
  if (prev.rank() != cur.rank() || prev.rank() < 1) throw LossError("distillation: rank mismatch");
  for (std::size_t a = 0; a + 1 < prev.rank(); ++a) {
    if (prev.dim(a) != cur.dim(a)) throw LossError("distillation: spatial/batch shape mismatch");
  }
  if (prev.last_dim() != view.prev_class_count() || cur.last_dim() != view.class_count()) {
    throw LossError("distillation: channel counts " + std::to_string(prev.last_dim()) + "/" +
                    std::to_string(cur.last_dim()) + " do not match view (" + std::to_string(view.prev_class_count()) +
                    "/" + std::to_string(view.class_count()) + ")");
  }
}

constexpr double kLogFloor = 1e-12;

/// prev_probs restricted to the given previous-step channels.
Array masked_weights(const Array& prev, const std::vector<std::size_t>& channels) {
  Array w(prev.shape());
  const std::size_t kp = prev.last_dim();
  for (std::size_t p = 0; p < prev.size() / kp; ++p)
    for (std::size_t c : channels) w[p * kp + c] = prev[p * kp + c];
  return w;
}

double pixel_count(const Array& a) { return static_cast<double>(a.size() / a.last_dim()); }

}  // namespace

KdTerms kd_c2f_loss(const Array& prev_probs, Var cur_probs, const StepView& view, KdAggregation aggregation) {
  check_kd_shapes(prev_probs, cur_probs.value(), view);
  const double n = pixel_count(prev_probs);
  const std::size_t kp = view.prev_class_count();
  Var log_agg = log(group_sum(cur_probs, view.parent_in_prev(), kp), kLogFloor);
  KdTerms t;
  t.fine = weighted_sum(log_agg, masked_weights(prev_probs, view.carried()), -1.0 / n);
  if (aggregation == KdAggregation::log_of_sum) {
    t.coarse = weighted_sum(log_agg, masked_weights(prev_probs, view.split_origin()), -1.0 / n);
  } else {
    const std::size_t k = view.class_count();
    Array w(cur_probs.shape());
    for (std::size_t p = 0; p < w.size() / k; ++p)
      for (std::size_t f = 0; f < k; ++f)
        if (!view.is_carried(f)) w[p * k + f] = prev_probs[p * kp + view.parent_in_prev()[f]];
    t.coarse = weighted_sum(log(cur_probs, kLogFloor), w, -1.0 / n);
  }
  return t;
}

Var kd_carried_loss(const Array& prev_probs, Var cur_probs, const StepView& view) {
  return kd_c2f_loss(prev_probs, cur_probs, view).fine;
}

std::string_view to_string(KdVariant v) {
  switch (v) {
    case KdVariant::l1: return "l1";
    case KdVariant::l1_logits: return "l1-logits";
    case KdVariant::l2: return "l2";
    case KdVariant::l2_logits: return "l2-logits";
    case KdVariant::mib: return "mib";
    case KdVariant::c2f: return "c2f";
  }
  return "c2f";
}

KdVariant kd_variant_from_string(std::string_view s) {
  for (KdVariant v : {KdVariant::l1, KdVariant::l1_logits, KdVariant::l2, KdVariant::l2_logits, KdVariant::mib,
                      KdVariant::c2f}) {
    if (to_string(v) == s) return v;
  }
  throw LossError("unknown distillation variant '" + std::string(s) + "'");
}

Var kd_variant_loss(const PrevOutputs& prev, Var cur_logits, const StepView& view, KdVariant variant) {
  check_kd_shapes(prev.probs, cur_logits.value(), view);
  Tape& tape = *cur_logits.tape;
  const std::size_t kp = view.prev_class_count();
  switch (variant) {
    case KdVariant::l1:
    case KdVariant::l2: {
      Var diff = sub(group_sum(softmax(cur_logits), view.parent_in_prev(), kp), tape.constant(prev.probs));
      return mean(variant == KdVariant::l1 ? abs(diff) : square(diff));
    }
    case KdVariant::l1_logits:
    case KdVariant::l2_logits: {
      if (prev.logits.shape() != prev.probs.shape()) throw LossError("kd_variant_loss: previous logits missing");
      Var diff = sub(group_logsumexp(cur_logits, view.parent_in_prev(), kp), tape.constant(prev.logits));
      return mean(variant == KdVariant::l1_logits ? abs(diff) : square(diff));
    }
    case KdVariant::mib: {
      // Group 0 collects every new class; carried classes keep their own group.
      const std::size_t k = view.class_count();
      std::vector<std::size_t> group(k);
      std::size_t next = 1;
      for (std::size_t f = 0; f < k; ++f) group[f] = view.is_carried(f) ? next++ : 0;
      Var log_agg = log(group_sum(softmax(cur_logits), group, next), kLogFloor);
      Array w(log_agg.shape());
      for (std::size_t p = 0; p < w.size() / next; ++p) {
        double mass = 0.0;
        for (std::size_t c : view.split_origin()) mass += prev.probs[p * kp + c];
        w[p * next] = mass;
      }
      return weighted_sum(log_agg, w, -1.0 / pixel_count(prev.probs));
    }
    case KdVariant::c2f: {
      KdTerms t = kd_c2f_loss(prev.probs, softmax(cur_logits), view);
      return add(t.coarse, t.fine);
    }
  }
  throw LossError("kd_variant_loss: unknown variant");
}

Var total_loss(const LossTerms& terms, const LossWeights& w) {
  Var total = terms.ce;
  auto add_term = [&](const std::optional<Var>& term, double lambda) {
    if (term && lambda != 0.0) total = add(total, scale(*term, lambda));
  };
  add_term(terms.uda, w.lambda_uda);
  add_term(terms.kd_c, w.lambda_kd_c);
  add_term(terms.kd_f, w.lambda_kd_f);
  return total;
}

}  // namespace c2f
