#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>

#include "c2f/array.hpp"
#include "c2f/hierarchy.hpp"
#include "c2f/tape.hpp"

namespace c2f {

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double lambda_uda = 0.1;
  double lambda_kd_c = 10.0;
  double lambda_kd_f = 10.0;
  /// Max-squares normalization exponent.
  double alpha = 2.0;

  void validate() const;
};

struct CeResult {
  Var loss;
  std::size_t labeled_pixels = 0;
  /// Set when every pixel was VOID; loss is then a constant 0.
  bool all_void = false;
};

/// Mean over non-VOID pixels of -log softmax(logits)[label].
/// logits: [..., K]; labels: one per pixel.
CeResult ce_loss(Var logits, std::span<const Label> labels, Label void_id);

/// Maximum-squares adaptation loss on probabilities [N,H,W,K]:
///   -(1/N) sum_images sum_pixels sum_c P[c]^2 / (2 K^alpha (HW)^(1-alpha))
Var max_squares_loss(Var probs, double alpha);

struct KdTerms {
  Var coarse;  // over classes split at this step
  Var fine;    // over carried classes
};

enum class KdAggregation {
  /// Cross-entropy against the summed child mass (default).
  log_of_sum,
  /// Compatibility reading: sum of child log-probabilities.
  sum_of_logs,
};

/// Coarse-to-fine distillation. prev_probs: [N,H,W,|C_{t-1}|] (constant),
/// cur_probs: [N,H,W,|C_t|]. Both terms are normalized by N*H*W and use a
/// log floor of 1e-12.
KdTerms kd_c2f_loss(const Array& prev_probs, Var cur_probs, const StepView& view,
                    KdAggregation aggregation = KdAggregation::log_of_sum);

enum class KdVariant { l1, l1_logits, l2, l2_logits, mib, c2f };

std::string_view to_string(KdVariant v);
KdVariant kd_variant_from_string(std::string_view s);

struct PrevOutputs {
  Array probs;   // [N,H,W,|C_{t-1}|]
  Array logits;  // same shape
};

/// Distillation variants for ablation. Distances are means over pixels and
/// channels of the previous step; logit variants aggregate current logits
/// with a per-group log-sum-exp. mib merges every split class into one group
/// and returns only that group's cross-entropy term. c2f returns coarse + fine.
Var kd_variant_loss(const PrevOutputs& prev, Var cur_logits, const StepView& view, KdVariant variant);

/// Carried-class term of kd_c2f_loss, shared by the mib preset.
Var kd_carried_loss(const Array& prev_probs, Var cur_probs, const StepView& view);

struct LossTerms {
  Var ce;
  std::optional<Var> uda;
  std::optional<Var> kd_c;
  std::optional<Var> kd_f;
};

/// ce + lambda_uda*uda + lambda_kd_c*kd_c + lambda_kd_f*kd_f; absent or
/// zero-weighted terms are skipped.
Var total_loss(const LossTerms& terms, const LossWeights& w);

}  // namespace c2f
