#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "c2f/array.hpp"
#include "c2f/dataset.hpp"
#include "c2f/hierarchy.hpp"
#include "c2f/model.hpp"

namespace c2f {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rows are ground truth, columns prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : n_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return n_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }
  void add(std::size_t gt, std::size_t pred, std::uint64_t count = 1) { counts_[gt * n_ + pred] += count; }
  std::uint64_t total() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion(std::span<const Label> pred, std::span<const Label> gt, std::size_t class_count,
                          Label void_id);

struct IouScores {
  /// IoU per class; nullopt where TP+FP+FN == 0 (excluded from the mean).
  std::vector<std::optional<double>> per_class;
  double miou = 0.0;
  std::size_t counted = 0;
};

IouScores iou_scores(const ConfusionMatrix& m);

/// Mean over pixels of -sum_c P log P (0 log 0 = 0).
double mean_entropy(const Array& probs);

/// Fraction of pixels where the aggregated step-t argmax equals the step-(t-1) argmax.
double hierarchical_consistency(const SegModel& current, const SegModel& previous, const Array& images);

struct EvalResult {
  ConfusionMatrix matrix;
  IouScores iou;
  double entropy = 0.0;
};

/// Scores a model on every sample of a labeled file under its step's
/// full-label view. Batched inference; integer accumulation in index order.
EvalResult evaluate(const SegModel& model, const DatasetFile& file, std::size_t batch_size = 16);

}  // namespace c2f
