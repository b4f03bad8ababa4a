#include "c2f/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace c2f {

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw EvalError("confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix confusion(std::span<const Label> pred, std::span<const Label> gt, std::size_t class_count,
                          Label void_id) {
  if (pred.size() != gt.size()) throw EvalError("confusion: prediction and ground truth sizes differ");
  ConfusionMatrix m(class_count);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == void_id) continue;
    if (gt[i] >= class_count || pred[i] >= class_count) {
      throw EvalError("confusion: class id out of range at pixel " + std::to_string(i));
    }
    m.add(gt[i], pred[i]);
  }
  return m;
}

IouScores iou_scores(const ConfusionMatrix& m) {
  const std::size_t n = m.classes();
  IouScores s;
  s.per_class.resize(n);
  double sum = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t tp = m.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < n; ++o) {
      if (o == c) continue;
      fn += m.at(c, o);
      fp += m.at(o, c);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    s.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += *s.per_class[c];
    ++s.counted;
  }
  s.miou = s.counted ? sum / static_cast<double>(s.counted) : 0.0;
  return s;
}

double mean_entropy(const Array& probs) {
  const std::size_t k = probs.last_dim();
  if (k == 0 || probs.empty()) throw EvalError("mean_entropy: empty map");
  const std::size_t pixels = probs.size() / k;
  double total = 0.0;
  for (std::size_t p = 0; p < pixels; ++p) {
    double h = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double v = probs[p * k + c];
      if (v > 0.0) h -= v * std::log(v);
    }
    total += h;
  }
  return total / static_cast<double>(pixels);
}

double hierarchical_consistency(const SegModel& current, const SegModel& previous, const Array& images) {
  if (images.empty() || (images.rank() == 4 && images.dim(0) == 0)) {
    throw EvalError("hierarchical_consistency: empty image set");
  }
  const StepView& view = *current.view;
  if (!view.same_tree(*previous.view) || view.step() != previous.view->step() + 1) {
    throw EvalError("hierarchical_consistency: models are not from consecutive steps of one hierarchy");
  }
  const std::vector<Label> now = argmax_labels(aggregate_probs(predict(current, images).probs, view));
  const std::vector<Label> before = argmax_labels(predict(previous, images).probs);
  std::size_t same = 0;
  for (std::size_t i = 0; i < now.size(); ++i) same += now[i] == before[i];
  return static_cast<double>(same) / static_cast<double>(now.size());
}

EvalResult evaluate(const SegModel& model, const DatasetFile& file, std::size_t batch_size) {
  if (file.count() == 0) throw EvalError("evaluate: empty dataset");
  const StepView& v = *model.view;
  const StepView full = step_view(v.tree(), v.step(), LabelMode::full, file.header.void_id);
  EvalResult r{ConfusionMatrix(full.class_count()), {}, 0.0};
  double entropy_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < file.count(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(file.count(), start + batch_size); ++i) idx.push_back(i);
    const Batch b = load_batch(file, idx, full);
    const Prediction p = predict(model, b.images);
    r.matrix += confusion(argmax_labels(p.probs), b.labels, full.class_count(), full.void_id());
    entropy_sum += mean_entropy(p.probs) * static_cast<double>(idx.size());
  }
  r.iou = iou_scores(r.matrix);
  r.entropy = entropy_sum / static_cast<double>(file.count());
  return r;
}

}  // namespace c2f
