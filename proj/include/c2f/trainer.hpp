#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "c2f/dataset.hpp"
#include "c2f/eval.hpp"
#include "c2f/hierarchy.hpp"
#include "c2f/losses.hpp"
#include "c2f/model.hpp"

namespace c2f {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::string hierarchy;
  std::string source;
  std::string target;
  std::string target_eval;
  /// Number of steps to run; 0 means every step of the hierarchy.
  std::size_t steps = 0;
  /// Iterations per step; the last entry repeats for later steps.
  std::vector<std::size_t> iterations{2000, 1000};
  std::size_t batch_size = 2;
  /// Initial learning rate per step; the last entry repeats.
  std::vector<double> lr{2.5e-4, 1e-4};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double poly_power = 0.9;
  std::size_t warmup_iterations = 100;
  LossWeights loss_weights;
  BiasMode bias_mode = BiasMode::unbiased;
  std::uint64_t seed = 0;
  AugmentFlags augment{true, true};
  LabelMode label_mode = LabelMode::masked;
  KdAggregation kd_aggregation = KdAggregation::log_of_sum;

  std::size_t iterations_for(std::size_t step) const;
  double lr_for(std::size_t step) const;
  void validate() const;
  /// Canonical JSON (stable key order); hash() is FNV-1a of this text.
  std::string to_json() const;
  std::string hash() const;
};

TrainConfig parse_train_config(std::string_view json_text);
TrainConfig load_train_config(const std::string& path);

enum class KdDomain { source, target };

struct MethodPreset {
  std::string name;
  bool use_uda = false;
  bool use_kd = false;
  KdDomain kd_domain = KdDomain::source;
  KdVariant kd_variant = KdVariant::c2f;

  bool needs_target() const { return use_uda || (use_kd && kd_domain == KdDomain::target); }
};

/// source-only | msiw | mib | skdc | ccda
MethodPreset preset_from_name(std::string_view name);
std::vector<std::string> preset_names();

double poly_lr(double lr0, std::size_t iter, std::size_t max_iter, double power);

struct OptimizerState {
  std::vector<Array> momentum;
  std::size_t iteration = 0;
};

/// g = grad + wd * param; buf = momentum * buf + g; param -= lr * buf.
void sgd_update(std::span<Array* const> params, std::span<const Array> grads, OptimizerState& state, double lr,
                double momentum, double weight_decay);

struct LogRow {
  std::size_t iteration = 0;
  double lr = 0.0;
  double ce = 0.0;
  double uda = 0.0;
  double kd_c = 0.0;
  double kd_f = 0.0;
  double total = 0.0;
};

/// Datasets and hierarchy shared by every step of an experiment.
struct ExperimentData {
  std::shared_ptr<const HierarchyTree> tree;
  std::shared_ptr<const DatasetFile> source;
  std::shared_ptr<const DatasetFile> target;       // unlabeled use only
  std::shared_ptr<const DatasetFile> target_eval;  // labels used for scoring only

  std::shared_ptr<const StepView> view(std::size_t step, LabelMode mode) const;
};

/// Loads the files named by the config. The target training split is only
/// required when the preset uses it.
ExperimentData load_experiment_data(const TrainConfig& config, const MethodPreset& preset);

struct StepOutput {
  Checkpoint checkpoint;
  std::vector<LogRow> log;
  bool used_previous = false;
  bool used_target_images = false;
};

StepOutput run_step(const TrainConfig& config, const MethodPreset& preset, std::size_t step,
                    const Checkpoint* previous, const ExperimentData& data);

struct StepReport {
  std::size_t step = 0;
  std::optional<EvalResult> eval;
  std::vector<std::string> class_names;
};

struct ExperimentReport {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::size_t> iterations;
  std::vector<StepReport> steps;
  bool target_labels_read = false;
  std::vector<bool> previous_checkpoint_used;

  std::string to_json() const;
  /// One row: method, mIoU_0..mIoU_T.
  std::string summary_csv(bool header = true) const;
  /// Per-leaf IoU table; a leaf takes the IoU of its step class.
  std::string per_class_csv(const HierarchyTree& tree) const;
};

struct ExperimentResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<std::vector<LogRow>> logs;
  ExperimentReport report;
};

ExperimentResult run_experiment(const TrainConfig& config, const MethodPreset& preset, const ExperimentData& data);
ExperimentResult run_experiment(const TrainConfig& config, const MethodPreset& preset);
/// Scores one checkpoint on the evaluation split (nullopt without one).
std::optional<EvalResult> evaluate_step(const SegModel& model, const ExperimentData& data);

std::string log_csv(const std::vector<LogRow>& log);
/// Writes checkpoints, logs, reports and a manifest under out_dir.
void write_experiment(const ExperimentResult& result, const TrainConfig& config, const HierarchyTree& tree,
                      const std::string& out_dir);

}  // namespace c2f
