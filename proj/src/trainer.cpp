#include "c2f/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include <json.hpp>

#include "c2f/io.hpp"

namespace c2f {

using nlohmann::json;

namespace {
constexpr std::string_view kVersion = "c2f-lab 1.0.0";
constexpr std::size_t kPaperIterations[2] = {50000, 25000};
}  // namespace

std::size_t TrainConfig::iterations_for(std::size_t step) const {
  return iterations.at(std::min(step, iterations.size() - 1));
}

double TrainConfig::lr_for(std::size_t step) const { return lr.at(std::min(step, lr.size() - 1)); }

void TrainConfig::validate() const {
  if (iterations.empty() || lr.empty()) throw TrainError("config: iterations and lr must be non-empty");
  for (std::size_t it : iterations)
    if (it < 1) throw TrainError("config: iterations must be >= 1");
  for (double v : lr)
    if (!(v > 0.0)) throw TrainError("config: lr must be > 0");
  if (batch_size < 1) throw TrainError("config: batch_size must be >= 1");
  if (momentum < 0.0 || weight_decay < 0.0 || poly_power < 0.0) {
    throw TrainError("config: momentum, weight_decay and poly_power must be >= 0");
  }
  try {
    loss_weights.validate();
  } catch (const LossError& e) {
    throw TrainError(std::string("config: ") + e.what());
  }
}

std::string TrainConfig::to_json() const {
  json j;
  j["hierarchy"] = hierarchy;
  j["source"] = source;
  j["target"] = target;
  j["target_eval"] = target_eval;
  j["steps"] = steps;
  j["iterations"] = iterations;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["poly_power"] = poly_power;
  j["warmup_iterations"] = warmup_iterations;
  j["loss_weights"] = {{"lambda_uda", loss_weights.lambda_uda},
                       {"lambda_kd_c", loss_weights.lambda_kd_c},
                       {"lambda_kd_f", loss_weights.lambda_kd_f},
                       {"alpha", loss_weights.alpha}};
  j["bias_mode"] = std::string(to_string(bias_mode));
  j["seed"] = seed;
  j["augment"] = {{"flip", augment.flip}, {"blur", augment.blur}};
  j["label_mode"] = std::string(to_string(label_mode));
  j["kd_aggregation"] = kd_aggregation == KdAggregation::log_of_sum ? "log-of-sum" : "sum-of-logs";
  return j.dump(2);
}

std::string TrainConfig::hash() const { return io::hex64(io::fnv1a(to_json())); }

TrainConfig parse_train_config(std::string_view json_text) {
  TrainConfig c;
  try {
    const json j = json::parse(json_text);
    static const std::vector<std::string> known = {
        "hierarchy", "source",       "target",       "target_eval", "steps",     "iterations",
        "batch_size", "lr",          "momentum",     "weight_decay", "poly_power", "warmup_iterations",
        "loss_weights", "bias_mode", "seed",         "augment",     "label_mode", "kd_aggregation"};
    for (const auto& [key, val] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw TrainError("config: unknown field '" + key + "'");
      }
    }
    c.hierarchy = j.value("hierarchy", c.hierarchy);
    c.source = j.value("source", c.source);
    c.target = j.value("target", c.target);
    c.target_eval = j.value("target_eval", c.target_eval);
    c.steps = j.value("steps", c.steps);
    if (j.contains("iterations")) {
      c.iterations = j["iterations"].is_array() ? j["iterations"].get<std::vector<std::size_t>>()
                                                : std::vector<std::size_t>{j["iterations"].get<std::size_t>()};
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("lr")) {
      c.lr = j["lr"].is_array() ? j["lr"].get<std::vector<double>>() : std::vector<double>{j["lr"].get<double>()};
    }
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.poly_power = j.value("poly_power", c.poly_power);
    c.warmup_iterations = j.value("warmup_iterations", c.warmup_iterations);
    if (j.contains("loss_weights")) {
      const json& w = j["loss_weights"];
      c.loss_weights.lambda_uda = w.value("lambda_uda", c.loss_weights.lambda_uda);
      c.loss_weights.lambda_kd_c = w.value("lambda_kd_c", c.loss_weights.lambda_kd_c);
      c.loss_weights.lambda_kd_f = w.value("lambda_kd_f", c.loss_weights.lambda_kd_f);
      c.loss_weights.alpha = w.value("alpha", c.loss_weights.alpha);
    }
    if (j.contains("bias_mode")) c.bias_mode = bias_mode_from_string(j["bias_mode"].get<std::string>());
    c.seed = j.value("seed", c.seed);
    if (j.contains("augment")) {
      c.augment.flip = j["augment"].value("flip", c.augment.flip);
      c.augment.blur = j["augment"].value("blur", c.augment.blur);
    }
    if (j.contains("label_mode")) c.label_mode = label_mode_from_string(j["label_mode"].get<std::string>());
    if (j.contains("kd_aggregation")) {
      const auto s = j["kd_aggregation"].get<std::string>();
      if (s == "log-of-sum") {
        c.kd_aggregation = KdAggregation::log_of_sum;
      } else if (s == "sum-of-logs") {
        c.kd_aggregation = KdAggregation::sum_of_logs;
      } else {
        throw TrainError("config: kd_aggregation must be log-of-sum or sum-of-logs");
      }
    }
  } catch (const json::exception& e) {
    throw TrainError(std::string("config: ") + e.what());
  } catch (const std::runtime_error& e) {
    if (dynamic_cast<const TrainError*>(&e)) throw;
    throw TrainError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  try {
    return parse_train_config(io::read_text(path));
  } catch (const TrainError& e) {
    throw TrainError(path + ": " + e.what());
  }
}

MethodPreset preset_from_name(std::string_view name) {
  MethodPreset p;
  p.name = std::string(name);
  if (name == "source-only") return p;
  if (name == "msiw") {
    p.use_uda = true;
    return p;
  }
  if (name == "mib") {
    p.use_kd = true;
    p.kd_variant = KdVariant::mib;
    return p;
  }
  if (name == "skdc") {
    p.use_kd = true;
    return p;
  }
  if (name == "ccda") {
    p.use_uda = true;
    p.use_kd = true;
    p.kd_domain = KdDomain::target;
    return p;
  }
  throw TrainError("unknown method '" + std::string(name) + "' (expected source-only|msiw|mib|skdc|ccda)");
}

std::vector<std::string> preset_names() { return {"source-only", "msiw", "mib", "skdc", "ccda"}; }

double poly_lr(double lr0, std::size_t iter, std::size_t max_iter, double power) {
  if (max_iter == 0) throw TrainError("poly_lr: max_iter must be > 0");
  if (iter > max_iter) throw TrainError("poly_lr: iteration beyond max_iter");
  return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

void sgd_update(std::span<Array* const> params, std::span<const Array> grads, OptimizerState& state, double lr,
                double momentum, double weight_decay) {
  if (params.size() != grads.size()) throw TrainError("sgd_update: parameter/gradient count mismatch");
  if (state.momentum.empty()) {
    for (const Array* p : params) state.momentum.emplace_back(p->shape());
  }
  if (state.momentum.size() != params.size()) throw TrainError("sgd_update: optimizer state size mismatch");
  for (std::size_t b = 0; b < params.size(); ++b) {
    Array& p = *params[b];
    Array& buf = state.momentum[b];
    const Array& g = grads[b];
    if (p.shape() != g.shape() || buf.shape() != p.shape()) {
      throw TrainError("sgd_update: shape mismatch in block " + std::to_string(b));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw TrainError("non-finite gradient in parameter block " + std::to_string(b) + " element " +
                         std::to_string(i) + " at optimizer iteration " + std::to_string(state.iteration));
      }
      const double step = g[i] + weight_decay * p[i];
      buf[i] = momentum * buf[i] + step;
      p[i] -= lr * buf[i];
    }
  }
  ++state.iteration;
}

std::shared_ptr<const StepView> ExperimentData::view(std::size_t step, LabelMode mode) const {
  const Label void_id = source ? source->header.void_id : kDefaultVoid;
  return std::make_shared<const StepView>(step_view(tree, step, mode, void_id));
}

namespace {

void check_matches(const DatasetFile& f, const HierarchyTree& tree, const std::string& what) {
  for (Label l : f.labels) {
    if (l != f.header.void_id && l >= tree.leaf_count()) {
      throw TrainError(what + ": label " + std::to_string(l) + " is not a leaf of the hierarchy (" +
                       std::to_string(tree.leaf_count()) + " leaves)");
    }
  }
}

std::shared_ptr<const DatasetFile> load_checked(const std::string& path, const HierarchyTree& tree,
                                                const std::string& what) {
  auto f = std::make_shared<const DatasetFile>(load_dataset(path));
  check_matches(*f, tree, what + " '" + path + "'");
  return f;
}

}  // namespace

ExperimentData load_experiment_data(const TrainConfig& config, const MethodPreset& preset) {
  ExperimentData d;
  if (config.hierarchy.empty()) throw TrainError("config: hierarchy path is required");
  if (config.source.empty()) throw TrainError("config: source dataset path is required");
  d.tree = std::make_shared<const HierarchyTree>(load_hierarchy(config.hierarchy));
  d.source = load_checked(config.source, *d.tree, "source dataset");
  if (preset.needs_target()) {
    if (config.target.empty()) throw TrainError("method '" + preset.name + "' needs a target dataset");
    d.target = std::make_shared<const DatasetFile>(load_dataset(config.target));
  }
  if (!config.target_eval.empty()) d.target_eval = load_checked(config.target_eval, *d.tree, "target eval dataset");
  return d;
}


namespace {

std::vector<std::size_t> draw_indices(RandomStream& rng, std::size_t count, std::size_t n) {
  if (count == 0) throw TrainError("cannot draw a batch from an empty dataset");
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.below(count));
  return idx;
}

double scalar_of(const std::optional<Var>& v) { return v ? v->value().item() : 0.0; }

}  // namespace

StepOutput run_step(const TrainConfig& config, const MethodPreset& preset, std::size_t step,
                    const Checkpoint* previous, const ExperimentData& data) {
  config.validate();
  if (!data.tree || !data.source) throw TrainError("run_step: hierarchy and source data are required");
  if (step > data.tree->max_step()) {
    throw TrainError("run_step: step " + std::to_string(step) + " beyond hierarchy depth " +
                     std::to_string(data.tree->max_step()));
  }
  if (step == 0 && previous) throw TrainError("run_step: step 0 takes no previous checkpoint");
  if (step > 0 && !previous) {
    throw TrainError("run_step: step " + std::to_string(step) + " requires the step " + std::to_string(step - 1) +
                     " checkpoint");
  }
  if (previous && previous->meta.step + 1 != step) {
    throw TrainError("run_step: previous checkpoint is from step " + std::to_string(previous->meta.step));
  }
  if (preset.needs_target() && !data.target) throw TrainError("method '" + preset.name + "' needs target images");

  const auto view = data.view(step, config.label_mode);
  const RandomStream root = RandomStream(config.seed).derive("step", step);
  RandomStream init_rng = root.derive("init");
  RandomStream batch_rng = root.derive("batch");
  RandomStream target_rng = root.derive("target-batch");
  RandomStream aug_src = root.derive("augment");
  RandomStream aug_tgt = root.derive("augment-target");

  SegModel model = step == 0 ? init_model(view, init_rng) : expand_head(previous->model, view, config.bias_mode);
  const SegModel* teacher = (preset.use_kd && previous) ? &previous->model : nullptr;
  const bool kd_on_target = teacher && preset.kd_domain == KdDomain::target;

  LossWeights weights = config.loss_weights;
  if (preset.kd_variant == KdVariant::mib) weights.lambda_kd_c = weights.lambda_kd_f;

  StepOutput out;
  out.used_previous = previous != nullptr;
  const std::size_t max_iter = config.iterations_for(step);
  const double lr0 = config.lr_for(step);
  OptimizerState opt;
  const auto names = SegModel::parameter_names();
  out.log.reserve(max_iter);

  for (std::size_t it = 0; it < max_iter; ++it) {
    const double lr = poly_lr(lr0, it, max_iter, config.poly_power);
    const auto src_idx = draw_indices(batch_rng, data.source->count(), config.batch_size);
    const Batch src = load_batch(*data.source, src_idx, *view, config.augment, &aug_src);

    const bool uda_on = preset.use_uda && it >= config.warmup_iterations;
    Batch tgt;
    if (uda_on || kd_on_target) {
      const auto tgt_idx = draw_indices(target_rng, data.target->count(), config.batch_size);
      tgt = load_images(*data.target, tgt_idx, config.augment, &aug_tgt);
      out.used_target_images = true;
    }

    Tape tape;
    const ModelVars vars = bind(tape, model, true);
    const ForwardVars fs = forward(vars, tape.constant(src.images));
    LossTerms terms{ce_loss(fs.logits, src.labels, view->void_id()).loss, {}, {}, {}};

    std::optional<Var> tgt_probs;
    std::optional<ForwardVars> ft;
    if (uda_on || kd_on_target) {
      ft = forward(vars, tape.constant(tgt.images));
      tgt_probs = softmax(ft->logits);
    }
    if (uda_on) terms.uda = max_squares_loss(*tgt_probs, weights.alpha);

    if (teacher) {
      const Array& kd_images = kd_on_target ? tgt.images : src.images;
      const Var kd_logits = kd_on_target ? ft->logits : fs.logits;
      const Var kd_probs = kd_on_target ? *tgt_probs : softmax(fs.logits);
      const Prediction prev = predict(*teacher, kd_images);
      switch (preset.kd_variant) {
        case KdVariant::c2f: {
          const KdTerms k = kd_c2f_loss(prev.probs, kd_probs, *view, config.kd_aggregation);
          terms.kd_c = k.coarse;
          terms.kd_f = k.fine;
          break;
        }
        case KdVariant::mib:
          terms.kd_c = kd_variant_loss({prev.probs, prev.logits}, kd_logits, *view, KdVariant::mib);
          terms.kd_f = kd_carried_loss(prev.probs, kd_probs, *view);
          break;
        default:
          terms.kd_c = kd_variant_loss({prev.probs, prev.logits}, kd_logits, *view, preset.kd_variant);
          break;
      }
    }

    const Var total = total_loss(terms, weights);
    const std::vector<Array> grads = backward(tape, total);
    for (std::size_t b = 0; b < grads.size(); ++b) {
      if (!grads[b].all_finite()) {
        throw TrainError("non-finite gradient in " + names[b] + " at step " + std::to_string(step) + " iteration " +
                         std::to_string(it) + " (loss " + std::to_string(total.value().item()) + ")");
      }
    }
    auto params = model.parameters();
    sgd_update(params, grads, opt, lr, config.momentum, config.weight_decay);

    out.log.push_back({it, lr, terms.ce.value().item(), scalar_of(terms.uda), scalar_of(terms.kd_c),
                       scalar_of(terms.kd_f), total.value().item()});
  }

  out.checkpoint.model = std::move(model);
  out.checkpoint.meta.step = step;
  out.checkpoint.meta.iteration = max_iter;
  out.checkpoint.meta.seed = config.seed;
  out.checkpoint.meta.method = preset.name;
  out.checkpoint.meta.config_hash = config.hash();
  out.checkpoint.meta.param_hash = parameter_hash(out.checkpoint.model);
  return out;
}

std::optional<EvalResult> evaluate_step(const SegModel& model, const ExperimentData& data) {
  if (!data.target_eval) return std::nullopt;
  return evaluate(model, *data.target_eval);
}

ExperimentResult run_experiment(const TrainConfig& config, const MethodPreset& preset, const ExperimentData& data) {
  const std::size_t depth = data.tree->max_step() + 1;
  const std::size_t steps = config.steps == 0 ? depth : config.steps;
  if (steps > depth) {
    throw TrainError("config: steps=" + std::to_string(steps) + " but the hierarchy has " + std::to_string(depth));
  }
  ExperimentResult r;
  r.report.method = preset.name;
  r.report.seed = config.seed;
  r.report.config_hash = config.hash();
  for (std::size_t t = 0; t < steps; ++t) {
    const Checkpoint* prev = t == 0 ? nullptr : &r.checkpoints.back();
    StepOutput o = run_step(config, preset, t, prev, data);
    StepReport sr;
    sr.step = t;
    sr.eval = evaluate_step(o.checkpoint.model, data);
    const StepView full = step_view(data.tree, t, LabelMode::full);
    for (std::size_t c = 0; c < full.class_count(); ++c) sr.class_names.push_back(full.class_name(c));
    r.report.iterations.push_back(config.iterations_for(t));
    r.report.previous_checkpoint_used.push_back(o.used_previous);
    r.report.steps.push_back(std::move(sr));
    r.checkpoints.push_back(std::move(o.checkpoint));
    r.logs.push_back(std::move(o.log));
  }
  return r;
}

ExperimentResult run_experiment(const TrainConfig& config, const MethodPreset& preset) {
  return run_experiment(config, preset, load_experiment_data(config, preset));
}

namespace {

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::string ExperimentReport::to_json() const {
  json j;
  j["version"] = std::string(kVersion);
  j["method"] = method;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["iterations"] = iterations;
  bool paper_scale = !iterations.empty();
  for (std::size_t t = 0; t < iterations.size(); ++t) {
    paper_scale = paper_scale && iterations[t] >= kPaperIterations[std::min<std::size_t>(t, 1)];
  }
  j["schedule"] = paper_scale ? "paper-scale" : "desk-scale";
  j["miou_rule"] = "classes with TP+FP+FN = 0 are excluded from the mean";
  j["target_labels_read_during_training"] = target_labels_read;
  j["previous_checkpoint_used"] = previous_checkpoint_used;
  json arr = json::array();
  for (const StepReport& s : steps) {
    json e;
    e["step"] = s.step;
    e["classes"] = s.class_names;
    if (s.eval) {
      e["miou"] = s.eval->iou.miou;
      e["counted_classes"] = s.eval->iou.counted;
      e["mean_entropy"] = s.eval->entropy;
      json per = json::array();
      for (const auto& v : s.eval->iou.per_class) per.push_back(optional_number(v));
      e["iou"] = per;
    } else {
      e["miou"] = nullptr;
    }
    arr.push_back(e);
  }
  j["steps"] = arr;
  return j.dump(2);
}

std::string ExperimentReport::summary_csv(bool header) const {
  std::string s;
  if (header) {
    s += "method";
    for (const StepReport& r : steps) s += ",mIoU_" + std::to_string(r.step);
    s += "\n";
  }
  s += method;
  for (const StepReport& r : steps) s += "," + (r.eval ? fmt(100.0 * r.eval->iou.miou, "%.2f") : std::string());
  s += "\n";
  return s;
}

std::string ExperimentReport::per_class_csv(const HierarchyTree& tree) const {
  std::string s = "step";
  for (std::size_t leaf : tree.leaves()) s += "," + tree.node(leaf).name;
  s += ",mIoU\n";
  const auto shared = std::make_shared<const HierarchyTree>(tree);
  for (const StepReport& r : steps) {
    s += std::to_string(r.step);
    const StepView full = step_view(shared, r.step, LabelMode::full);
    for (std::size_t leaf : tree.leaves()) {
      s += ",";
      if (!r.eval) continue;
      const auto c = full.class_of_node(tree.ancestor_at(leaf, r.step)).value();
      const auto& v = r.eval->iou.per_class.at(c);
      if (v) s += fmt(100.0 * *v, "%.2f");
    }
    s += "," + (r.eval ? fmt(100.0 * r.eval->iou.miou, "%.2f") : std::string()) + "\n";
  }
  return s;
}

std::string log_csv(const std::vector<LogRow>& log) {
  std::string s = "iteration,lr,loss_ce,loss_uda,loss_kd_c,loss_kd_f,loss_total\n";
  for (const LogRow& r : log) {
    s += std::to_string(r.iteration);
    for (double v : {r.lr, r.ce, r.uda, r.kd_c, r.kd_f, r.total}) s += "," + fmt(v, "%.17g");
    s += "\n";
  }
  return s;
}

void write_experiment(const ExperimentResult& result, const TrainConfig& config, const HierarchyTree& tree,
                      const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  json manifest;
  manifest["version"] = std::string(kVersion);
  manifest["method"] = result.report.method;
  manifest["seed"] = config.seed;
  manifest["config_hash"] = config.hash();
  manifest["config"] = json::parse(config.to_json());
  manifest["hierarchy_fingerprint"] = io::hex64(tree.fingerprint());
  json files = json::array();
  for (std::size_t t = 0; t < result.checkpoints.size(); ++t) {
    const std::string ck = "step" + std::to_string(t) + ".c2fm";
    const std::string lg = "step" + std::to_string(t) + "_log.csv";
    save_checkpoint(result.checkpoints[t], (fs::path(out_dir) / ck).string());
    io::write_text((fs::path(out_dir) / lg).string(), log_csv(result.logs[t]));
    files.push_back({{"step", t}, {"checkpoint", ck}, {"log", lg},
                     {"param_hash", result.checkpoints[t].meta.param_hash}});
  }
  io::write_text((fs::path(out_dir) / "report.json").string(), result.report.to_json());
  io::write_text((fs::path(out_dir) / "summary.csv").string(), result.report.summary_csv());
  io::write_text((fs::path(out_dir) / "per_class.csv").string(), result.report.per_class_csv(tree));
  manifest["steps"] = files;
  io::write_text((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2));
}

}  // namespace c2f
