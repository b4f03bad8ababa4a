#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "c2f/checks.hpp"
#include "c2f/dataset.hpp"
#include "c2f/desk.hpp"
#include "c2f/hierarchy.hpp"
#include "c2f/io.hpp"
#include "c2f/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "c2f-lab 1.0.0";

std::uint64_t effective_seed(std::uint64_t flag) {
  if (const char* env = std::getenv("C2F_SEED"); env && *env) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw std::runtime_error(std::string("C2F_SEED is not an unsigned integer: ") + env);
    }
  }
  return flag;
}

void write_manifest(const fs::path& dir, const std::string& command, json details) {
  details["tool"] = kToolVersion;
  details["command"] = command;
  details["compiler"] = __VERSION__;
  c2f::io::write_text((dir / "manifest.json").string(), details.dump(2) + "\n");
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) {
      const std::size_t n = std::stoul(s);
      return {n, n};
    }
    return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw CLI::ValidationError("--size", "expected N or HxW, got '" + s + "'");
  }
}

std::string fixed(double v, int digits = 4) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---- gen-data -----------------------------------------------------------

struct GenArgs {
  std::string spec, hierarchy, out = "desk_data";
  std::size_t count = 600, eval_count = 0;
  std::string size = "32";
  std::uint64_t seed = 0;
};

int cmd_gen_data(const GenArgs& a) {
  const auto [h, w] = parse_size(a.size);
  const std::uint64_t seed = effective_seed(a.seed);
  json details{{"seed", seed}, {"count", a.count}, {"height", h}, {"width", w}};
  if (a.spec.empty()) {
    c2f::desk::Sizes sizes{h, w, a.count, a.count, a.eval_count};
    const auto files = c2f::desk::write_benchmark(a.out, sizes, seed);
    details["eval_count"] = a.eval_count;
    json outputs = json::array({files.hierarchy, files.source, files.target});
    if (!files.target_eval.empty()) outputs.push_back(files.target_eval);
    details["outputs"] = outputs;
    for (const auto& f : outputs) std::cout << f.get<std::string>() << "\n";
    write_manifest(a.out, "gen-data", details);
    return 0;
  }
  if (a.hierarchy.empty()) throw CLI::ValidationError("--hierarchy", "required together with --spec");
  const c2f::DomainSpec spec = c2f::load_domain_spec(a.spec);
  const c2f::HierarchyTree tree = c2f::load_hierarchy(a.hierarchy);
  const c2f::DatasetFile file = c2f::generate_dataset(spec, tree, a.count, h, w, seed);
  c2f::save_dataset(file, a.out);
  details["spec"] = a.spec;
  details["hierarchy"] = a.hierarchy;
  details["outputs"] = json::array({a.out});
  const fs::path parent = fs::path(a.out).parent_path();
  write_manifest(parent.empty() ? fs::path(".") : parent, "gen-data", details);
  std::cout << a.out << "\n";
  return 0;
}

// ---- train --------------------------------------------------------------

struct TrainArgs {
  std::string config, method, out_dir = "runs";
  std::optional<std::uint64_t> seed;
};

c2f::TrainConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_flag) {
  c2f::TrainConfig config = c2f::load_train_config(path);
  config.seed = effective_seed(seed_flag.value_or(config.seed));
  // Relative dataset paths resolve against the working directory.
  return config;
}

int cmd_train(const TrainArgs& a) {
  const c2f::TrainConfig config = load_config(a.config, a.seed);
  const c2f::MethodPreset preset = c2f::preset_from_name(a.method);
  const c2f::ExperimentData data = c2f::load_experiment_data(config, preset);
  const c2f::ExperimentResult result = c2f::run_experiment(config, preset, data);
  c2f::write_experiment(result, config, *data.tree, a.out_dir);
  std::cout << result.report.summary_csv();
  return 0;
}

// ---- ablate -------------------------------------------------------------

struct AblateArgs {
  std::string config, what, out_dir;
  std::optional<std::uint64_t> seed;
};

int cmd_ablate(const AblateArgs& a) {
  c2f::TrainConfig config = load_config(a.config, a.seed);
  struct Row {
    std::string name;
    c2f::MethodPreset preset;
    c2f::BiasMode bias;
  };
  std::vector<Row> rows;
  if (a.what == "kd-variant") {
    for (c2f::KdVariant v : {c2f::KdVariant::l1, c2f::KdVariant::l1_logits, c2f::KdVariant::l2,
                             c2f::KdVariant::l2_logits, c2f::KdVariant::mib, c2f::KdVariant::c2f}) {
      c2f::MethodPreset p = c2f::preset_from_name("skdc");
      p.kd_variant = v;
      p.name = "skdc/" + std::string(c2f::to_string(v));
      rows.push_back({std::string(c2f::to_string(v)), p, config.bias_mode});
    }
  } else {
    for (const char* m : {"source-only", "skdc"}) {
      for (c2f::BiasMode b : {c2f::BiasMode::naive, c2f::BiasMode::unbiased}) {
        c2f::MethodPreset p = c2f::preset_from_name(m);
        p.name = std::string(m) + "/" + std::string(c2f::to_string(b));
        rows.push_back({p.name, p, b});
      }
    }
  }
  c2f::MethodPreset any = rows.front().preset;
  const c2f::ExperimentData data = c2f::load_experiment_data(config, any);
  std::string table;
  json details{{"seed", config.seed}, {"config_hash", config.hash()}, {"what", a.what}};
  json results = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    c2f::TrainConfig c = config;
    c.bias_mode = rows[i].bias;
    const c2f::ExperimentResult r = c2f::run_experiment(c, rows[i].preset, data);
    std::string line = r.report.summary_csv(i == 0);
    table += line;
    std::cout << line << std::flush;
    results.push_back({{"row", rows[i].name}, {"report", json::parse(r.report.to_json())}});
  }
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    c2f::io::write_text((fs::path(a.out_dir) / ("ablation_" + a.what + ".csv")).string(), table);
    c2f::io::write_text((fs::path(a.out_dir) / ("ablation_" + a.what + ".json")).string(), results.dump(2) + "\n");
    write_manifest(a.out_dir, "ablate", details);
  }
  return 0;
}

// ---- stats --------------------------------------------------------------

struct StatsArgs {
  std::vector<std::string> datasets;
  std::string hierarchy, out;
  bool per_step = false;
};

int cmd_stats(const StatsArgs& a) {
  if (a.datasets.size() != 2) throw CLI::ValidationError("--dataset", "give exactly two datasets (A and B)");
  const auto tree = std::make_shared<const c2f::HierarchyTree>(c2f::load_hierarchy(a.hierarchy));
  const c2f::DatasetFile fa = c2f::load_dataset(a.datasets[0]);
  const c2f::DatasetFile fb = c2f::load_dataset(a.datasets[1]);
  for (const auto* f : {&fa, &fb}) {
    for (c2f::Label l : f->labels) {
      if (l != f->header.void_id && l >= tree->leaf_count()) {
        throw std::runtime_error("dataset label " + std::to_string(l) + " is not a leaf of '" + a.hierarchy +
                                 "' (" + std::to_string(tree->leaf_count()) + " leaves): mismatched hierarchy");
      }
    }
  }
  const std::vector<double> pa = c2f::leaf_frequencies(fa, *tree);
  const std::vector<double> pb = c2f::leaf_frequencies(fb, *tree);
  std::vector<std::string> leaf_names;
  for (std::size_t leaf : tree->leaves()) leaf_names.push_back(tree->node(leaf).name);
  const double leaf_kl = c2f::kl_divergence(pa, pb, leaf_names);

  std::string table = "level,kl_coarsened,kl_masked\n";
  table += "leaf," + fixed(leaf_kl, 6) + ",\n";
  std::string freq = "step,class,freq_a,freq_b\n";
  if (a.per_step) {
    for (std::size_t t = 0; t <= tree->max_step(); ++t) {
      const c2f::StepView full = c2f::step_view(tree, t, c2f::LabelMode::full, fa.header.void_id);
      const c2f::StepView masked = c2f::step_view(tree, t, c2f::LabelMode::masked, fa.header.void_id);
      const auto ca = c2f::coarsen_distribution(pa, full), cb = c2f::coarsen_distribution(pb, full);
      std::vector<std::string> names;
      for (std::size_t c = 0; c < full.class_count(); ++c) names.push_back(full.class_name(c));
      const double kl_c = c2f::kl_divergence(ca, cb, names);
      const auto ma = c2f::class_frequencies(fa, masked), mb = c2f::class_frequencies(fb, masked);
      const double kl_m = c2f::kl_divergence(ma, mb, names);
      table += "step" + std::to_string(t) + "," + fixed(kl_c, 6) + "," + fixed(kl_m, 6) + "\n";
      for (std::size_t c = 0; c < names.size(); ++c) {
        freq += std::to_string(t) + "," + names[c] + "," + fixed(ma[c], 6) + "," + fixed(mb[c], 6) + "\n";
      }
    }
  }
  std::cout << table;
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    c2f::io::write_text((fs::path(a.out) / "kl.csv").string(), table);
    if (a.per_step) c2f::io::write_text((fs::path(a.out) / "class_frequencies.csv").string(), freq);
    write_manifest(a.out, "stats",
                   {{"datasets", a.datasets}, {"hierarchy", a.hierarchy}, {"per_step", a.per_step}});
  }
  return 0;
}

// ---- check --------------------------------------------------------------

int cmd_check(bool grad, bool invariants, std::uint64_t seed_flag) {
  if (!grad && !invariants) throw CLI::ValidationError("check", "pass --grad and/or --invariants");
  const std::uint64_t seed = effective_seed(seed_flag);
  std::vector<c2f::CheckResult> results;
  if (grad) {
    auto r = c2f::gradient_checks(seed);
    results.insert(results.end(), r.begin(), r.end());
  }
  if (invariants) {
    auto r = c2f::invariant_checks(seed);
    results.insert(results.end(), r.begin(), r.end());
  }
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
    failed += !r.passed;
  }
  std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine continual domain adaptation lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate synthetic datasets");
  g->add_option("--spec", gen.spec, "domain spec JSON (default: built-in desk source+target pair)");
  g->add_option("--hierarchy", gen.hierarchy, "hierarchy JSON (required with --spec)");
  g->add_option("--out", gen.out, "output file with --spec, output directory otherwise")->capture_default_str();
  g->add_option("--count", gen.count, "samples per file")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--eval-count", gen.eval_count, "desk only: labeled target evaluation samples")
      ->capture_default_str();
  g->add_option("--size", gen.size, "N or HxW")->capture_default_str();
  g->add_option("--seed", gen.seed, "seed (C2F_SEED overrides)")->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "run a continual experiment");
  t->add_option("--config", train.config, "training config JSON")->required()->check(CLI::ExistingFile);
  t->add_option("--method", train.method, "method preset")
      ->required()
      ->check(CLI::IsMember(c2f::preset_names()));
  t->add_option("--out-dir", train.out_dir, "output directory")->capture_default_str();
  t->add_option("--seed", train.seed, "override the config seed (C2F_SEED overrides)");

  AblateArgs ablate;
  auto* ab = app.add_subcommand("ablate", "distillation and initialization ablations");
  ab->add_option("--config", ablate.config, "training config JSON")->required()->check(CLI::ExistingFile);
  ab->add_option("--what", ablate.what, "ablation")->required()->check(CLI::IsMember({"kd-variant", "bias-init"}));
  ab->add_option("--out-dir", ablate.out_dir, "write CSV/JSON tables here");
  ab->add_option("--seed", ablate.seed, "override the config seed (C2F_SEED overrides)");

  StatsArgs stats;
  auto* s = app.add_subcommand("stats", "class-frequency KL between two datasets");
  s->add_option("--dataset", stats.datasets, "dataset file (give twice)")->required()->check(CLI::ExistingFile);
  s->add_option("--hierarchy", stats.hierarchy, "hierarchy JSON")->required()->check(CLI::ExistingFile);
  s->add_flag("--per-step", stats.per_step, "report every step of the hierarchy");
  s->add_option("--out", stats.out, "write CSV tables to this directory");

  bool grad = false, invariants = false;
  std::uint64_t check_seed = 0;
  auto* c = app.add_subcommand("check", "self-checks");
  c->add_flag("--grad", grad, "finite-difference checks of every loss");
  c->add_flag("--invariants", invariants, "expansion, distillation and KL invariant suites");
  c->add_option("--seed", check_seed, "seed (C2F_SEED overrides)")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (g->parsed()) return cmd_gen_data(gen);
    if (t->parsed()) return cmd_train(train);
    if (ab->parsed()) return cmd_ablate(ablate);
    if (s->parsed()) return cmd_stats(stats);
    if (c->parsed()) return cmd_check(grad, invariants, check_seed);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
