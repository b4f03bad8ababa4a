#include "c2f/desk.hpp"

#include <filesystem>

#include "c2f/desk_data.hpp"
#include "c2f/io.hpp"

namespace c2f::desk {

HierarchyTree hierarchy() { return parse_hierarchy(embedded::kDeskHierarchy); }
std::string hierarchy_json() { return embedded::kDeskHierarchy; }
DomainSpec source_spec() { return parse_domain_spec(embedded::kDeskSource); }
DomainSpec target_spec() { return parse_domain_spec(embedded::kDeskTarget); }

namespace {

void write_if_changed(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  if (std::filesystem::exists(path) && io::read_file(path) == bytes) return;
  io::write_file(path, bytes);
}

}  // namespace

Files write_benchmark(const std::string& dir, const Sizes& sizes, std::uint64_t seed) {
  namespace fs = std::filesystem;
  Files f;
  f.hierarchy = (fs::path(dir) / "hierarchy.json").string();
  f.source = (fs::path(dir) / "source.c2fd").string();
  f.target = (fs::path(dir) / "target.c2fd").string();
  if (sizes.target_eval > 0) f.target_eval = (fs::path(dir) / "target_eval.c2fd").string();
  const std::string text = hierarchy_json();
  write_if_changed(f.hierarchy, std::vector<std::uint8_t>(text.begin(), text.end()));
  const HierarchyTree tree = hierarchy();
  const RandomStream root(seed);
  const DomainSpec src = source_spec(), tgt = target_spec();
  write_if_changed(f.source, encode_dataset(generate_dataset(src, tree, sizes.source, sizes.height, sizes.width,
                                                             root.derive("source").next_u64())));
  write_if_changed(f.target, encode_dataset(generate_dataset(tgt, tree, sizes.target, sizes.height, sizes.width,
                                                             root.derive("target").next_u64())));
  if (f.target_eval.empty()) return f;
  write_if_changed(f.target_eval,
                   encode_dataset(generate_dataset(tgt, tree, sizes.target_eval, sizes.height, sizes.width,
                                                   root.derive("target-eval").next_u64())));
  return f;
}

TrainConfig train_config(const Files& files, std::uint64_t seed) {
  TrainConfig c;
  c.hierarchy = files.hierarchy;
  c.source = files.source;
  c.target = files.target;
  c.target_eval = files.target_eval;
  c.iterations = {2000, 1000};
  c.lr = {0.05, 0.02};
  c.loss_weights.alpha = 0.0;
  c.loss_weights.lambda_uda = 1.0;
  c.loss_weights.lambda_kd_c = 1.0;
  c.loss_weights.lambda_kd_f = 1.0;
  c.seed = seed;
  return c;
}

}  // namespace c2f::desk
