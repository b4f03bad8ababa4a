#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "c2f/array.hpp"

namespace c2f {

using Label = std::uint8_t;
inline constexpr Label kDefaultVoid = 255;

class HierarchyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HierarchyNode {
  std::string name;
  std::size_t id = 0;
  std::optional<std::size_t> parent;
  std::vector<std::size_t> children;
  std::size_t birth_step = 0;

  bool is_leaf() const { return children.empty(); }
};

/// Coarse-to-fine class taxonomy. Node ids follow document (pre-)order;
/// depth in the tree is the step at which the node becomes an active class.
class HierarchyTree {
 public:
  /// Builds from (name, parent name) pairs in document order; roots have no parent.
  static HierarchyTree from_parent_list(
      const std::vector<std::pair<std::string, std::optional<std::string>>>& entries);

  const std::vector<HierarchyNode>& nodes() const { return nodes_; }
  const HierarchyNode& node(std::size_t id) const { return nodes_.at(id); }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t id_of(std::string_view name) const;

  std::size_t max_step() const { return max_step_; }
  const std::vector<std::size_t>& roots() const { return roots_; }
  /// Leaves in document order; position in this list is the leaf label id.
  const std::vector<std::size_t>& leaves() const { return leaves_; }
  std::size_t leaf_count() const { return leaves_.size(); }
  std::optional<std::size_t> leaf_index(std::size_t node_id) const;
  /// Ancestor-or-self of node_id whose birth step is `step` (clamped to the node's own step).
  std::size_t ancestor_at(std::size_t node_id, std::size_t step) const;
  /// "root/child/leaf" path, used in diagnostics.
  std::string path(std::size_t node_id) const;

  /// Canonical nested JSON representation; parse(to_json()) reproduces the tree.
  std::string to_json() const;
  std::uint64_t fingerprint() const;

 private:
  void add_node(std::string name, std::optional<std::size_t> parent);
  void finalize();

  std::vector<HierarchyNode> nodes_;
  std::vector<std::size_t> roots_;
  std::vector<std::size_t> leaves_;
  std::vector<std::optional<std::size_t>> leaf_index_;
  std::size_t max_step_ = 0;
};

/// Parses {"roots": [{"name": ..., "children": [...]}, ...]}. An optional
/// integer "step" per node must agree with its depth.
HierarchyTree parse_hierarchy(std::string_view text);
HierarchyTree load_hierarchy(const std::string& path);

enum class LabelMode { masked, full };

std::string_view to_string(LabelMode mode);
LabelMode label_mode_from_string(std::string_view s);

/// Projection of the tree onto one training step. Step class ids are dense
/// and ordered by node id.
class StepView {
 public:
  std::shared_ptr<const HierarchyTree> tree() const { return tree_; }
  std::size_t step() const { return step_; }
  LabelMode mode() const { return mode_; }
  Label void_id() const { return void_id_; }

  std::size_t class_count() const { return classes_.size(); }
  /// Step class id -> tree node id.
  const std::vector<std::size_t>& classes() const { return classes_; }
  std::size_t node_of(std::size_t step_class) const { return classes_.at(step_class); }
  std::optional<std::size_t> class_of_node(std::size_t node_id) const;
  std::string class_name(std::size_t step_class) const;

  /// Class count of the previous step (0 at t = 0).
  std::size_t prev_class_count() const { return prev_count_; }
  /// For every step class: its (previous-step) coarse class id. Empty at t = 0.
  const std::vector<std::size_t>& parent_in_prev() const { return parent_in_prev_; }
  /// Previous-step ids that split at this step (C_{t-1}^c).
  const std::vector<std::size_t>& split_origin() const { return split_origin_; }
  /// Previous-step ids carried unchanged (C_{t-1}^f).
  const std::vector<std::size_t>& carried() const { return carried_; }
  bool is_carried(std::size_t step_class) const { return carried_flag_.at(step_class); }
  /// S_t(c) for a previous-step coarse class c (children in step ids).
  const std::vector<std::size_t>& split(std::size_t prev_class) const { return split_.at(prev_class); }
  const std::vector<std::size_t>& supervised() const { return supervised_; }
  bool is_supervised(std::size_t step_class) const { return supervised_flag_.at(step_class); }
  /// Leaf label id -> step label (step class id or VOID), honoring the mode.
  const std::vector<Label>& remap() const { return remap_; }

  bool same_tree(const StepView& other) const;

 private:
  std::shared_ptr<const HierarchyTree> tree_;
  std::size_t step_ = 0;
  LabelMode mode_ = LabelMode::masked;
  Label void_id_ = kDefaultVoid;
  std::vector<std::size_t> classes_;
  std::vector<std::optional<std::size_t>> node_to_class_;
  std::size_t prev_count_ = 0;
  std::vector<std::size_t> parent_in_prev_;
  std::vector<std::size_t> split_origin_;
  std::vector<std::size_t> carried_;
  std::vector<bool> carried_flag_;
  std::vector<std::vector<std::size_t>> split_;
  std::vector<std::size_t> supervised_;
  std::vector<bool> supervised_flag_;
  std::vector<Label> remap_;

  friend StepView step_view(std::shared_ptr<const HierarchyTree>, std::size_t, LabelMode, Label);
};

StepView step_view(std::shared_ptr<const HierarchyTree> tree, std::size_t step, LabelMode mode,
                   Label void_id = kDefaultVoid);

/// Maps a leaf-label map to step labels. Throws on unknown leaf ids,
/// reporting the flat pixel index and, when width > 0, (row, col).
std::vector<Label> remap_labels(std::span<const Label> leaf_labels, const StepView& view,
                                std::size_t width = 0);

/// Sums child channels into their coarse parent (carried classes copied).
/// P: [..., |C_t|] -> [..., |C_{t-1}|].
Array aggregate_probs(const Array& probs, const StepView& view);

}  // namespace c2f
