#include "c2f/hierarchy.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "c2f/random.hpp"

namespace c2f {

using nlohmann::json;

std::optional<std::size_t> HierarchyTree::find(std::string_view name) const {
  for (const HierarchyNode& n : nodes_) {
    if (n.name == name) return n.id;
  }
  return std::nullopt;
}

std::size_t HierarchyTree::id_of(std::string_view name) const {
  auto id = find(name);
  if (!id) throw HierarchyError("unknown class '" + std::string(name) + "'");
  return *id;
}

std::optional<std::size_t> HierarchyTree::leaf_index(std::size_t node_id) const {
  return leaf_index_.at(node_id);
}

std::size_t HierarchyTree::ancestor_at(std::size_t node_id, std::size_t step) const {
  std::size_t cur = node_id;
  while (nodes_.at(cur).birth_step > step) cur = *nodes_[cur].parent;
  return cur;
}

std::string HierarchyTree::path(std::size_t node_id) const {
  std::string p = nodes_.at(node_id).name;
  for (auto cur = nodes_[node_id].parent; cur; cur = nodes_[*cur].parent) p = nodes_[*cur].name + "/" + p;
  return p;
}

void HierarchyTree::add_node(std::string name, std::optional<std::size_t> parent) {
  HierarchyNode n;
  n.name = std::move(name);
  n.id = nodes_.size();
  n.parent = parent;
  n.birth_step = parent ? nodes_[*parent].birth_step + 1 : 0;
  if (parent) {
    nodes_[*parent].children.push_back(n.id);
  } else {
    roots_.push_back(n.id);
  }
  nodes_.push_back(std::move(n));
}

void HierarchyTree::finalize() {
  if (nodes_.empty()) throw HierarchyError("hierarchy has no classes");
  leaves_.clear();
  leaf_index_.assign(nodes_.size(), std::nullopt);
  max_step_ = 0;
  for (const HierarchyNode& n : nodes_) {
    max_step_ = std::max(max_step_, n.birth_step);
    if (n.is_leaf()) {
      leaf_index_[n.id] = leaves_.size();
      leaves_.push_back(n.id);
    }
  }
}

HierarchyTree HierarchyTree::from_parent_list(
    const std::vector<std::pair<std::string, std::optional<std::string>>>& entries) {
  HierarchyTree tree;
  std::set<std::string> all_names;
  for (const auto& [name, parent] : entries) all_names.insert(name);
  for (const auto& [name, parent] : entries) {
    if (name.empty()) throw HierarchyError("class with empty name");
    if (tree.find(name)) throw HierarchyError("duplicate class name '" + name + "'");
    std::optional<std::size_t> pid;
    if (parent) {
      pid = tree.find(*parent);
      if (!pid) {
        if (all_names.count(*parent)) {
          throw HierarchyError("class '" + name + "': parent '" + *parent + "' is declared after its child");
        }
        throw HierarchyError("class '" + name + "': dangling parent '" + *parent + "'");
      }
    }
    tree.add_node(name, pid);
  }
  tree.finalize();
  return tree;
}

namespace {

void parse_node(const json& j, std::optional<std::size_t> parent, const std::string& where,
                std::vector<std::pair<std::string, std::optional<std::string>>>& out,
                std::size_t depth) {
  if (!j.is_object()) throw HierarchyError(where + ": node must be an object");
  if (!j.contains("name") || !j["name"].is_string()) throw HierarchyError(where + ": missing string 'name'");
  const std::string name = j["name"].get<std::string>();
  const std::string here = where + "(" + name + ")";
  if (name.empty()) throw HierarchyError(here + ": empty name");
  for (const auto& [n, p] : out) {
    if (n == name) throw HierarchyError(here + ": duplicate class name '" + name + "'");
  }
  for (const auto& [key, val] : j.items()) {
    if (key != "name" && key != "children" && key != "step") {
      throw HierarchyError(here + ": unknown key '" + key + "'");
    }
  }
  if (j.contains("step")) {
    if (!j["step"].is_number_unsigned()) throw HierarchyError(here + ": 'step' must be a non-negative integer");
    const auto step = j["step"].get<std::size_t>();
    if (step != depth) {
      throw HierarchyError(here + ": depth gap, declared step " + std::to_string(step) + " but node sits at depth " +
                           std::to_string(depth));
    }
  }
  out.emplace_back(name, parent ? std::optional<std::string>(out[*parent].first) : std::nullopt);
  const std::size_t self = out.size() - 1;
  if (j.contains("children")) {
    const json& ch = j["children"];
    if (!ch.is_array()) throw HierarchyError(here + ": 'children' must be a list");
    if (ch.empty()) throw HierarchyError(here + ": 'children' is present but empty");
    for (std::size_t i = 0; i < ch.size(); ++i) {
      parse_node(ch[i], self, here + ".children[" + std::to_string(i) + "]", out, depth + 1);
    }
  }
}

}  // namespace

HierarchyTree parse_hierarchy(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw HierarchyError(std::string("hierarchy is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("roots") || !doc["roots"].is_array()) {
    throw HierarchyError("hierarchy document needs a 'roots' list");
  }
  if (doc["roots"].empty()) throw HierarchyError("hierarchy has no roots");
  std::vector<std::pair<std::string, std::optional<std::string>>> entries;
  for (std::size_t i = 0; i < doc["roots"].size(); ++i) {
    parse_node(doc["roots"][i], std::nullopt, "roots[" + std::to_string(i) + "]", entries, 0);
  }
  return HierarchyTree::from_parent_list(entries);
}

HierarchyTree load_hierarchy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw HierarchyError("cannot open hierarchy file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_hierarchy(ss.str());
}

namespace {

json node_json(const HierarchyTree& tree, std::size_t id) {
  json j;
  j["name"] = tree.node(id).name;
  if (!tree.node(id).is_leaf()) {
    j["children"] = json::array();
    for (std::size_t c : tree.node(id).children) j["children"].push_back(node_json(tree, c));
  }
  return j;
}

}  // namespace

std::string HierarchyTree::to_json() const {
  json doc;
  doc["roots"] = json::array();
  for (std::size_t r : roots_) doc["roots"].push_back(node_json(*this, r));
  return doc.dump();
}

std::uint64_t HierarchyTree::fingerprint() const { return RandomStream::hash_tag(to_json()); }

std::string_view to_string(LabelMode mode) { return mode == LabelMode::masked ? "masked" : "full"; }

LabelMode label_mode_from_string(std::string_view s) {
  if (s == "masked") return LabelMode::masked;
  if (s == "full") return LabelMode::full;
  throw HierarchyError("unknown label mode '" + std::string(s) + "' (expected masked|full)");
}

std::optional<std::size_t> StepView::class_of_node(std::size_t node_id) const {
  return node_to_class_.at(node_id);
}

std::string StepView::class_name(std::size_t step_class) const { return tree_->node(node_of(step_class)).name; }

bool StepView::same_tree(const StepView& other) const {
  return tree_ == other.tree_ || tree_->fingerprint() == other.tree_->fingerprint();
}

namespace {

std::vector<std::size_t> active_nodes(const HierarchyTree& tree, std::size_t step) {
  std::vector<std::size_t> out;
  for (const HierarchyNode& n : tree.nodes()) {
    if (n.birth_step == step || (n.birth_step < step && n.is_leaf())) out.push_back(n.id);
  }
  return out;
}

}  // namespace

StepView step_view(std::shared_ptr<const HierarchyTree> tree, std::size_t step, LabelMode mode, Label void_id) {
  if (!tree) throw HierarchyError("step_view: null tree");
  if (step > tree->max_step()) {
    throw HierarchyError("step " + std::to_string(step) + " out of range (max step " +
                         std::to_string(tree->max_step()) + ")");
  }
  StepView v;
  v.tree_ = tree;
  v.step_ = step;
  v.mode_ = mode;
  v.void_id_ = void_id;
  v.classes_ = active_nodes(*tree, step);
  if (v.classes_.size() > void_id) throw HierarchyError("step class count collides with the VOID label");
  v.node_to_class_.assign(tree->nodes().size(), std::nullopt);
  for (std::size_t k = 0; k < v.classes_.size(); ++k) v.node_to_class_[v.classes_[k]] = k;

  v.carried_flag_.assign(v.classes_.size(), false);
  v.supervised_flag_.assign(v.classes_.size(), false);
  if (step > 0) {
    const std::vector<std::size_t> prev = active_nodes(*tree, step - 1);
    std::vector<std::optional<std::size_t>> prev_of_node(tree->nodes().size());
    for (std::size_t c = 0; c < prev.size(); ++c) prev_of_node[prev[c]] = c;
    v.prev_count_ = prev.size();
    v.split_.assign(prev.size(), {});
    std::vector<bool> is_split(prev.size(), false);
    for (std::size_t k = 0; k < v.classes_.size(); ++k) {
      const HierarchyNode& n = tree->node(v.classes_[k]);
      std::size_t pc;
      if (n.birth_step == step) {
        pc = *prev_of_node.at(*n.parent);
        is_split[pc] = true;
      } else {
        pc = *prev_of_node.at(n.id);
        v.carried_flag_[k] = true;
      }
      v.parent_in_prev_.push_back(pc);
      v.split_[pc].push_back(k);
    }
    for (std::size_t c = 0; c < prev.size(); ++c) {
      (is_split[c] ? v.split_origin_ : v.carried_).push_back(c);
    }
  }
  for (std::size_t k = 0; k < v.classes_.size(); ++k) {
    if (step == 0 || tree->node(v.classes_[k]).birth_step == step) {
      v.supervised_flag_[k] = true;
      v.supervised_.push_back(k);
    }
  }
  v.remap_.resize(tree->leaf_count());
  for (std::size_t l = 0; l < tree->leaf_count(); ++l) {
    const std::size_t cls = *v.node_to_class_[tree->ancestor_at(tree->leaves()[l], step)];
    const bool keep = mode == LabelMode::full || v.supervised_flag_[cls];
    v.remap_[l] = keep ? static_cast<Label>(cls) : void_id;
  }
  return v;
}

std::vector<Label> remap_labels(std::span<const Label> leaf_labels, const StepView& view, std::size_t width) {
  std::vector<Label> out(leaf_labels.size());
  const auto& table = view.remap();
  for (std::size_t i = 0; i < leaf_labels.size(); ++i) {
    const Label l = leaf_labels[i];
    if (l == view.void_id()) {
      out[i] = view.void_id();
    } else if (l < table.size()) {
      out[i] = table[l];
    } else {
      std::string where = "pixel " + std::to_string(i);
      if (width > 0) where += " (row " + std::to_string(i / width) + ", col " + std::to_string(i % width) + ")";
      throw HierarchyError("remap_labels: unknown leaf id " + std::to_string(l) + " at " + where);
    }
  }
  return out;
}

Array aggregate_probs(const Array& probs, const StepView& view) {
  if (view.step() == 0) throw HierarchyError("aggregate_probs: step 0 has no coarser step");
  if (probs.last_dim() != view.class_count()) {
    throw HierarchyError("aggregate_probs: map has " + std::to_string(probs.last_dim()) + " channels, step " +
                         std::to_string(view.step()) + " has " + std::to_string(view.class_count()) + " classes");
  }
  const std::size_t k = view.class_count(), kp = view.prev_class_count(), pixels = probs.size() / k;
  Shape shape = probs.shape();
  shape.back() = kp;
  Array out(shape);
  const auto& parent = view.parent_in_prev();
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t c = 0; c < k; ++c) out[p * kp + parent[c]] += probs[p * k + c];
  return out;
}

}  // namespace c2f
