#include "c2f/model.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "c2f/io.hpp"

namespace c2f {

using nlohmann::json;

std::string_view to_string(BiasMode m) { return m == BiasMode::unbiased ? "unbiased" : "naive"; }

BiasMode bias_mode_from_string(std::string_view s) {
  if (s == "unbiased") return BiasMode::unbiased;
  if (s == "naive") return BiasMode::naive;
  throw ModelError("unknown bias mode '" + std::string(s) + "' (expected unbiased|naive)");
}

std::vector<const Array*> SegModel::parameters() const {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &head_w, &head_b};
}

std::vector<Array*> SegModel::parameters() { return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &head_w, &head_b}; }

std::vector<std::string> SegModel::parameter_names() {
  return {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "head.weight", "head.bias"};
}

void SegModel::validate() const {
  if (!view) throw ModelError("model has no step view");
  const std::size_t k = view->class_count();
  if (conv1_w.shape() != Shape{3, 3, kInChannels, kHidden} || conv1_b.shape() != Shape{kHidden} ||
      conv2_w.shape() != Shape{3, 3, kHidden, kFeatures} || conv2_b.shape() != Shape{kFeatures} ||
      head_w.shape() != Shape{k, kFeatures} || head_b.shape() != Shape{k}) {
    throw ModelError("model parameter shapes do not match the architecture / step view");
  }
  for (const Array* p : parameters()) {
    if (!p->all_finite()) throw ModelError("model has non-finite parameters");
  }
}

namespace {

Array uniform_array(Shape shape, double bound, RandomStream& rng) {
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(-bound, bound);
  return a;
}

}  // namespace

SegModel init_model(std::shared_ptr<const StepView> view, RandomStream& rng, bool zero_head) {
  if (!view) throw ModelError("init_model: null view");
  SegModel m;
  m.view = std::move(view);
  const std::size_t k = m.view->class_count();
  m.conv1_w = uniform_array({3, 3, SegModel::kInChannels, SegModel::kHidden},
                            1.0 / std::sqrt(9.0 * SegModel::kInChannels), rng);
  m.conv1_b = Array({SegModel::kHidden});
  m.conv2_w = uniform_array({3, 3, SegModel::kHidden, SegModel::kFeatures}, 1.0 / std::sqrt(9.0 * SegModel::kHidden),
                            rng);
  m.conv2_b = Array({SegModel::kFeatures});
  m.head_w = zero_head ? Array({k, SegModel::kFeatures})
                       : uniform_array({k, SegModel::kFeatures}, 1.0 / std::sqrt(double(SegModel::kFeatures)), rng);
  m.head_b = Array({k});
  return m;
}

ModelVars bind(Tape& tape, const SegModel& m, bool trainable) {
  auto leaf = [&](const Array& a) { return trainable ? tape.parameter(a) : tape.constant(a); };
  ModelVars v;
  v.conv1_w = leaf(m.conv1_w);
  v.conv1_b = leaf(m.conv1_b);
  v.conv2_w = leaf(m.conv2_w);
  v.conv2_b = leaf(m.conv2_b);
  v.head_w = leaf(m.head_w);
  v.head_b = leaf(m.head_b);
  return v;
}

ForwardVars forward(const ModelVars& v, Var images) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[3] != SegModel::kInChannels) {
    throw ModelError("forward: expected [N,H,W,3] images, got " + shape_string(s));
  }
  Var h1 = relu(conv3x3(images, v.conv1_w, v.conv1_b));
  Var f = relu(conv3x3(h1, v.conv2_w, v.conv2_b));
  return {f, conv1x1(f, v.head_w, v.head_b)};
}

Prediction predict(const SegModel& model, const Array& images) {
  Array batch = images;
  const bool single = images.rank() == 3;
  if (single) batch = images.reshaped({1, images.dim(0), images.dim(1), images.dim(2)});
  if (batch.rank() != 4 || batch.dim(3) != SegModel::kInChannels) {
    throw ModelError("predict: expected [H,W,3] or [N,H,W,3] images, got " + shape_string(images.shape()));
  }
  Tape tape;
  const ModelVars vars = bind(tape, model, false);
  const ForwardVars out = forward(vars, tape.constant(std::move(batch)));
  Prediction p{out.features.value(), out.logits.value(), softmax(out.logits).value()};
  if (single) {
    auto drop = [](const Array& a) { return a.reshaped({a.dim(1), a.dim(2), a.dim(3)}); };
    p.features = drop(p.features);
    p.logits = drop(p.logits);
    p.probs = drop(p.probs);
  }
  return p;
}

std::vector<Label> argmax_labels(const Array& map) {
  const std::size_t k = map.last_dim();
  std::vector<Label> out(map.size() / k);
  for (std::size_t p = 0; p < out.size(); ++p) {
    const double* row = map.data() + p * k;
    out[p] = static_cast<Label>(std::max_element(row, row + k) - row);
  }
  return out;
}

SegModel expand_head(const SegModel& prev, std::shared_ptr<const StepView> view, BiasMode mode) {
  if (!view || !prev.view) throw ModelError("expand_head: missing step view");
  if (!view->same_tree(*prev.view)) throw ModelError("expand_head: views come from different hierarchies");
  if (view->step() != prev.view->step() + 1) {
    throw ModelError("expand_head: previous model is at step " + std::to_string(prev.view->step()) +
                     ", target view is step " + std::to_string(view->step()));
  }
  if (prev.class_count() != view->prev_class_count()) throw ModelError("expand_head: head size mismatch");
  SegModel m = prev;
  m.view = view;
  const std::size_t k = view->class_count(), d = SegModel::kFeatures;
  m.head_w = Array({k, d});
  m.head_b = Array({k});
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t c = view->parent_in_prev()[f];
    std::copy_n(prev.head_w.data() + c * d, d, m.head_w.data() + f * d);
    double b = prev.head_b[c];
    if (!view->is_carried(f) && mode == BiasMode::unbiased) {
      b -= std::log(static_cast<double>(view->split(c).size()));
    }
    m.head_b[f] = b;
  }
  return m;
}

// ---- checkpoints --------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'C', '2', 'F', 'M'};
constexpr std::uint32_t kCkptVersion = 1;

std::vector<std::uint8_t> parameter_bytes(const SegModel& m) {
  io::ByteWriter w;
  for (const Array* p : m.parameters())
    for (double v : p->values()) w.put_f64(v);
  return std::move(w.bytes());
}

}  // namespace

std::string parameter_hash(const SegModel& model) { return io::hex64(io::fnv1a(parameter_bytes(model))); }

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ckpt.model.validate();
  const StepView& v = *ckpt.model.view;
  const std::vector<std::uint8_t> params = parameter_bytes(ckpt.model);
  json meta;
  meta["step"] = ckpt.meta.step;
  meta["iteration"] = ckpt.meta.iteration;
  meta["seed"] = ckpt.meta.seed;
  meta["method"] = ckpt.meta.method;
  meta["config_hash"] = ckpt.meta.config_hash;
  meta["param_hash"] = io::hex64(io::fnv1a(params));
  meta["view"] = {{"step", v.step()},
                  {"mode", std::string(to_string(v.mode()))},
                  {"void", v.void_id()},
                  {"classes", [&] {
                     std::vector<std::string> names;
                     for (std::size_t k = 0; k < v.class_count(); ++k) names.push_back(v.class_name(k));
                     return names;
                   }()},
                  {"hierarchy", json::parse(v.tree()->to_json())}};
  const std::string text = meta.dump();
  io::ByteWriter w;
  for (char c : kCkptMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kCkptVersion);
  w.put(static_cast<std::uint32_t>(text.size()));
  w.put_string(text);
  w.put_bytes(params);
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  try {
    io::ByteReader r(bytes);
    const auto magic = r.get_bytes(4);
    if (!std::equal(magic.begin(), magic.end(), kCkptMagic)) throw ModelError("not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCkptVersion) throw ModelError("unsupported checkpoint version " + std::to_string(version));
    const auto len = r.get<std::uint32_t>();
    json meta;
    try {
      meta = json::parse(r.get_string(len));
    } catch (const json::parse_error& e) {
      throw ModelError(std::string("corrupt checkpoint metadata: ") + e.what());
    }
    Checkpoint c;
    c.meta.step = meta.at("step").get<std::size_t>();
    c.meta.iteration = meta.at("iteration").get<std::size_t>();
    c.meta.seed = meta.at("seed").get<std::uint64_t>();
    c.meta.method = meta.at("method").get<std::string>();
    c.meta.config_hash = meta.at("config_hash").get<std::string>();
    c.meta.param_hash = meta.at("param_hash").get<std::string>();
    const json& jv = meta.at("view");
    auto tree = std::make_shared<const HierarchyTree>(parse_hierarchy(jv.at("hierarchy").dump()));
    auto view = std::make_shared<const StepView>(step_view(tree, jv.at("step").get<std::size_t>(),
                                                           label_mode_from_string(jv.at("mode").get<std::string>()),
                                                           jv.at("void").get<Label>()));
    SegModel m;
    m.view = view;
    const std::size_t k = view->class_count();
    m.conv1_w = Array({3, 3, SegModel::kInChannels, SegModel::kHidden});
    m.conv1_b = Array({SegModel::kHidden});
    m.conv2_w = Array({3, 3, SegModel::kHidden, SegModel::kFeatures});
    m.conv2_b = Array({SegModel::kFeatures});
    m.head_w = Array({k, SegModel::kFeatures});
    m.head_b = Array({k});
    std::size_t expected = 0;
    for (Array* p : m.parameters()) expected += p->size() * 8;
    if (r.remaining() != expected) {
      throw ModelError("checkpoint payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                       std::to_string(expected));
    }
    const auto payload = r.get_bytes(expected);
    io::ByteReader pr(payload);
    for (Array* p : m.parameters())
      for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] = pr.get_f64();
    if (io::hex64(io::fnv1a(payload)) != c.meta.param_hash) throw ModelError("checkpoint parameter hash mismatch");
    m.validate();
    c.model = std::move(m);
    return c;
  } catch (const io::TruncatedError& e) {
    throw ModelError(std::string("checkpoint: ") + e.what());
  } catch (const json::exception& e) {
    throw ModelError(std::string("checkpoint metadata: ") + e.what());
  } catch (const HierarchyError& e) {
    throw ModelError(std::string("checkpoint hierarchy: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) { io::write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) {
  try {
    return decode_checkpoint(io::read_file(path));
  } catch (const ModelError& e) {
    throw ModelError(path + ": " + e.what());
  }
}

}  // namespace c2f
