#include "c2f/dataset.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "c2f/io.hpp"

namespace c2f {

using nlohmann::json;

std::string_view to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain domain_from_string(std::string_view s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw DatasetError("unknown domain '" + std::string(s) + "' (expected source|target)");
}

namespace {

std::string_view to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::band: return "band";
    case ShapeKind::rect: return "rect";
    case ShapeKind::disc: return "disc";
  }
  return "rect";
}

ShapeKind shape_from_string(const std::string& s) {
  if (s == "band") return ShapeKind::band;
  if (s == "rect") return ShapeKind::rect;
  if (s == "disc") return ShapeKind::disc;
  throw DatasetError("unknown shape kind '" + s + "'");
}

double det3(const std::array<std::array<double, 3>, 3>& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

}  // namespace

void DomainSpec::validate() const {
  if (!(noise_std >= 0.0)) throw DatasetError("domain spec: noise_std must be >= 0");
  if (blur_width < 0) throw DatasetError("domain spec: blur_width must be >= 0");
  if (std::fabs(det3(mixing)) < 1e-9) throw DatasetError("domain spec: mixing matrix is singular");
  for (const auto& [name, c] : classes) {
    for (double v : c.color) {
      if (!(v >= 0.0 && v <= 1.0)) throw DatasetError("domain spec: color of '" + name + "' outside [0,1]");
    }
    if (c.kind != ShapeKind::band && (c.rate < 0.0 || c.min_size <= 0.0 || c.max_size < c.min_size)) {
      throw DatasetError("domain spec: bad object parameters for '" + name + "'");
    }
  }
  for (const std::string& b : band_order) {
    auto it = classes.find(b);
    if (it == classes.end()) throw DatasetError("domain spec: band '" + b + "' has no class entry");
    if (it->second.kind != ShapeKind::band) throw DatasetError("domain spec: '" + b + "' in band_order is not a band");
  }
  for (const auto& [name, c] : classes) {
    if (c.kind == ShapeKind::band && std::find(band_order.begin(), band_order.end(), name) == band_order.end()) {
      throw DatasetError("domain spec: band class '" + name + "' missing from band_order");
    }
  }
  if (band_order.empty()) throw DatasetError("domain spec: at least one band class is required");
}

DomainSpec parse_domain_spec(std::string_view json_text) {
  DomainSpec spec;
  try {
    const json j = json::parse(json_text);
    spec.domain = domain_from_string(j.value("domain", std::string("source")));
    if (j.contains("mixing")) spec.mixing = j["mixing"].get<std::array<std::array<double, 3>, 3>>();
    if (j.contains("offset")) spec.offset = j["offset"].get<std::array<double, 3>>();
    spec.noise_std = j.value("noise_std", 0.0);
    spec.blur_width = j.value("blur_width", 0);
    spec.band_order = j.value("band_order", std::vector<std::string>{});
    for (const auto& [name, c] : j.at("classes").items()) {
      ClassAppearance a;
      a.color = c.at("color").get<std::array<double, 3>>();
      a.kind = shape_from_string(c.value("kind", std::string("rect")));
      a.weight = c.value("weight", 1.0);
      a.presence = c.value("presence", 1.0);
      a.rate = c.value("rate", 0.0);
      a.min_size = c.value("min_size", 2.0);
      a.max_size = c.value("max_size", 6.0);
      a.aspect = c.value("aspect", 1.0);
      spec.classes.emplace(name, a);
    }
  } catch (const json::exception& e) {
    throw DatasetError(std::string("domain spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

DomainSpec load_domain_spec(const std::string& path) { return parse_domain_spec(io::read_text(path)); }

std::string domain_spec_to_json(const DomainSpec& spec) {
  json j;
  j["domain"] = std::string(to_string(spec.domain));
  j["mixing"] = spec.mixing;
  j["offset"] = spec.offset;
  j["noise_std"] = spec.noise_std;
  j["blur_width"] = spec.blur_width;
  j["band_order"] = spec.band_order;
  json classes = json::object();
  for (const auto& [name, c] : spec.classes) {
    json e;
    e["color"] = c.color;
    e["kind"] = std::string(to_string(c.kind));
    if (c.kind == ShapeKind::band) {
      e["weight"] = c.weight;
      e["presence"] = c.presence;
    } else {
      e["rate"] = c.rate;
      e["min_size"] = c.min_size;
      e["max_size"] = c.max_size;
      e["aspect"] = c.aspect;
    }
    classes[name] = e;
  }
  j["classes"] = classes;
  return j.dump(2);
}

// ---- file format --------------------------------------------------------

Array DatasetFile::image(std::size_t i) const {
  if (i >= count()) throw DatasetError("sample index " + std::to_string(i) + " out of range");
  const std::size_t n = pixels() * 3;
  Array out({header.height, header.width, 3});
  for (std::size_t k = 0; k < n; ++k) out[k] = images[i * n + k];
  return out;
}

std::span<const Label> DatasetFile::leaf_labels(std::size_t i) const {
  if (i >= count()) throw DatasetError("sample index " + std::to_string(i) + " out of range");
  return std::span(labels).subspan(i * pixels(), pixels());
}

void DatasetFile::check_consistent() const {
  if (images.size() != count() * pixels() * 3 || labels.size() != count() * pixels()) {
    throw DatasetError("dataset payload does not match header count");
  }
}

std::vector<std::uint8_t> encode_dataset(const DatasetFile& file) {
  file.check_consistent();
  io::ByteWriter w;
  for (char c : DatasetHeader::kMagic) w.put(static_cast<std::uint8_t>(c));
  const DatasetHeader& h = file.header;
  w.put(h.version);
  w.put(h.height);
  w.put(h.width);
  w.put(h.count);
  w.put(h.void_id);
  w.put(static_cast<std::uint8_t>(h.domain));
  w.put(h.reserved);
  w.put(h.seed);
  const std::size_t px = file.pixels();
  for (std::size_t i = 0; i < file.count(); ++i) {
    for (std::size_t k = 0; k < px * 3; ++k) w.put_f32(file.images[i * px * 3 + k]);
    w.put_bytes(std::span(file.labels).subspan(i * px, px));
  }
  return std::move(w.bytes());
}

DatasetFile decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  DatasetFile f;
  try {
    const auto magic = r.get_bytes(4);
    if (!std::equal(magic.begin(), magic.end(), DatasetHeader::kMagic.begin())) {
      throw DatasetError("not a dataset file (bad magic)");
    }
    DatasetHeader& h = f.header;
    h.version = r.get<std::uint32_t>();
    if (h.version != DatasetHeader::kVersion) {
      throw DatasetError("unsupported dataset version " + std::to_string(h.version));
    }
    h.height = r.get<std::uint32_t>();
    h.width = r.get<std::uint32_t>();
    h.count = r.get<std::uint32_t>();
    h.void_id = r.get<std::uint8_t>();
    const auto tag = r.get<std::uint8_t>();
    if (tag > 1) throw DatasetError("bad domain tag " + std::to_string(tag));
    h.domain = static_cast<Domain>(tag);
    h.reserved = r.get<std::uint16_t>();
    h.seed = r.get<std::uint64_t>();
    const std::size_t px = f.pixels();
    const std::size_t per_sample = px * 3 * 4 + px;
    if (r.remaining() != per_sample * h.count) {
      throw DatasetError("dataset payload size " + std::to_string(r.remaining()) + " does not match header (" +
                         std::to_string(per_sample * h.count) + ")");
    }
    f.images.resize(std::size_t{h.count} * px * 3);
    f.labels.resize(std::size_t{h.count} * px);
    for (std::size_t i = 0; i < h.count; ++i) {
      for (std::size_t k = 0; k < px * 3; ++k) f.images[i * px * 3 + k] = r.get_f32();
      auto lb = r.get_bytes(px);
      std::copy(lb.begin(), lb.end(), f.labels.begin() + static_cast<std::ptrdiff_t>(i * px));
    }
  } catch (const io::TruncatedError& e) {
    throw DatasetError(std::string("dataset: ") + e.what());
  }
  return f;
}

void save_dataset(const DatasetFile& file, const std::string& path) { io::write_file(path, encode_dataset(file)); }

DatasetFile load_dataset(const std::string& path) {
  try {
    return decode_dataset(io::read_file(path));
  } catch (const DatasetError& e) {
    throw DatasetError(path + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw DatasetError(e.what());
  }
}

// ---- generation ---------------------------------------------------------

namespace {

struct LeafPlan {
  Label leaf;
  const ClassAppearance* look;
};

std::vector<LeafPlan> plan_leaves(const DomainSpec& spec, const HierarchyTree& tree) {
  std::vector<LeafPlan> plan;
  for (std::size_t l = 0; l < tree.leaf_count(); ++l) {
    const std::string& name = tree.node(tree.leaves()[l]).name;
    auto it = spec.classes.find(name);
    if (it == spec.classes.end()) throw DatasetError("domain spec has no prototype for class '" + name + "'");
    plan.push_back({static_cast<Label>(l), &it->second});
  }
  for (const auto& [name, look] : spec.classes) {
    auto id = tree.find(name);
    if (!id || !tree.node(*id).is_leaf()) {
      throw DatasetError("domain spec class '" + name + "' is not a leaf of the hierarchy");
    }
  }
  return plan;
}

void layout_scene(const DomainSpec& spec, const HierarchyTree& tree, const std::vector<LeafPlan>& plan,
                  std::size_t h, std::size_t w, RandomStream& rng, std::span<Label> out) {
  std::vector<std::pair<Label, double>> bands;
  for (const std::string& b : spec.band_order) {
    const ClassAppearance& a = spec.classes.at(b);
    if (rng.bernoulli(a.presence)) {
      bands.emplace_back(static_cast<Label>(*tree.leaf_index(tree.id_of(b))), a.weight * rng.uniform(0.5, 1.5));
    }
  }
  if (bands.empty()) bands.emplace_back(static_cast<Label>(*tree.leaf_index(tree.id_of(spec.band_order.front()))), 1.0);
  double total = 0.0;
  for (const auto& b : bands) total += b.second;
  std::size_t row = 0;
  double cum = 0.0;
  for (std::size_t j = 0; j < bands.size(); ++j) {
    cum += bands[j].second;
    const std::size_t end = j + 1 == bands.size() ? h : static_cast<std::size_t>(std::lround(h * cum / total));
    for (; row < end; ++row)
      for (std::size_t x = 0; x < w; ++x) out[row * w + x] = bands[j].first;
  }
  for (const LeafPlan& lp : plan) {
    const ClassAppearance& a = *lp.look;
    if (a.kind == ShapeKind::band) continue;
    const int n = rng.poisson(a.rate);
    for (int k = 0; k < n; ++k) {
      const double size = rng.uniform(a.min_size, a.max_size);
      const double half_w = size / 2.0, half_h = size * a.aspect / 2.0;
      const double cx = rng.uniform(0.0, static_cast<double>(w));
      const double cy = rng.uniform(0.0, static_cast<double>(h));
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double dx = (static_cast<double>(x) + 0.5 - cx) / half_w;
          const double dy = (static_cast<double>(y) + 0.5 - cy) / half_h;
          const bool inside =
              a.kind == ShapeKind::rect ? (std::fabs(dx) <= 1.0 && std::fabs(dy) <= 1.0) : (dx * dx + dy * dy <= 1.0);
          if (inside) out[y * w + x] = lp.leaf;
        }
      }
    }
  }
}

}  // namespace

Array render_image(const DomainSpec& spec, const HierarchyTree& tree, std::span<const Label> leaf_labels,
                   std::size_t height, std::size_t width, RandomStream& noise) {
  const std::vector<LeafPlan> plan = plan_leaves(spec, tree);
  std::vector<std::array<double, 3>> color(plan.size());
  for (std::size_t l = 0; l < plan.size(); ++l) {
    for (std::size_t r = 0; r < 3; ++r) {
      double v = spec.offset[r];
      for (std::size_t c = 0; c < 3; ++c) v += spec.mixing[r][c] * plan[l].look->color[c];
      color[l][r] = std::clamp(v, 0.0, 1.0);
    }
  }
  Array img({height, width, 3});
  for (std::size_t p = 0; p < height * width; ++p) {
    const Label l = leaf_labels[p];
    if (l >= plan.size()) continue;  // VOID pixels render black
    for (std::size_t c = 0; c < 3; ++c) img[p * 3 + c] = color[l][c];
  }
  img = blur_image(img, spec.blur_width);
  if (spec.noise_std > 0.0) {
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::clamp(img[i] + spec.noise_std * noise.normal(), 0.0, 1.0);
  }
  return img;
}

DatasetFile generate_dataset(const DomainSpec& spec, const HierarchyTree& tree, std::size_t count,
                             std::size_t height, std::size_t width, std::uint64_t seed) {
  if (count == 0) throw DatasetError("generate_dataset: count must be >= 1");
  if (height == 0 || width == 0) throw DatasetError("generate_dataset: image size must be positive");
  spec.validate();
  const std::vector<LeafPlan> plan = plan_leaves(spec, tree);
  DatasetFile f;
  f.header.height = static_cast<std::uint32_t>(height);
  f.header.width = static_cast<std::uint32_t>(width);
  f.header.count = static_cast<std::uint32_t>(count);
  f.header.domain = spec.domain;
  f.header.seed = seed;
  const std::size_t px = height * width;
  f.images.resize(count * px * 3);
  f.labels.resize(count * px);
  const RandomStream base(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const RandomStream sample = base.derive("sample", i);
    RandomStream layout = sample.derive("layout");
    RandomStream noise = sample.derive("noise");
    std::span<Label> labels(f.labels.data() + i * px, px);
    layout_scene(spec, tree, plan, height, width, layout, labels);
    const Array img = render_image(spec, tree, labels, height, width, noise);
    for (std::size_t k = 0; k < px * 3; ++k) f.images[i * px * 3 + k] = static_cast<float>(img[k]);
  }
  return f;
}

// ---- augmentation -------------------------------------------------------

Array flip_horizontal(const Array& image) {
  if (image.rank() != 3) throw DatasetError("flip_horizontal expects [H,W,C]");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Array out(image.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) out[(y * w + x) * c + k] = image[(y * w + (w - 1 - x)) * c + k];
  return out;
}

std::vector<Label> flip_horizontal(std::span<const Label> labels, std::size_t height, std::size_t width) {
  std::vector<Label> out(labels.size());
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) out[y * width + x] = labels[y * width + (width - 1 - x)];
  return out;
}

Array blur_image(const Array& image, int width) {
  if (width <= 0) return image;
  if (image.rank() != 3) throw DatasetError("blur_image expects [H,W,C]");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const int taps = 2 * width + 1;
  std::vector<double> kernel(static_cast<std::size_t>(taps), 1.0);
  // Binomial coefficients C(2w, k) / 4^w.
  for (int k = 1; k < taps; ++k) kernel[k] = kernel[k - 1] * (taps - k) / k;
  double norm = 0.0;
  for (double v : kernel) norm += v;
  for (double& v : kernel) v /= norm;
  auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  Array tmp(image.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) {
        double acc = 0.0;
        for (int t = 0; t < taps; ++t) {
          const std::size_t sx = clampi(static_cast<std::ptrdiff_t>(x) + t - width, w);
          acc += kernel[t] * image[(y * w + sx) * c + k];
        }
        tmp[(y * w + x) * c + k] = acc;
      }
  Array out(image.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) {
        double acc = 0.0;
        for (int t = 0; t < taps; ++t) {
          const std::size_t sy = clampi(static_cast<std::ptrdiff_t>(y) + t - width, h);
          acc += kernel[t] * tmp[(sy * w + x) * c + k];
        }
        out[(y * w + x) * c + k] = acc;
      }
  return out;
}

namespace {

Batch load_impl(const DatasetFile& file, std::span<const std::size_t> indices, const StepView* view,
                AugmentFlags augment, RandomStream* rng) {
  if ((augment.flip || augment.blur) && !rng) throw DatasetError("augmentation requires a random stream");
  const std::size_t h = file.header.height, w = file.header.width, px = h * w;
  Batch b;
  b.images = Array({indices.size(), h, w, 3});
  if (view) b.labels.resize(indices.size() * px);
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const std::size_t idx = indices[n];
    if (idx >= file.count()) {
      throw DatasetError("sample index " + std::to_string(idx) + " out of range (count " +
                         std::to_string(file.count()) + ")");
    }
    Array img = file.image(idx);
    std::vector<Label> labels;
    if (view) labels = remap_labels(file.leaf_labels(idx), *view, w);
    const bool flip = augment.flip && rng->bernoulli(0.5);
    const bool blur = augment.blur && rng->bernoulli(0.5);
    if (flip) {
      img = flip_horizontal(img);
      if (view) labels = flip_horizontal(labels, h, w);
    }
    if (blur) img = blur_image(img, 1);
    std::copy(img.storage().begin(), img.storage().end(), b.images.storage().begin() + static_cast<std::ptrdiff_t>(n * px * 3));
    if (view) std::copy(labels.begin(), labels.end(), b.labels.begin() + static_cast<std::ptrdiff_t>(n * px));
  }
  return b;
}

}  // namespace

Batch load_batch(const DatasetFile& file, std::span<const std::size_t> indices, const StepView& view,
                 AugmentFlags augment, RandomStream* rng) {
  if (view.void_id() != file.header.void_id) throw DatasetError("view VOID id differs from the dataset header");
  return load_impl(file, indices, &view, augment, rng);
}

Batch load_images(const DatasetFile& file, std::span<const std::size_t> indices, AugmentFlags augment,
                  RandomStream* rng) {
  return load_impl(file, indices, nullptr, augment, rng);
}

// ---- statistics ---------------------------------------------------------

std::vector<double> class_frequencies(const DatasetFile& file, const StepView& view) {
  if (file.count() == 0) throw DatasetError("class_frequencies: empty dataset");
  std::vector<std::uint64_t> counts(view.class_count(), 0);
  std::uint64_t total = 0;
  const auto& table = view.remap();
  for (std::size_t i = 0; i < file.labels.size(); ++i) {
    const Label l = file.labels[i];
    if (l == file.header.void_id) continue;
    if (l >= table.size()) throw DatasetError("class_frequencies: label " + std::to_string(l) + " is not a leaf id");
    const Label s = table[l];
    if (s == view.void_id()) continue;
    ++counts[s];
    ++total;
  }
  if (total == 0) throw DatasetError("class_frequencies: every pixel is VOID");
  std::vector<double> f(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) f[k] = static_cast<double>(counts[k]) / static_cast<double>(total);
  return f;
}

std::vector<double> leaf_frequencies(const DatasetFile& file, const HierarchyTree& tree) {
  auto shared = std::make_shared<const HierarchyTree>(tree);
  return class_frequencies(file, step_view(shared, tree.max_step(), LabelMode::full, file.header.void_id));
}

std::vector<double> coarsen_distribution(std::span<const double> leaf_dist, const StepView& view) {
  const HierarchyTree& tree = *view.tree();
  if (leaf_dist.size() != tree.leaf_count()) throw DatasetError("coarsen_distribution: length mismatch");
  std::vector<double> out(view.class_count(), 0.0);
  for (std::size_t l = 0; l < leaf_dist.size(); ++l) {
    out[*view.class_of_node(tree.ancestor_at(tree.leaves()[l], view.step()))] += leaf_dist[l];
  }
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q, const std::vector<std::string>& names) {
  if (p.size() != q.size()) throw DatasetError("kl_divergence: length mismatch");
  auto label = [&](std::size_t i) { return i < names.size() ? "'" + names[i] + "'" : "index " + std::to_string(i); };
  double sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw DatasetError("kl_divergence: negative entry at class " + label(i));
    sp += p[i];
    sq += q[i];
  }
  if (std::fabs(sp - 1.0) > 1e-6 || std::fabs(sq - 1.0) > 1e-6) {
    throw DatasetError("kl_divergence: inputs must sum to 1");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) throw DatasetError("kl_divergence: support mismatch at class " + label(i));
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

}  // namespace c2f
