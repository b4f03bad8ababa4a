#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "c2f/array.hpp"
#include "c2f/hierarchy.hpp"
#include "c2f/random.hpp"

namespace c2f {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Domain : std::uint8_t { source = 0, target = 1 };

std::string_view to_string(Domain d);
Domain domain_from_string(std::string_view s);

enum class ShapeKind { band, rect, disc };

/// Appearance and layout of one leaf class.
struct ClassAppearance {
  std::array<double, 3> color{};
  ShapeKind kind = ShapeKind::rect;
  /// band: relative height and presence probability.
  double weight = 1.0;
  double presence = 1.0;
  /// rect/disc: Poisson mean object count, size range (pixels), height / width.
  double rate = 0.0;
  double min_size = 2.0;
  double max_size = 6.0;
  double aspect = 1.0;
};

struct DomainSpec {
  Domain domain = Domain::source;
  /// Keyed by leaf class name. Bands are stacked top to bottom in `band_order`.
  std::map<std::string, ClassAppearance> classes;
  std::vector<std::string> band_order;
  std::array<std::array<double, 3>, 3> mixing{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  std::array<double, 3> offset{};
  double noise_std = 0.0;
  int blur_width = 0;

  void validate() const;
};

DomainSpec parse_domain_spec(std::string_view json_text);
DomainSpec load_domain_spec(const std::string& path);
std::string domain_spec_to_json(const DomainSpec& spec);

struct DatasetHeader {
  static constexpr std::array<char, 4> kMagic{'C', '2', 'F', 'D'};
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t count = 0;
  Label void_id = kDefaultVoid;
  Domain domain = Domain::source;
  std::uint16_t reserved = 0;
  std::uint64_t seed = 0;
};

/// In-memory dataset. Images are stored as float32 HWC, labels as leaf ids.
struct DatasetFile {
  DatasetHeader header;
  std::vector<float> images;
  std::vector<Label> labels;

  std::size_t pixels() const { return std::size_t{header.height} * header.width; }
  std::size_t count() const { return header.count; }
  /// Image i as a [H,W,3] double array.
  Array image(std::size_t i) const;
  std::span<const Label> leaf_labels(std::size_t i) const;
  void check_consistent() const;
};

std::vector<std::uint8_t> encode_dataset(const DatasetFile& file);
DatasetFile decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const DatasetFile& file, const std::string& path);
DatasetFile load_dataset(const std::string& path);

/// Deterministic scene generator; sample i draws from RandomStream(seed).derive("sample", i).
DatasetFile generate_dataset(const DomainSpec& spec, const HierarchyTree& tree, std::size_t count,
                             std::size_t height, std::size_t width, std::uint64_t seed);

/// Renders a label map into an image under the spec's visual model.
Array render_image(const DomainSpec& spec, const HierarchyTree& tree, std::span<const Label> leaf_labels,
                   std::size_t height, std::size_t width, RandomStream& noise);

// ---- augmentation -------------------------------------------------------

/// Left-right flip of a [H,W,C] array.
Array flip_horizontal(const Array& image);
std::vector<Label> flip_horizontal(std::span<const Label> labels, std::size_t height, std::size_t width);
/// Separable binomial (Gaussian-like) blur of radius `width`, edge-clamped; width 0 is identity.
Array blur_image(const Array& image, int width);

struct AugmentFlags {
  bool flip = false;
  bool blur = false;
};

struct Batch {
  Array images;               // [N,H,W,3]
  std::vector<Label> labels;  // N*H*W step labels (empty for image-only batches)
};

/// Loads samples with labels remapped through the view. With augmentation,
/// each sample is flipped (image and labels) and/or blurred (image only)
/// with probability 1/2 drawn from `rng`.
Batch load_batch(const DatasetFile& file, std::span<const std::size_t> indices, const StepView& view,
                 AugmentFlags augment = {}, RandomStream* rng = nullptr);
/// Same, without reading labels.
Batch load_images(const DatasetFile& file, std::span<const std::size_t> indices, AugmentFlags augment = {},
                  RandomStream* rng = nullptr);

// ---- statistics ---------------------------------------------------------

/// Pixel frequencies over the view's classes, VOID excluded.
std::vector<double> class_frequencies(const DatasetFile& file, const StepView& view);
/// Leaf-level frequencies (no remapping).
std::vector<double> leaf_frequencies(const DatasetFile& file, const HierarchyTree& tree);
/// Sums a leaf-level distribution into the view's classes (ignoring masking).
std::vector<double> coarsen_distribution(std::span<const double> leaf_dist, const StepView& view);
/// KL(p || q) with 0 log 0 = 0. Throws if q_i = 0 < p_i.
double kl_divergence(std::span<const double> p, std::span<const double> q,
                     const std::vector<std::string>& names = {});

}  // namespace c2f
