#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "c2f/array.hpp"
#include "c2f/hierarchy.hpp"
#include "c2f/random.hpp"
#include "c2f/tape.hpp"

namespace c2f {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BiasMode { unbiased, naive };

std::string_view to_string(BiasMode m);
BiasMode bias_mode_from_string(std::string_view s);

/// Per-pixel segmentation network: two 3x3 conv + ReLU layers (3 -> 8 -> 16
/// channels) followed by a 1x1 head with one weight row and bias per class.
///
/// Weight layouts: conv weights are [3,3,Cin,Cout]; head weights are
/// [|C_t|,16] with row k holding the weight vector of step class k.
struct SegModel {
  static constexpr std::size_t kInChannels = 3;
  static constexpr std::size_t kHidden = 8;
  static constexpr std::size_t kFeatures = 16;

  Array conv1_w, conv1_b;
  Array conv2_w, conv2_b;
  Array head_w, head_b;
  std::shared_ptr<const StepView> view;

  std::size_t class_count() const { return head_b.size(); }
  /// All parameter blocks in checkpoint order.
  std::vector<const Array*> parameters() const;
  std::vector<Array*> parameters();
  static std::vector<std::string> parameter_names();
  void validate() const;
};

/// Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for all
/// weights, zero biases. `zero_head` leaves the head at zero.
SegModel init_model(std::shared_ptr<const StepView> view, RandomStream& rng, bool zero_head = false);

struct ModelVars {
  Var conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b;

  std::vector<Var> list() const { return {conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b}; }
};

/// Registers the model's parameters on the tape (trainable or constant).
ModelVars bind(Tape& tape, const SegModel& model, bool trainable);

struct ForwardVars {
  Var features;
  Var logits;
};

/// images: [N,H,W,3] node. Returns features [N,H,W,16] and logits [N,H,W,|C_t|].
ForwardVars forward(const ModelVars& vars, Var images);

struct Prediction {
  Array features;
  Array logits;
  Array probs;
};

/// Inference on [H,W,3] or [N,H,W,3] images.
Prediction predict(const SegModel& model, const Array& images);
/// Per-pixel argmax of a probability or logit map.
std::vector<Label> argmax_labels(const Array& map);

/// Head expansion from step t-1 to t: split children copy their parent's
/// weight row; unbiased mode subtracts log|S_t(c)| from the copied bias.
/// Carried classes keep both. The encoder is copied verbatim.
SegModel expand_head(const SegModel& prev, std::shared_ptr<const StepView> view, BiasMode mode);

struct CheckpointMeta {
  std::size_t step = 0;
  std::size_t iteration = 0;
  std::uint64_t seed = 0;
  std::string method;
  std::string config_hash;
  /// FNV-1a of the little-endian parameter payload; filled on save.
  std::string param_hash;
};

struct Checkpoint {
  SegModel model;
  CheckpointMeta meta;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
/// Hash of the parameter payload exactly as written after the metadata block.
std::string parameter_hash(const SegModel& model);

}  // namespace c2f
