#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "c2f/array.hpp"

namespace c2f {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
};

class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Eager reverse-mode tape. Every op computes its value immediately and
/// records a closure that pushes the output gradient to its inputs.
/// Nodes are only appended, so reverse insertion order is a valid
/// topological order and accumulation order is fixed.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);
  /// Registers a trainable leaf. Gradients are read back with grad().
  Var parameter(Array value);

  Var record(Array value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Array& value(Var v) const { return node(v).value; }
  /// Gradient of the last backward() loss w.r.t. v (zeros if unreached).
  const Array& grad(Var v) const;
  Array& grad_buffer(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  const std::vector<std::size_t>& parameters() const { return parameters_; }
  std::size_t size() const { return nodes_.size(); }

  /// Clears gradients and back-propagates from a scalar loss node.
  void backward(Var loss);

 private:
  struct Node {
    Array value;
    Array grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  std::vector<std::size_t> parameters_;
};

/// Free-function form of Tape::backward; returns the gradient per registered
/// parameter, in registration order.
std::vector<Array> backward(Tape& tape, Var loss);

// ---- operator set -------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);
Var square(Var a);
Var abs(Var a);
Var exp(Var a);
/// Natural log of max(a, floor). The gradient is zero where the floor is active.
Var log(Var a, double floor = 0.0);

/// 3x3, stride 1, zero padding. x: [N,H,W,Ci], w: [3,3,Ci,Co], b: [Co].
Var conv3x3(Var x, Var w, Var b);
/// x: [N,H,W,Ci], w: [Co,Ci] (one row per output channel), b: [Co].
Var conv1x1(Var x, Var w, Var b);

/// Softmax over the trailing axis (max-subtracted).
Var softmax(Var logits);
Var log_softmax(Var logits);
/// out[..., group[k]] += a[..., k]; trailing axis is reduced to group_count.
Var group_sum(Var a, std::span<const std::size_t> group, std::size_t group_count);
/// log-sum-exp over each group of the trailing axis.
Var group_logsumexp(Var a, std::span<const std::size_t> group, std::size_t group_count);

Var sum(Var a);
Var mean(Var a);
/// Scalar  coeff * sum_i weights[i] * a[i]; weights is a constant of a's shape.
/// With 0/1 weights this is the masked reduction.
Var weighted_sum(Var a, const Array& weights, double coeff = 1.0);

}  // namespace c2f
