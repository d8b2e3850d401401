#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "freqexit/tensor.hpp"

namespace freqexit {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode recorder over a fixed primitive set.
///
/// Each primitive computes its value eagerly and, when the tape records and at
/// least one input requires a gradient, pushes a closure that propagates the
/// node's gradient to its inputs. A tape constructed with `record = false` is a
/// plain evaluator: no closures, no caches.
///
/// Parameter leaves accumulate into `Parameter::grad` during `backward`;
/// gradients are never reset by the tape.
class Tape {
 public:
  struct Node {
    TensorR value;
    TensorR grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
    const Parameter* param = nullptr;
    std::function<void(Tape&)> backward;
  };

  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const noexcept { return record_; }

  Var constant(TensorR value);
  /// Leaf bound to `p`; on a recording tape gradients flow into `p.grad` when
  /// `p.trainable`.
  Var param(const Parameter& p);

  const TensorR& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of the last backward pass w.r.t. `v` (zeros if unreached).
  TensorR grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Propagates d(loss)/d(node) through every recorded node. `loss` must hold a
  /// single element. A second call without new forward work throws StateError.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

  // Primitive-implementation interface.
  Var push(TensorR value, bool requires_grad, std::function<void(Tape&)> backward);
  Node& node(Var v) { return nodes_.at(v.id); }
  /// Adds `g` into the gradient buffer of `v` (no-op when `v` needs no grad).
  void accumulate(Var v, const TensorR& g);
  /// Mutable gradient buffer of `v`, allocated as zeros if needed.
  TensorR& grad_buffer(Var v);

 private:
  std::vector<Node> nodes_;
  bool record_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Primitives. Every tensor argument is 2D unless stated otherwise.

/// [m x k] * [k x n].
Var matmul(Tape& t, Var a, Var b);
/// Elementwise sum of two equally shaped tensors.
Var add(Tape& t, Var a, Var b);
/// Adds a [n] bias to every row of an [m x n] tensor.
Var add_bias(Tape& t, Var x, Var bias);
Var scale(Tape& t, Var x, double s);
/// Per-row normalisation over the last extent, then affine with gamma/beta [D].
Var layernorm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-6);
/// Tanh-approximation GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Var gelu(Tape& t, Var x);
/// Splits the rows of [groups*rows_per_group x D] into consecutive groups and
/// returns their means as [groups x D].
Var mean_rows(Tape& t, Var x, std::size_t groups);
/// Mean over rows of -log softmax(logits[r])[labels[r]]; returns a [1] tensor.
Var softmax_cross_entropy(Tape& t, Var logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Non-recording helpers shared by the primitives and their callers.

void matmul_into(const TensorR& a, const TensorR& b, TensorR& out);
double gelu_value(double x);
double gelu_derivative(double x);
/// Numerically stable softmax of `logits` (rank-1 or a single row).
std::vector<double> softmax(std::span<const double> logits);
/// -log softmax(logits)[label]; IndexError when label is out of range.
double softmax_cross_entropy(std::span<const double> logits, int label);
/// Index of the largest value; ties resolve to the lowest index.
int argmax(std::span<const double> values);

}  // namespace freqexit
