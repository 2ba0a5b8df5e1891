#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation in creation order, so a single reverse sweep
// over the node list is a valid topological order for backpropagation. Values
// are row-major in the sense that a batch of n examples with d features is an
// n x d matrix.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace shiftlab::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  const Matrix& grad() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  /// Records an op node. `requires_grad` should be true iff any input does.
  Var record(Matrix value, bool requires_grad, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 and propagates. Root must be 1x1.
  void backward(Var root);

  /// Like backward() but with an explicit seed of the root's shape.
  void backward(Var root, const Matrix& seed);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Accumulates `g` into the gradient of node `id` (no-op for constants).
  void accumulate(std::size_t id, const Matrix& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  mutable Matrix zero_;
};

// Elementwise / structural ops -------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                    // Hadamard
Var mul(Var a, const Matrix& constant);   // Hadamard with a constant
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);
Var add_row(Var a, Var row);              // broadcast a 1 x m row over n x m
Var matmul(Var a, Var b);
Var hcat(Var a, Var b);
Var cols(Var a, Eigen::Index start, Eigen::Index count);

Var tanh(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);

// Reductions -------------------------------------------------------------

Var sum(Var a);                     // -> 1x1
Var mean(Var a);                    // -> 1x1
Var row_sum(Var a);                 // n x m -> n x 1
Var weighted_sum(Var a, const Vector& w);  // n x 1 column, sum_i w_i a_i -> 1x1

// Classification helpers -------------------------------------------------

Var softmax(Var logits);            // row-wise
Var log_softmax(Var logits);        // row-wise
Var pick(Var a, std::span<const int> index);  // a[i, index[i]] -> n x 1

/// Per-example cross-entropy, n x 1.
Var cross_entropy(Var logits, std::span<const int> labels);

/// Per-element binary cross-entropy with logits against constant targets in
/// {0,1}; `weight` multiplies each element (same shape as logits).
Var bce_with_logits(Var logits, const Matrix& targets, const Matrix& weight);

// Plain (tape-free) helpers used by evaluation paths ---------------------

Matrix softmax_rows(const Matrix& logits);
Vector cross_entropy_rows(const Matrix& logits, std::span<const int> labels);

}  // namespace shiftlab::ad
