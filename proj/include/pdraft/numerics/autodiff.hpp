#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "pdraft/numerics/bit_matrix.hpp"
#include "pdraft/numerics/tensor.hpp"

namespace pdraft {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor2D& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Reverse-mode tape over whole-matrix primitives.
//
// Nodes are appended in forward order; backward() walks them in exact reverse
// order. A non-recording tape evaluates values only, which is what the
// inference paths use. Leaves created from external tensors (parameters)
// reference the caller's storage instead of copying it, so the referenced
// tensor must outlive the tape and stay unmodified while it is in use.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor2D value);
  Var variable(Tensor2D value);
  Var external(const Tensor2D& value, bool requires_grad);

  const Tensor2D& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient of the last backward() pass; zero-sized when no path reached the node.
  const Tensor2D& grad(std::size_t id) const { return nodes_[id].grad; }
  Tensor2D grad_or_zero(Var v) const;

  void backward(Var loss);

  // Used by the op implementations.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;
  Var push(Tensor2D value, std::initializer_list<Var> inputs, BackwardFn backward);
  Tensor2D& grad_slot(std::size_t id);
  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    if (!nodes_[v.id].requires_grad) return;
    Tensor2D& slot = grad_slot(v.id);
    slot.noalias() += g;
  }

 private:
  struct Node {
    Tensor2D value;
    const Tensor2D* external = nullptr;
    Tensor2D grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool recording_;
  std::vector<Node> nodes_;
};

inline const Tensor2D& Var::value() const { return tape->value(id); }

// ---- primitives -----------------------------------------------------------

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
// Adds a 1 x cols row vector to every row.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
// Multiplies by a learnable 1x1 scalar.
Var mul_scalar(Var a, Var s);
Var hadamard(Var a, Var b);
Var hadamard_const(Var a, const Tensor2D& m);
Var silu(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax_masked(Var logits, const BitMatrix& mask);
Var gather_rows(Var table, std::span<const int> rows);
Var vstack(Var top, Var bottom);
Var sum(Var a);
// Rotates consecutive column pairs (2j, 2j+1) of row i by positions[i] * base^(-2j/cols).
Var rope(Var x, std::span<const int> positions, double base);
// sum_i weight_i * CE(logits_i, label_i) / denom, returned as 1x1.
Var cross_entropy(Var logits, std::span<const int> labels, std::span<const double> weights,
                  double denom);

// Plain-value helpers shared with inference code and tests.
Tensor2D softmax_masked_values(const Tensor2D& logits, const BitMatrix& mask);
void rope_in_place(Tensor2D& x, std::span<const int> positions, double base, int direction = 1);

}  // namespace pdraft
