#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpt/errors.hpp"
#include "dpt/numeric.hpp"

namespace dpt {

/// Named dense float64 storage that can take part in a Tape as a leaf.
///
/// Tensors are rank-2 (a vector is a 1 x n row). `grad` stays empty until a
/// backward pass reaches the tensor through a Tape on which it was recorded.
struct Tensor {
  Matrix value;
  // Gradient buffers are not part of the logical value; a frozen tensor is
  // never written through a const reference.
  mutable std::optional<Matrix> grad;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Matrix v, bool trainable = false) : value(std::move(v)), requires_grad(trainable) {}

  Index rows() const { return value.rows(); }
  Index cols() const { return value.cols(); }
  std::array<Index, 2> shape() const { return {value.rows(), value.cols()}; }
  void zero_grad() const { grad.reset(); }
};

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
};

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended as ops execute, so the list is topologically ordered by
/// construction; backward() walks it once in reverse.
class Tape {
 public:
  // Receives the output gradient; accumulates into inputs via accumulate().
  using Pullback = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Records `t`. It participates in differentiation iff t.requires_grad.
  Var leaf(const Tensor& t);
  /// Tape-owned input that always receives a gradient (see grad()).
  Var variable(Matrix value);

  Var record(Matrix value, std::initializer_list<Var> inputs, Pullback pullback, const char* op);
  Var record(Matrix value, std::span<const Var> inputs, Pullback pullback, const char* op);

  void accumulate(std::size_t id, const Matrix& g);
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Gradients of recorded leaf
  /// tensors are accumulated into Tensor::grad (zero if unreached).
  void backward(Var loss);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  /// Gradient of the last backward() with respect to node `v`.
  const Matrix& grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Raise NumericError if an op yields NaN/Inf.
  bool check_finite = true;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> inputs;
    Pullback pullback;
    const Tensor* leaf = nullptr;
    bool needs_grad = false;
    bool reached = false;
  };

  Var push(Node node, const char* op);

  std::vector<Node> nodes_;
};

// ---- differentiable ops -------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
/// Elementwise a + b; b may be a 1 x n row broadcast over a's rows.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
/// Elementwise product; b may be 1 x 1 (scalar broadcast).
Var mul(Var a, Var b);
Var gelu(Var a);
/// axis 1 normalises each row, axis 0 each column.
Var softmax(Var x, int axis = 1);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice(Var a, Index row, Index nrows, Index col, Index ncols);
Var slice_rows(Var a, Index row, Index nrows);
Var slice_cols(Var a, Index col, Index ncols);
/// Embedding lookup: out.row(i) = table.row(ids[i]).
Var gather_rows(Var table, std::span<const int> ids);
Var sum(Var a);
Var mean(Var a);
Var log(Var a);
Var exp(Var a);
Var abs(Var a);
Var clamp_min(Var a, double floor);
Var l2_normalize_rows(Var a);

// ---- optimisers -----------------------------------------------------------

/// p <- p - lr * grad for every trainable tensor; frozen tensors untouched.
void sgd_step(std::span<Tensor* const> params, double lr);

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(std::span<Tensor* const> params);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

void zero_grads(std::span<Tensor* const> params);

}  // namespace dpt
