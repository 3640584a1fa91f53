#include "dpt/tensor.hpp"

#include <cmath>
#include <string>

namespace dpt {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ContractError("Var is not attached to a tape");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
  return tape_of(a);
}

}  // namespace

const Matrix& Var::value() const { return tape->value(id); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractError("scalar() on a " + shape_str(v) + " value");
  return v(0, 0);
}

// ---- Tape -------------------------------------------------------------------

Var Tape::push(Node node, const char* op) {
  if (check_finite && !node.value.allFinite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n), "constant");
}

Var Tape::leaf(const Tensor& t) {
  Node n;
  n.value = t.value;
  if (t.requires_grad) {
    n.leaf = &t;
    n.needs_grad = true;
  }
  return push(std::move(n), "leaf");
}

Var Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  return push(std::move(n), "variable");
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Pullback pullback, const char* op) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(pullback), op);
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Pullback pullback, const char* op) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.tape != this) throw ContractError(std::string(op) + ": input from another tape");
    n.inputs.push_back(in.id);
    n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
  }
  if (n.needs_grad) n.pullback = std::move(pullback);
  return push(std::move(n), op);
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.reached) {
    n.grad = g;
    n.reached = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss recorded on another tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(nodes_[loss.id].value));
  }
  for (Node& n : nodes_) {
    n.reached = false;
    n.grad.resize(0, 0);
  }
  accumulate(loss.id, Matrix::Ones(1, 1));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.reached || !n.pullback) continue;
    n.pullback(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.leaf == nullptr) continue;
    const Tensor& t = *n.leaf;
    if (!t.grad || t.grad->rows() != t.rows() || t.grad->cols() != t.cols()) {
      t.grad = Matrix::Zero(t.rows(), t.cols());
    }
    if (n.reached) *t.grad += n.grad;
  }
}

const Matrix& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (!n.reached) {
    static thread_local Matrix zeros;
    zeros = Matrix::Zero(n.value.rows(), n.value.cols());
    return zeros;
  }
  return n.grad;
}

// ---- ops ------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.value()) + " x " + shape_str(b.value()));
  }
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(a.id)) tp.accumulate(a.id, g * tp.value(b.id).transpose());
    if (tp.needs_grad(b.id)) tp.accumulate(b.id, tp.value(a.id).transpose() * g);
  }, "matmul");
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().transpose();
  return t.record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a.id, g.transpose());
  }, "transpose");
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols() || (bv.rows() != av.rows() && bv.rows() != 1)) {
    throw DimensionError("add: " + shape_str(av) + " + " + shape_str(bv));
  }
  const bool broadcast = bv.rows() != av.rows();
  Matrix out = av;
  if (broadcast) {
    out.rowwise() += bv.row(0);
  } else {
    out += bv;
  }
  return t.record(std::move(out), {a, b}, [a, b, broadcast](Tape& tp, const Matrix& g) {
    tp.accumulate(a.id, g);
    if (!tp.needs_grad(b.id)) return;
    if (broadcast) {
      tp.accumulate(b.id, g.colwise().sum());
    } else {
      tp.accumulate(b.id, g);
    }
  }, "add");
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Matrix out = a.value() * s;
  return t.record(std::move(out), {a}, [a, s](Tape& tp, const Matrix& g) {
    tp.accumulate(a.id, g * s);
  }, "scale");
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const bool scalar_b = bv.size() == 1;
  if (!scalar_b && (av.rows() != bv.rows() || av.cols() != bv.cols())) {
    throw DimensionError("mul: " + shape_str(av) + " * " + shape_str(bv));
  }
  Matrix out = scalar_b ? Matrix(av * bv(0, 0)) : Matrix(av.cwiseProduct(bv));
  return t.record(std::move(out), {a, b}, [a, b, scalar_b](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(a.id);
    const Matrix& y = tp.value(b.id);
    if (scalar_b) {
      if (tp.needs_grad(a.id)) tp.accumulate(a.id, g * y(0, 0));
      if (tp.needs_grad(b.id)) tp.accumulate(b.id, Matrix::Constant(1, 1, g.cwiseProduct(x).sum()));
    } else {
      if (tp.needs_grad(a.id)) tp.accumulate(a.id, g.cwiseProduct(y));
      if (tp.needs_grad(b.id)) tp.accumulate(b.id, g.cwiseProduct(x));
    }
  }, "mul");
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().unaryExpr([](double x) { return gelu(x); });
  return t.record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a.id, g.cwiseProduct(tp.value(a.id).unaryExpr([](double x) { return gelu_derivative(x); })));
  }, "gelu");
}

Var softmax(Var x, int axis) {
  Tape& t = tape_of(x);
  if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  const Matrix& xv = x.value();
  if ((axis == 1 && xv.cols() == 0) || (axis == 0 && xv.rows() == 0)) {
    throw DimensionError("softmax: empty axis");
  }
  Matrix out = axis == 1 ? softmax_rows(xv) : Matrix(softmax_rows(xv.transpose()).transpose());
  Matrix y = out;
  return t.record(std::move(out), {x}, [x, y = std::move(y), axis](Tape& tp, const Matrix& g) {
    Matrix gx(y.rows(), y.cols());
    if (axis == 1) {
      const Vector dots = g.cwiseProduct(y).rowwise().sum();
      for (Index r = 0; r < y.rows(); ++r) gx.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dots(r)).matrix());
    } else {
      const RowVector<double> dots = g.cwiseProduct(y).colwise().sum();
      for (Index c = 0; c < y.cols(); ++c) gx.col(c) = y.col(c).cwiseProduct((g.col(c).array() - dots(c)).matrix());
    }
    tp.accumulate(x.id, gx);
  }, "softmax");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = tape_of(x, gain);
  tape_of(x, bias);
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const Matrix& xv = x.value();
  if (gain.rows() != 1 || bias.rows() != 1 || gain.cols() != xv.cols() || bias.cols() != xv.cols()) {
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(xv.cols()));
  }
  Matrix xhat = standardize_rows(xv, eps);
  Vector inv_std(xv.rows());
  const double n = static_cast<double>(xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).sum() / n;
    const double var = (xv.row(r).array() - mu).square().sum() / n;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
  }
  Matrix out = xhat;
  for (Index r = 0; r < out.rows(); ++r) {
    out.row(r) = (xhat.row(r).array() * gain.value().array() + bias.value().array()).matrix();
  }
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(gain.id)) tp.accumulate(gain.id, g.cwiseProduct(xhat).colwise().sum());
    if (tp.needs_grad(bias.id)) tp.accumulate(bias.id, g.colwise().sum());
    if (!tp.needs_grad(x.id)) return;
    const Matrix& gv = tp.value(gain.id);
    Matrix gx(g.rows(), g.cols());
    for (Index r = 0; r < g.rows(); ++r) {
      const RowVector<double> gh = g.row(r).cwiseProduct(gv);
      const double m1 = gh.mean();
      const double m2 = gh.cwiseProduct(xhat.row(r)).mean();
      gx.row(r) = inv_std(r) * (gh.array() - m1 - xhat.row(r).array() * m2).matrix();
    }
    tp.accumulate(x.id, gx);
  }, "layer_norm");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Tape& t = tape_of(parts[0]);
  const Index cols = parts[0].cols();
  Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [ins, offsets](Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (tp.needs_grad(ins[i].id)) tp.accumulate(ins[i].id, g.middleRows(offsets[i], ins[i].rows()));
    }
  }, "concat_rows");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [ins, offsets](Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (tp.needs_grad(ins[i].id)) tp.accumulate(ins[i].id, g.middleCols(offsets[i], ins[i].cols()));
    }
  }, "concat_cols");
}

Var slice(Var a, Index row, Index nrows, Index col, Index ncols) {
  Tape& t = tape_of(a);
  const Matrix& av = a.value();
  if (row < 0 || col < 0 || nrows < 0 || ncols < 0 || row + nrows > av.rows() || col + ncols > av.cols()) {
    throw DimensionError("slice out of range for " + shape_str(av));
  }
  Matrix out = av.block(row, col, nrows, ncols);
  const Index R = av.rows(), C = av.cols();
  return t.record(std::move(out), {a}, [a, row, nrows, col, ncols, R, C](Tape& tp, const Matrix& g) {
    Matrix ga = Matrix::Zero(R, C);
    ga.block(row, col, nrows, ncols) = g;
    tp.accumulate(a.id, ga);
  }, "slice");
}

Var slice_rows(Var a, Index row, Index nrows) { return slice(a, row, nrows, 0, a.cols()); }
Var slice_cols(Var a, Index col, Index ncols) { return slice(a, 0, a.rows(), col, ncols); }

Var gather_rows(Var table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  const Matrix& tv = table.value();
  Matrix out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(tv.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  const Index R = tv.rows();
  return t.record(std::move(out), {table}, [table, idv = std::move(idv), R](Tape& tp, const Matrix& g) {
    Matrix gt = Matrix::Zero(R, g.cols());
    for (std::size_t i = 0; i < idv.size(); ++i) gt.row(idv[i]) += g.row(static_cast<Index>(i));
    tp.accumulate(table.id, gt);
  }, "gather_rows");
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  const Index R = a.rows(), C = a.cols();
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return t.record(std::move(out), {a}, [a, R, C](Tape& tp, const Matrix& g) {
    tp.accumulate(a.id, Matrix::Constant(R, C, g(0, 0)));
  }, "sum");
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var log(Var a) {
  Tape& t = tape_of(a);
  if ((a.value().array() <= 0.0).any()) throw NumericError("log of a non-positive value");
  Matrix out = a.value().array().log().matrix();
  return t.record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a.id, g.cwiseQuotient(tp.value(a.id)));
  }, "log");
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array().exp().matrix();
  Matrix y = out;
  return t.record(std::move(out), {a}, [a, y = std::move(y)](Tape& tp, const Matrix& g) {
    tp.accumulate(a.id, g.cwiseProduct(y));
  }, "exp");
}

Var abs(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().cwiseAbs();
  return t.record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    const Matrix sign = tp.value(a.id).unaryExpr([](double x) { return double((x > 0) - (x < 0)); });
    tp.accumulate(a.id, g.cwiseProduct(sign));
  }, "abs");
}

Var clamp_min(Var a, double floor) {
  Tape& t = tape_of(a);
  Matrix out = a.value().cwiseMax(floor);
  return t.record(std::move(out), {a}, [a, floor](Tape& tp, const Matrix& g) {
    const Matrix pass = tp.value(a.id).unaryExpr([floor](double x) { return x > floor ? 1.0 : 0.0; });
    tp.accumulate(a.id, g.cwiseProduct(pass));
  }, "clamp_min");
}

Var l2_normalize_rows(Var a) {
  Tape& t = tape_of(a);
  const Matrix& av = a.value();
  Vector norms = av.rowwise().norm();
  if ((norms.array() == 0.0).any()) throw DegenerateInputError("l2_normalize: zero row");
  Matrix out = av;
  for (Index r = 0; r < out.rows(); ++r) out.row(r) /= norms(r);
  Matrix y = out;
  return t.record(std::move(out), {a}, [a, y = std::move(y), norms = std::move(norms)](Tape& tp, const Matrix& g) {
    Matrix ga(y.rows(), y.cols());
    for (Index r = 0; r < y.rows(); ++r) {
      const double d = y.row(r).dot(g.row(r));
      ga.row(r) = (g.row(r) - d * y.row(r)) / norms(r);
    }
    tp.accumulate(a.id, ga);
  }, "l2_normalize_rows");
}

// ---- optimisers -------------------------------------------------------------

void sgd_step(std::span<Tensor* const> params, double lr) {
  if (!(lr > 0.0)) throw ConfigError("sgd_step: learning rate must be positive");
  for (Tensor* p : params) {
    if (!p->requires_grad) continue;
    if (!p->grad) throw ContractError("sgd_step: trainable tensor has no gradient");
    p->value -= lr * *p->grad;
  }
}

void Adam::step(std::span<Tensor* const> params) {
  if (m_.empty()) {
    for (Tensor* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor* p = params[i];
    if (!p->requires_grad) continue;
    if (!p->grad) throw ContractError("Adam: trainable tensor has no gradient");
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * *p->grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p->grad->cwiseAbs2();
    p->value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

void zero_grads(std::span<Tensor* const> params) {
  for (Tensor* p : params) p->zero_grad();
}

}  // namespace dpt
