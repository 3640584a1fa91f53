#include "dpt/losses.hpp"

#include <cmath>
#include <string>

namespace dpt {

void LossWeights::validate() const {
  if (!(tau > 0.0)) throw ConfigError("loss.tau must be positive");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("loss weights must be non-negative");
}

double similarity(const RowVector<double>& w, const RowVector<double>& f) {
  if (w.size() != f.size()) throw DimensionError("similarity: length mismatch");
  const double nw = w.norm();
  const double nf = f.norm();
  if (nw == 0.0 || nf == 0.0) throw DegenerateInputError("similarity: zero vector");
  return w.dot(f) / (nw * nf);
}

RowVector<double> class_probs(const Matrix& w, const RowVector<double>& f, double tau) {
  if (!(tau > 0.0)) throw ConfigError("class_probs: tau must be positive");
  if (w.rows() < 2) throw ContractError("class_probs: need at least two classes");
  RowVector<double> logits(w.rows());
  for (Index i = 0; i < w.rows(); ++i) logits(i) = similarity(w.row(i), f) / tau;
  return softmax_rows(logits);
}

int predict(const RowVector<double>& probs) {
  if (probs.size() == 0) throw DimensionError("predict: empty distribution");
  Index best = 0;
  for (Index i = 1; i < probs.size(); ++i) {
    if (probs(i) > probs(best)) best = i;
  }
  return static_cast<int>(best);
}

double loss_ce(int label, const RowVector<double>& p_s) {
  if (label < 0 || label >= p_s.size()) throw LookupError("loss_ce: label out of range");
  return -std::log(std::max(p_s(label), kProbFloor));
}

double loss_kl(const RowVector<double>& p_t, const RowVector<double>& p_s) {
  if (p_t.size() != p_s.size()) throw DimensionError("loss_kl: length mismatch");
  double kl = 0.0;
  for (Index i = 0; i < p_t.size(); ++i) {
    const double t = std::max(p_t(i), kProbFloor);
    const double s = std::max(p_s(i), kProbFloor);
    kl += t * (std::log(t) - std::log(s)) - t + s;
  }
  return kl;
}

double loss_l1(const Matrix& teacher, const Matrix& student) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols()) {
    throw ContractError("loss_l1: teacher and student banks differ in shape");
  }
  if (teacher.rows() == 0) throw ContractError("loss_l1: empty bank");
  return (teacher - student).cwiseAbs().sum() / static_cast<double>(teacher.rows());
}

double loss_total(double ce, double l1, double kl, const LossWeights& weights) {
  return ce + weights.lambda1 * l1 + weights.lambda2 * kl;
}

Var cosine_logits(Var w, Var f, double tau) {
  if (!(tau > 0.0)) throw ConfigError("cosine_logits: tau must be positive");
  return scale(matmul(l2_normalize_rows(f), transpose(l2_normalize_rows(w))), 1.0 / tau);
}

Var class_probs(Var w, Var f, double tau) {
  if (w.rows() < 2) throw ContractError("class_probs: need at least two classes");
  return softmax(cosine_logits(w, f, tau), 1);
}

Var loss_ce(int label, Var p_s) {
  if (label < 0 || label >= p_s.cols()) throw LookupError("loss_ce: label out of range");
  return scale(log(clamp_min(slice(p_s, 0, 1, label, 1), kProbFloor)), -1.0);
}

Var loss_kl(const RowVector<double>& p_t, Var p_s) {
  if (p_t.size() != p_s.cols() || p_s.rows() != 1) throw DimensionError("loss_kl: shape mismatch");
  Tape& tape = *p_s.tape;
  const Matrix t = p_t.cwiseMax(kProbFloor);
  const Var s = clamp_min(p_s, kProbFloor);
  const Var log_ratio = sub(tape.constant(t.array().log().matrix()), log(s));
  return add(sum(mul(tape.constant(t), log_ratio)), add(sum(s), tape.constant(Matrix::Constant(1, 1, -t.sum()))));
}

Var loss_l1(const Matrix& teacher, Var student) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols()) {
    throw ContractError("loss_l1: teacher and student banks differ in shape");
  }
  Tape& tape = *student.tape;
  return scale(sum(abs(sub(tape.constant(teacher), student))), 1.0 / static_cast<double>(teacher.rows()));
}

Var loss_ce_batch(const std::vector<int>& labels, Var probs) {
  if (static_cast<Index>(labels.size()) != probs.rows()) throw DimensionError("loss_ce_batch: label count mismatch");
  Matrix onehot = Matrix::Zero(probs.rows(), probs.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= probs.cols()) throw LookupError("loss_ce_batch: label out of range");
    onehot(static_cast<Index>(i), labels[i]) = 1.0;
  }
  const Var picked = sum(mul(probs.tape->constant(std::move(onehot)), log(clamp_min(probs, kProbFloor))));
  return scale(picked, -1.0 / static_cast<double>(labels.size()));
}

Var loss_kl_batch(const Matrix& teacher_probs, Var probs) {
  if (teacher_probs.rows() != probs.rows() || teacher_probs.cols() != probs.cols()) {
    throw DimensionError("loss_kl_batch: shape mismatch");
  }
  Tape& tape = *probs.tape;
  const Matrix t = teacher_probs.cwiseMax(kProbFloor);
  const Var s = clamp_min(probs, kProbFloor);
  const Var log_ratio = sub(tape.constant(t.array().log().matrix()), log(s));
  const Var total = add(sum(mul(tape.constant(t), log_ratio)), add(sum(s), tape.constant(Matrix::Constant(1, 1, -t.sum()))));
  return scale(total, 1.0 / static_cast<double>(probs.rows()));
}

std::string_view to_string(Benchmark b) { return b == Benchmark::few_shot ? "few_shot" : "base_to_novel"; }

Benchmark parse_benchmark(std::string_view s) {
  if (s == "few_shot") return Benchmark::few_shot;
  if (s == "base_to_novel") return Benchmark::base_to_novel;
  throw ConfigError("benchmark must be few_shot|base_to_novel, got '" + std::string(s) + "'");
}

void LambdaTable::set(const std::string& dataset, Benchmark benchmark, Entry entry) {
  if (entry.lambda1 < 0.0 || entry.lambda2 < 0.0) throw ConfigError("lambda table: negative weight for " + dataset);
  entries_[{dataset, benchmark}] = entry;
}

std::optional<LambdaTable::Entry> LambdaTable::find(const std::string& dataset, Benchmark benchmark) const {
  const auto it = entries_.find({dataset, benchmark});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

LambdaTable::Entry LambdaTable::lookup(const std::string& dataset, Benchmark benchmark, Entry fallback) const {
  return find(dataset, benchmark).value_or(fallback);
}

}  // namespace dpt
