#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dpt/tensor.hpp"

namespace dpt {

inline constexpr double kProbFloor = 1e-12;

struct LossWeights {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double tau = 0.01;

  void validate() const;
};

/// Cosine similarity; throws DegenerateInputError for a zero vector.
double similarity(const RowVector<double>& w, const RowVector<double>& f);

/// softmax_i(sim(w_i, f) / tau) over the rows of `w`.
RowVector<double> class_probs(const Matrix& w, const RowVector<double>& f, double tau);

/// Argmax, lowest index on ties.
int predict(const RowVector<double>& probs);

/// -log p_s[label] with p_s floored at 1e-12.
double loss_ce(int label, const RowVector<double>& p_s);
/// sum p_t log(p_t / p_s) - p_t + p_s, both floored at 1e-12. On the simplex the
/// extra terms cancel; after flooring they keep every term nonnegative.
double loss_kl(const RowVector<double>& p_t, const RowVector<double>& p_s);
/// (1/K) sum_i ||teacher_i - student_i||_1.
double loss_l1(const Matrix& teacher, const Matrix& student);
double loss_total(double ce, double l1, double kl, const LossWeights& weights);

// Tape versions; the teacher side is always a constant.

/// 1 x K logits sim(w_i, f) / tau.
Var cosine_logits(Var w, Var f, double tau);
Var class_probs(Var w, Var f, double tau);
Var loss_ce(int label, Var p_s);
Var loss_kl(const RowVector<double>& p_t, Var p_s);
Var loss_l1(const Matrix& teacher, Var student);

/// Batch means over the rows of a B x K probability matrix.
Var loss_ce_batch(const std::vector<int>& labels, Var probs);
Var loss_kl_batch(const Matrix& teacher_probs, Var probs);

enum class Benchmark { few_shot, base_to_novel };

std::string_view to_string(Benchmark b);
Benchmark parse_benchmark(std::string_view s);

/// Per-dataset (lambda1, lambda2) defaults. Missing cells fall back.
class LambdaTable {
 public:
  struct Entry {
    double lambda1;
    double lambda2;
  };

  void set(const std::string& dataset, Benchmark benchmark, Entry entry);
  std::optional<Entry> find(const std::string& dataset, Benchmark benchmark) const;
  Entry lookup(const std::string& dataset, Benchmark benchmark, Entry fallback) const;
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::pair<std::string, Benchmark>, Entry> entries_;
};

}  // namespace dpt
