#pragma once

#include <Eigen/Core>
#include <cmath>

namespace dpt {

// RowMajor to match the on-disk weight layout.
template <class S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <class S>
using ColVector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Matrix = RowMatrix<double>;
using Vector = ColVector<double>;
using Index = Eigen::Index;

// Max-shifted softmax of every row.
template <class Derived>
RowMatrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  RowMatrix<S> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const S shift = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - shift).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <class Derived>
RowMatrix<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  RowMatrix<S> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const S shift = x.row(r).maxCoeff();
    const S lse = shift + std::log((x.row(r).array() - shift).exp().sum());
    out.row(r) = (x.row(r).array() - lse).matrix();
  }
  return out;
}

// Per-row standardisation without the affine part.
template <class Derived>
RowMatrix<typename Derived::Scalar> standardize_rows(const Eigen::MatrixBase<Derived>& x,
                                                     typename Derived::Scalar eps) {
  using S = typename Derived::Scalar;
  RowMatrix<S> out(x.rows(), x.cols());
  const S n = static_cast<S>(x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).sum() / n;
    const auto centered = (x.row(r).array() - mean).eval();
    const S var = centered.square().sum() / n;
    out.row(r) = (centered / std::sqrt(var + eps)).matrix();
  }
  return out;
}

template <class Derived, class G, class B>
RowMatrix<typename Derived::Scalar> layer_norm_rows(const Eigen::MatrixBase<Derived>& x,
                                                    const Eigen::MatrixBase<G>& gain,
                                                    const Eigen::MatrixBase<B>& bias,
                                                    typename Derived::Scalar eps) {
  auto out = standardize_rows(x, eps);
  for (Index r = 0; r < out.rows(); ++r) {
    out.row(r) = (out.row(r).array() * gain.array() + bias.array()).matrix();
  }
  return out;
}

template <class Derived>
RowMatrix<typename Derived::Scalar> l2_normalize_rows(const Eigen::MatrixBase<Derived>& x) {
  RowMatrix<typename Derived::Scalar> out = x;
  for (Index r = 0; r < out.rows(); ++r) out.row(r) /= out.row(r).norm();
  return out;
}

template <class S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x / std::sqrt(S(2))));
}

template <class S>
S gelu_derivative(S x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  const S cdf = S(0.5) * (S(1) + std::erf(x / std::sqrt(S(2))));
  return cdf + x * S(kInvSqrt2Pi) * std::exp(S(-0.5) * x * x);
}

// Cosine similarity between two vectors of any orientation.
template <class A, class B>
typename A::Scalar cosine(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  return a.reshaped().dot(b.reshaped()) / (a.norm() * b.norm());
}

template <class S>
S harmonic_mean(S base, S novel) {
  if (base <= S(0) || novel <= S(0)) return S(0);
  return S(2) * base * novel / (base + novel);
}

}  // namespace dpt
