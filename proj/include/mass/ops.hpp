// Copyright (c) 2026, The massmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Plain (non-differentiated) dense primitives. The tape in tape.hpp reuses
// these for its forward values so both paths agree bitwise.

#pragma once

#include "mass/matrix.hpp"

#include <cmath>
#include <optional>
#include <span>

namespace mass {

template <typename DerivedA, typename DerivedB>
auto matmul(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " by " + shape_str(b.rows(), b.cols()));
  }
  MatrixX<Scalar> out = a * b;
  return out;
}

template <typename Scalar>
inline Scalar sigmoid(Scalar x) {
  // Branch keeps exp() from overflowing for large |x|.
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Derived>
auto silu(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  return a.unaryExpr([](Scalar x) { return x * sigmoid(x); }).eval();
}

/// Row-wise softmax with max subtraction.
template <typename Derived>
auto softmax_rows(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const Scalar m = a.row(i).maxCoeff();
    out.row(i) = (a.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

template <typename Derived>
auto log_softmax_rows(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const Scalar m = a.row(i).maxCoeff();
    const Scalar lse = m + std::log((a.row(i).array() - m).exp().sum());
    out.row(i) = (a.row(i).array() - lse).matrix();
  }
  return out;
}

/// Mean negative log-likelihood of one target per logit row.
template <typename Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& logits, std::span<const int> targets) {
  using Scalar = typename Derived::Scalar;
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.rows()) + " rows");
  }
  const auto logp = log_softmax_rows(logits);
  Scalar total = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols()) throw std::out_of_range("cross_entropy: target " + std::to_string(t));
    total -= logp(i, t);
  }
  return total / static_cast<Scalar>(logits.rows());
}

/// Cosine of two matrices flattened to vectors; nullopt when either has zero norm.
template <typename DerivedA, typename DerivedB>
std::optional<typename DerivedA::Scalar> flat_cosine(const Eigen::MatrixBase<DerivedA>& a,
                                                     const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("flat_cosine: " + shape_str(a.rows(), a.cols()) + " vs " + shape_str(b.rows(), b.cols()));
  }
  const auto na = a.norm();
  const auto nb = b.norm();
  if (na == 0 || nb == 0) return std::nullopt;
  return a.cwiseProduct(b).sum() / (na * nb);
}

}  // namespace mass
