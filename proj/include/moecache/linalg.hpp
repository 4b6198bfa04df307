// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace moecache {

using Real = double;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

template <typename Scalar>
using Vector = Eigen::Vector<Scalar, Eigen::Dynamic>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

enum class Activation { kSiLU, kReLU };

template <typename Scalar>
Scalar silu(Scalar x) {
  return x / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
Scalar silu_grad(Scalar x) {
  const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
  return s * (Scalar(1) + x * (Scalar(1) - s));
}

template <typename Scalar>
Scalar relu(Scalar x) {
  return x > Scalar(0) ? x : Scalar(0);
}

template <typename Derived>
auto apply_activation(const Eigen::MatrixBase<Derived>& x, Activation act) {
  using Scalar = typename Derived::Scalar;
  if (act == Activation::kSiLU) {
    return x.unaryExpr([](Scalar v) { return silu(v); }).eval();
  }
  return x.unaryExpr([](Scalar v) { return relu(v); }).eval();
}

template <typename Derived>
auto activation_grad(const Eigen::MatrixBase<Derived>& x, Activation act) {
  using Scalar = typename Derived::Scalar;
  if (act == Activation::kSiLU) {
    return x.unaryExpr([](Scalar v) { return silu_grad(v); }).eval();
  }
  return x.unaryExpr([](Scalar v) { return v > Scalar(0) ? Scalar(1) : Scalar(0); }).eval();
}

/// Numerically stable softmax over a vector of logits. Shift-invariant by
/// construction; rejects non-finite input.
template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (!logits.allFinite()) {
    throw std::invalid_argument("softmax: non-finite logits");
  }
  const Scalar shift = logits.maxCoeff();
  Vector<Scalar> e = (logits.array() - shift).exp().matrix();
  return e / e.sum();
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& x) {
  const auto m = x.maxCoeff();
  return m + std::log((x.array() - m).exp().sum());
}

/// Indices of the k largest entries, ties broken toward the lowest index.
template <typename Derived>
std::vector<int> top_k_indices(const Eigen::MatrixBase<Derived>& values, int k) {
  const int n = static_cast<int>(values.size());
  if (k < 1 || k > n) {
    throw std::invalid_argument("top_k_indices: k out of range");
  }
  const Vector<typename Derived::Scalar> flat = values.reshaped();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return flat[a] > flat[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

inline Vec indicator(const std::vector<int>& indices, int size) {
  Vec r = Vec::Zero(size);
  for (int i : indices) r[i] = 1.0;
  return r;
}

}  // namespace moecache
