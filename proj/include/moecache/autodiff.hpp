// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "moecache/linalg.hpp"

namespace moecache::ad {

class Tape;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Tape of matrix-valued nodes recorded in evaluation order. One tape per
/// objective evaluation; backward() walks the tape in reverse.
class Tape {
 public:
  Var leaf(Mat value, bool requires_grad = true);
  Var constant(Mat value) { return leaf(std::move(value), false); }

  Var record(Mat value, bool requires_grad, std::function<void(Tape&, int)> backprop);

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward() root w.r.t. v; empty if untouched.
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }
  Mat grad_or_zero(Var v) const;

  void accumulate(int id, const Mat& g);
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::function<void(Tape&, int)> backprop;
  };
  std::vector<Node> nodes_;
};

Real scalar_value(const Tape& t, Var v);

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
/// alpha * a + beta * b with constant coefficients.
Var axpby(Tape& t, Real alpha, Var a, Real beta, Var b);
Var scale(Tape& t, Var a, Real s);
Var matmul(Tape& t, Var a, Var b);
Var hadamard(Tape& t, Var a, Var b);
Var activation(Tape& t, Var a, Activation act);
Var softmax_vec(Tape& t, Var logits);
Var dot(Tape& t, Var a, Var b);
Var sum(Tape& t, Var a);
Var entry(Tape& t, Var a, int index);
/// Row i of a matrix as a column vector.
Var slice_row(Tape& t, Var m, int row);
Var mul_scalar(Tape& t, Var vec, Var scalar);
/// -log softmax(logits)[target], numerically stable.
Var nll_token(Tape& t, Var logits, int target);
/// sum over base-ordered pairs of [rho - (p_i - p_j)]_+.
Var rank_hinge(Tape& t, Var p_tuned, const Vec& p_base, Real rho);
/// <requests, 1 - cache>.
Var cache_miss_term(Tape& t, Var requests, Var cache);
/// Forward value `hard`, identity gradient into `soft`.
Var straight_through(Tape& t, Var soft, const Vec& hard);
Var detach(Tape& t, Var a);

}  // namespace moecache::ad
