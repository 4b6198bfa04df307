// SPDX-License-Identifier: Apache-2.0
#include "moecache/autodiff.hpp"

#include <stdexcept>

namespace moecache::ad {

Var Tape::leaf(Mat value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Mat(), requires_grad, nullptr});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Mat value, bool requires_grad, std::function<void(Tape&, int)> backprop) {
  nodes_.push_back(
      Node{std::move(value), Mat(), requires_grad, requires_grad ? std::move(backprop) : nullptr});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Mat Tape::grad_or_zero(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root) {
  if (!root.valid()) throw std::invalid_argument("backward: invalid root");
  Node& r = nodes_[root.id];
  if (r.value.size() != 1) throw std::invalid_argument("backward: root must be scalar");
  r.grad = Mat::Ones(1, 1);
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() != 0 && n.backprop) n.backprop(*this, i);
  }
}

Real scalar_value(const Tape& t, Var v) {
  const Mat& m = t.value(v);
  if (m.size() != 1) throw std::invalid_argument("scalar_value: not a scalar node");
  return m(0, 0);
}

namespace {
bool any_grad(const Tape& t, Var a, Var b) { return t.requires_grad(a) || t.requires_grad(b); }
}  // namespace

Var add(Tape& t, Var a, Var b) { return axpby(t, 1.0, a, 1.0, b); }

Var sub(Tape& t, Var a, Var b) { return axpby(t, 1.0, a, -1.0, b); }

Var axpby(Tape& t, Real alpha, Var a, Real beta, Var b) {
  Mat v = alpha * t.value(a) + beta * t.value(b);
  return t.record(std::move(v), any_grad(t, a, b), [=](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    tp.accumulate(a.id, alpha * g);
    tp.accumulate(b.id, beta * g);
  });
}

Var scale(Tape& t, Var a, Real s) {
  return t.record(s * t.value(a), t.requires_grad(a), [=](Tape& tp, int self) {
    tp.accumulate(a.id, s * tp.grad(Var{self}));
  });
}

Var matmul(Tape& t, Var a, Var b) {
  if (t.value(a).cols() != t.value(b).rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch");
  }
  return t.record(t.value(a) * t.value(b), any_grad(t, a, b), [=](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    tp.accumulate(a.id, g * tp.value(b).transpose());
    tp.accumulate(b.id, tp.value(a).transpose() * g);
  });
}

Var hadamard(Tape& t, Var a, Var b) {
  return t.record(t.value(a).cwiseProduct(t.value(b)), any_grad(t, a, b),
                  [=](Tape& tp, int self) {
                    const Mat& g = tp.grad(Var{self});
                    tp.accumulate(a.id, g.cwiseProduct(tp.value(b)));
                    tp.accumulate(b.id, g.cwiseProduct(tp.value(a)));
                  });
}

Var activation(Tape& t, Var a, Activation act) {
  return t.record(apply_activation(t.value(a), act), t.requires_grad(a),
                  [=](Tape& tp, int self) {
                    const Mat& g = tp.grad(Var{self});
                    tp.accumulate(a.id, g.cwiseProduct(activation_grad(tp.value(a), act)));
                  });
}

Var softmax_vec(Tape& t, Var logits) {
  const Mat& z = t.value(logits);
  if (z.cols() != 1) throw std::invalid_argument("softmax_vec: expected a column vector");
  Vec p = softmax(Vec(z.col(0)));
  return t.record(p, t.requires_grad(logits), [=](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    const Mat& y = tp.value(Var{self});
    const Real inner = (g.array() * y.array()).sum();
    tp.accumulate(logits.id, (y.array() * (g.array() - inner)).matrix());
  });
}

Var dot(Tape& t, Var a, Var b) {
  if (t.value(a).size() != t.value(b).size()) {
    throw std::invalid_argument("dot: size mismatch");
  }
  Mat v(1, 1);
  v(0, 0) = (t.value(a).array() * t.value(b).array()).sum();
  return t.record(std::move(v), any_grad(t, a, b), [=](Tape& tp, int self) {
    const Real g = tp.grad(Var{self})(0, 0);
    tp.accumulate(a.id, g * tp.value(b));
    tp.accumulate(b.id, g * tp.value(a));
  });
}

Var sum(Tape& t, Var a) {
  Mat v(1, 1);
  v(0, 0) = t.value(a).sum();
  return t.record(std::move(v), t.requires_grad(a), [=](Tape& tp, int self) {
    const Real g = tp.grad(Var{self})(0, 0);
    const Mat& va = tp.value(a);
    tp.accumulate(a.id, Mat::Constant(va.rows(), va.cols(), g));
  });
}

Var entry(Tape& t, Var a, int index) {
  const Mat& va = t.value(a);
  if (va.cols() != 1 || index < 0 || index >= va.rows()) {
    throw std::invalid_argument("entry: bad index");
  }
  Mat v(1, 1);
  v(0, 0) = va(index, 0);
  return t.record(std::move(v), t.requires_grad(a), [=](Tape& tp, int self) {
    const Real g = tp.grad(Var{self})(0, 0);
    Mat ga = Mat::Zero(tp.value(a).rows(), 1);
    ga(index, 0) = g;
    tp.accumulate(a.id, ga);
  });
}

Var slice_row(Tape& t, Var m, int row) {
  const Mat& vm = t.value(m);
  if (row < 0 || row >= vm.rows()) throw std::invalid_argument("slice_row: bad row");
  return t.record(vm.row(row).transpose(), t.requires_grad(m), [=](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    const Mat& src = tp.value(m);
    Mat gm = Mat::Zero(src.rows(), src.cols());
    gm.row(row) = g.transpose();
    tp.accumulate(m.id, gm);
  });
}

Var mul_scalar(Tape& t, Var vec, Var scalar) {
  if (t.value(scalar).size() != 1) throw std::invalid_argument("mul_scalar: scalar expected");
  const Real s = t.value(scalar)(0, 0);
  return t.record(s * t.value(vec), any_grad(t, vec, scalar), [=](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    tp.accumulate(vec.id, tp.value(scalar)(0, 0) * g);
    Mat gs(1, 1);
    gs(0, 0) = (g.array() * tp.value(vec).array()).sum();
    tp.accumulate(scalar.id, gs);
  });
}

Var nll_token(Tape& t, Var logits, int target) {
  const Mat& z = t.value(logits);
  if (z.cols() != 1) throw std::invalid_argument("nll_token: expected a column vector");
  if (target < 0 || target >= z.rows()) {
    throw std::invalid_argument("nll_token: target out of range");
  }
  Mat v(1, 1);
  v(0, 0) = log_sum_exp(z.col(0)) - z(target, 0);
  return t.record(std::move(v), t.requires_grad(logits), [=](Tape& tp, int self) {
    const Real g = tp.grad(Var{self})(0, 0);
    Vec p = softmax(Vec(tp.value(logits).col(0)));
    p[target] -= 1.0;
    tp.accumulate(logits.id, g * p);
  });
}

Var rank_hinge(Tape& t, Var p_tuned, const Vec& p_base, Real rho) {
  const Mat& pf = t.value(p_tuned);
  if (pf.cols() != 1 || pf.rows() != p_base.size()) {
    throw std::invalid_argument("rank_hinge: shape mismatch");
  }
  const int n = static_cast<int>(p_base.size());
  Real total = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (p_base[i] > p_base[j]) {
        const Real h = rho - (pf(i, 0) - pf(j, 0));
        if (h > 0.0) total += h;
      }
    }
  }
  Mat v(1, 1);
  v(0, 0) = total;
  return t.record(std::move(v), t.requires_grad(p_tuned), [=](Tape& tp, int self) {
    const Real g = tp.grad(Var{self})(0, 0);
    const Mat& pfv = tp.value(p_tuned);
    Mat gp = Mat::Zero(pfv.rows(), 1);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (p_base[i] > p_base[j] && rho - (pfv(i, 0) - pfv(j, 0)) > 0.0) {
          gp(i, 0) -= g;
          gp(j, 0) += g;
        }
      }
    }
    tp.accumulate(p_tuned.id, gp);
  });
}

Var cache_miss_term(Tape& t, Var requests, Var cache) {
  const Mat& s = t.value(requests);
  const Mat& c = t.value(cache);
  if (s.size() != c.size()) throw std::invalid_argument("cache_miss_term: size mismatch");
  Mat v(1, 1);
  v(0, 0) = (s.array() * (1.0 - c.array())).sum();
  return t.record(std::move(v), any_grad(t, requests, cache), [=](Tape& tp, int self) {
    const Real g = tp.grad(Var{self})(0, 0);
    tp.accumulate(requests.id, (g * (1.0 - tp.value(cache).array())).matrix());
    tp.accumulate(cache.id, (-g * tp.value(requests).array()).matrix());
  });
}

Var straight_through(Tape& t, Var soft, const Vec& hard) {
  if (t.value(soft).rows() != hard.size() || t.value(soft).cols() != 1) {
    throw std::invalid_argument("straight_through: shape mismatch");
  }
  return t.record(hard, t.requires_grad(soft), [=](Tape& tp, int self) {
    tp.accumulate(soft.id, tp.grad(Var{self}));
  });
}

Var detach(Tape& t, Var a) { return t.constant(t.value(a)); }

}  // namespace moecache::ad
