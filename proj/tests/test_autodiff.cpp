// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>

#include "moecache/autodiff.hpp"
#include "test_util.hpp"

using namespace moecache;

namespace {

/// Numeric gradient of a scalar graph w.r.t. one leaf matrix.
Mat numeric_grad(const std::function<Real(const Mat&)>& f, const Mat& x, Real eps = 1e-6) {
  Mat g(x.rows(), x.cols());
  Mat work = x;
  for (int i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < x.cols(); ++j) {
      work(i, j) = x(i, j) + eps;
      const Real up = f(work);
      work(i, j) = x(i, j) - eps;
      const Real down = f(work);
      work(i, j) = x(i, j);
      g(i, j) = (up - down) / (2.0 * eps);
    }
  }
  return g;
}

void check_close(const Mat& a, const Mat& b, Real tol = 1e-6) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  CHECK((a - b).cwiseAbs().maxCoeff() < tol);
}

}  // namespace

TEST_CASE("matmul gradients match finite differences") {
  SeedStream rng(1);
  const Mat a0 = testutil::random_matrix(rng, 3, 4);
  const Mat b0 = testutil::random_matrix(rng, 4, 2);

  auto eval = [&](const Mat& a, const Mat& b) {
    ad::Tape t;
    return ad::scalar_value(t, ad::sum(t, ad::matmul(t, t.leaf(a), t.leaf(b))));
  };
  ad::Tape t;
  ad::Var a = t.leaf(a0), b = t.leaf(b0);
  ad::Var root = ad::sum(t, ad::matmul(t, a, b));
  t.backward(root);
  check_close(t.grad(a), numeric_grad([&](const Mat& m) { return eval(m, b0); }, a0));
  check_close(t.grad(b), numeric_grad([&](const Mat& m) { return eval(a0, m); }, b0));
}

TEST_CASE("softmax, activation, hadamard, axpby gradients") {
  SeedStream rng(2);
  const Mat x0 = testutil::random_matrix(rng, 5, 1);
  const Mat y0 = testutil::random_matrix(rng, 5, 1);
  const Vec weights = testutil::random_matrix(rng, 5, 1);

  auto graph = [&](ad::Tape& t, ad::Var x, ad::Var y) {
    ad::Var p = ad::softmax_vec(t, x);
    ad::Var s = ad::activation(t, y, Activation::kSiLU);
    ad::Var h = ad::hadamard(t, p, s);
    ad::Var mix = ad::axpby(t, 0.7, h, -1.3, p);
    return ad::dot(t, mix, t.constant(weights));
  };
  ad::Tape t;
  ad::Var x = t.leaf(x0), y = t.leaf(y0);
  t.backward(graph(t, x, y));

  auto eval_x = [&](const Mat& m) {
    ad::Tape tt;
    return ad::scalar_value(tt, graph(tt, tt.leaf(m), tt.leaf(y0)));
  };
  auto eval_y = [&](const Mat& m) {
    ad::Tape tt;
    return ad::scalar_value(tt, graph(tt, tt.leaf(x0), tt.leaf(m)));
  };
  check_close(t.grad(x), numeric_grad(eval_x, x0));
  check_close(t.grad(y), numeric_grad(eval_y, y0));
}

TEST_CASE("relu activation gradient away from the kink") {
  Mat x0(4, 1);
  x0 << -1.5, -0.3, 0.4, 2.0;
  ad::Tape t;
  ad::Var x = t.leaf(x0);
  t.backward(ad::sum(t, ad::activation(t, x, Activation::kReLU)));
  Mat expect(4, 1);
  expect << 0.0, 0.0, 1.0, 1.0;
  check_close(t.grad(x), expect, 1e-12);
}

TEST_CASE("entry, mul_scalar, scale gradients") {
  SeedStream rng(3);
  const Mat v0 = testutil::random_matrix(rng, 6, 1);
  auto graph = [&](ad::Tape& t, ad::Var v) {
    ad::Var e = ad::entry(t, v, 2);
    ad::Var scaled = ad::mul_scalar(t, v, e);
    return ad::sum(t, ad::scale(t, scaled, 0.5));
  };
  ad::Tape t;
  ad::Var v = t.leaf(v0);
  t.backward(graph(t, v));
  auto eval = [&](const Mat& m) {
    ad::Tape tt;
    return ad::scalar_value(tt, graph(tt, tt.leaf(m)));
  };
  check_close(t.grad(v), numeric_grad(eval, v0));
}

TEST_CASE("nll_token gradient is softmax minus one-hot") {
  SeedStream rng(4);
  const Mat z0 = testutil::random_matrix(rng, 7, 1);
  ad::Tape t;
  ad::Var z = t.leaf(z0);
  t.backward(ad::nll_token(t, z, 3));
  Vec expect = softmax(Vec(z0.col(0)));
  expect[3] -= 1.0;
  check_close(t.grad(z), expect, 1e-12);
  auto eval = [&](const Mat& m) {
    ad::Tape tt;
    return ad::scalar_value(tt, ad::nll_token(tt, tt.leaf(m), 3));
  };
  check_close(t.grad(z), numeric_grad(eval, z0));
}

TEST_CASE("rank_hinge gradient matches finite differences off the kinks") {
  SeedStream rng(5);
  const Vec base = testutil::random_simplex(rng, 6);
  Mat tuned0 = testutil::random_simplex(rng, 6);
  ad::Tape t;
  ad::Var p = t.leaf(tuned0);
  t.backward(ad::rank_hinge(t, p, base, 0.1));
  auto eval = [&](const Mat& m) {
    ad::Tape tt;
    return ad::scalar_value(tt, ad::rank_hinge(tt, tt.leaf(m), base, 0.1));
  };
  check_close(t.grad(p), numeric_grad(eval, tuned0), 1e-5);
}

TEST_CASE("cache_miss_term gradients") {
  SeedStream rng(6);
  const Mat s0 = testutil::random_matrix(rng, 5, 1).cwiseAbs();
  const Mat c0 = testutil::random_matrix(rng, 5, 1).cwiseAbs();
  ad::Tape t;
  ad::Var s = t.leaf(s0), c = t.leaf(c0);
  t.backward(ad::cache_miss_term(t, s, c));
  check_close(t.grad(s), Mat(1.0 - c0.array()), 1e-12);
  check_close(t.grad(c), Mat(-s0.array()), 1e-12);
}

TEST_CASE("straight_through: hard forward value, identity backward") {
  SeedStream rng(7);
  const Vec p0 = testutil::random_simplex(rng, 5);
  const Vec hard = indicator(top_k_indices(p0, 2), 5);
  ad::Tape t;
  ad::Var p = t.leaf(p0);
  ad::Var st = ad::straight_through(t, p, hard);
  CHECK(Mat(t.value(st)) == Mat(hard));
  const Vec w = testutil::random_simplex(rng, 5);
  t.backward(ad::dot(t, st, t.constant(w)));
  check_close(t.grad(p), w, 1e-12);
}

TEST_CASE("detach blocks gradient flow") {
  SeedStream rng(8);
  const Mat x0 = testutil::random_matrix(rng, 4, 1);
  ad::Tape t;
  ad::Var x = t.leaf(x0);
  ad::Var cut = ad::detach(t, ad::scale(t, x, 2.0));
  ad::Var root = ad::add(t, ad::sum(t, cut), ad::sum(t, x));
  t.backward(root);
  check_close(t.grad(x), Mat::Ones(4, 1), 1e-12);  // only the direct path
}

TEST_CASE("constants accumulate no gradient") {
  SeedStream rng(9);
  ad::Tape t;
  ad::Var c = t.constant(testutil::random_matrix(rng, 3, 3));
  ad::Var x = t.leaf(testutil::random_matrix(rng, 3, 3));
  t.backward(ad::sum(t, ad::hadamard(t, c, x)));
  CHECK(t.grad(c).size() == 0);
  CHECK(t.grad(x).size() == 9);
}

TEST_CASE("backward requires a scalar root") {
  ad::Tape t;
  ad::Var x = t.leaf(Mat::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("shared subexpression accumulates both paths") {
  // f(x) = sum(x*x) + sum(x) reuses x twice
  const Mat x0 = Mat::Constant(2, 2, 3.0);
  ad::Tape t;
  ad::Var x = t.leaf(x0);
  ad::Var root = ad::add(t, ad::sum(t, ad::hadamard(t, x, x)), ad::sum(t, x));
  t.backward(root);
  check_close(t.grad(x), Mat::Constant(2, 2, 7.0), 1e-12);  // 2x + 1
}
