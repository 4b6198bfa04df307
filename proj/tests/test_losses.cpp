// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "moecache/losses.hpp"
#include "test_util.hpp"

using namespace moecache;

namespace {

/// Second, independent inversion counter: order indices by descending p, then
/// count order-breaking pairs in q by merge sort.
long merge_sort_inversions(const Vec& p, const Vec& q) {
  std::vector<int> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
  std::vector<double> seq;
  for (int idx : order) seq.push_back(q[idx]);

  long inv = 0;
  std::function<std::vector<double>(std::size_t, std::size_t)> sort_count =
      [&](std::size_t lo, std::size_t hi) -> std::vector<double> {
    if (hi - lo <= 1) return {seq.begin() + lo, seq.begin() + hi};
    const std::size_t mid = (lo + hi) / 2;
    std::vector<double> left = sort_count(lo, mid);
    std::vector<double> right = sort_count(mid, hi);
    std::vector<double> merged;
    std::size_t i = 0, j = 0;
    while (i < left.size() || j < right.size()) {
      if (j == right.size() || (i < left.size() && left[i] >= right[j])) {
        merged.push_back(left[i++]);
      } else {
        // right[j] is larger than every remaining left element: each such
        // pair is an inversion (earlier-in-p but smaller-in-q).
        inv += static_cast<long>(left.size() - i);
        merged.push_back(right[j++]);
      }
    }
    return merged;
  };
  sort_count(0, seq.size());
  return inv;
}

PairedTrace make_paired(SeedStream& rng, int layers, int tokens, int experts, int top_k) {
  PairedTrace pt;
  pt.base = moecache::testutil::random_trace(rng, layers, tokens, experts, top_k);
  pt.tuned = moecache::testutil::random_trace(rng, layers, tokens, experts, top_k);
  return pt;
}

}  // namespace

TEST_CASE("rank_mistakes: ordered with margin, hand case, uniform base") {
  Vec base(2), tuned(2);
  base << 0.6, 0.4;
  tuned << 0.7, 0.3;
  CHECK(rank_mistakes(base, tuned, 0.1) == doctest::Approx(0.0));

  tuned << 0.3, 0.7;
  CHECK(rank_mistakes(base, tuned, 0.1) == doctest::Approx(0.5));

  const Vec uniform = Vec::Constant(4, 0.25);
  SeedStream rng(5);
  CHECK(rank_mistakes(uniform, testutil::random_simplex(rng, 4), 0.1) == 0.0);

  CHECK_THROWS_AS(rank_mistakes(base, uniform, 0.1), std::invalid_argument);
}

TEST_CASE("rank_mistakes: zero when tuned keeps base order with full margins") {
  Vec base(4);
  base << 0.5, 0.3, 0.15, 0.05;
  CHECK(rank_mistakes(base, base, 0.1) == doctest::Approx(0.0));
  // shrink one gap below rho and the hinge activates
  Vec close(4);
  close << 0.31, 0.30, 0.24, 0.15;
  CHECK(rank_mistakes(base, close, 0.1) > 0.0);
}

TEST_CASE("rank_matching_loss: singleton and self-consistency") {
  SeedStream rng(7);
  PairedTrace pt = make_paired(rng, 1, 1, 6, 2);
  CHECK(rank_matching_loss({pt}, 0.1) ==
        doctest::Approx(rank_mistakes(pt.base.prob_vector(0, 0), pt.tuned.prob_vector(0, 0), 0.1)));

  CHECK_THROWS_AS(rank_matching_loss({}, 0.1), std::invalid_argument);
}

TEST_CASE("rank_matching_loss: mean over layer-token positions") {
  SeedStream rng(11);
  PairedTrace pt = make_paired(rng, 3, 5, 8, 2);
  Real expect = 0.0;
  for (int l = 0; l < 3; ++l) {
    for (int t = 0; t < 5; ++t) {
      expect += rank_mistakes(pt.base.prob_vector(l, t), pt.tuned.prob_vector(l, t), 0.1);
    }
  }
  expect /= 15.0;
  CHECK(rank_matching_loss({pt}, 0.1) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("inversion_count: identity, reversal, merge-sort oracle") {
  Vec p(5);
  p << 0.4, 0.25, 0.2, 0.1, 0.05;
  CHECK(inversion_count(p, p) == 0);

  Vec reversed(5);
  reversed << 0.05, 0.1, 0.2, 0.25, 0.4;
  CHECK(inversion_count(p, reversed) == 5 * 4 / 2);

  SeedStream rng(13);
  for (int i = 0; i < 50; ++i) {
    const Vec a = testutil::random_simplex(rng, 8);
    const Vec b = testutil::random_simplex(rng, 8);
    CHECK(inversion_count(a, b) == merge_sort_inversions(a, b));
  }

  Vec tied(3);
  tied << 0.4, 0.4, 0.2;
  CHECK_THROWS_AS(inversion_count(tied, p.head(3)), std::invalid_argument);
}

TEST_CASE("kendall_tau: endpoints and formula consistency") {
  Vec p(6);
  p << 0.3, 0.25, 0.2, 0.12, 0.08, 0.05;
  CHECK(kendall_tau(p, p) == doctest::Approx(1.0));
  Vec reversed = p.reverse();
  CHECK(kendall_tau(p, reversed) == doctest::Approx(-1.0));

  SeedStream rng(17);
  for (int i = 0; i < 25; ++i) {
    const Vec a = testutil::random_simplex(rng, 7);
    const Vec b = testutil::random_simplex(rng, 7);
    const Real tau = kendall_tau(a, b);
    CHECK(tau == doctest::Approx(1.0 - 2.0 * Real(inversion_count(a, b)) / 21.0));
    CHECK(tau >= -1.0);
    CHECK(tau <= 1.0);
  }
}

TEST_CASE("lemma bound: rank_mistakes >= rho * inversions on 1000 random pairs") {
  SeedStream rng(19);
  for (Real rho : {0.05, 0.1, 0.2}) {
    int violations = 0;
    for (int i = 0; i < 1000; ++i) {
      const Vec base = testutil::random_simplex(rng, 8);
      const Vec tuned = testutil::random_simplex(rng, 8);
      const Real m = rank_mistakes(base, tuned, rho);
      const Real bound = rho * static_cast<Real>(inversion_count(base, tuned));
      if (m < bound - 1e-12) ++violations;
    }
    CHECK(violations == 0);
  }
}

TEST_CASE("total_loss: degenerate weights, arithmetic, linearity") {
  LossWeights w;
  w.lambda_cs = 0.0;
  w.lambda_rm = 0.0;
  CHECK(total_loss(1.7, 9.9, 3.3, w) == doctest::Approx(1.7));

  w.lambda_cs = 0.5;
  w.lambda_rm = 0.1;
  CHECK(total_loss(1.0, 2.0, 3.0, w) == doctest::Approx(2.3));

  // paper-style defaults for the second workload
  w.lambda_cs = 0.05;
  w.lambda_rm = 0.01;
  CHECK(total_loss(1.0, 2.0, 3.0, w) == doctest::Approx(1.0 + 0.05 * 2.0 + 0.01 * 3.0));

  // linear in each component
  SeedStream rng(23);
  for (int i = 0; i < 10; ++i) {
    const Real a = rng.gaussian(), b = rng.gaussian(), c = rng.gaussian();
    CHECK(total_loss(2.0 * a, b, c, w) - total_loss(a, b, c, w) == doctest::Approx(a));
  }
  CHECK_THROWS_AS(total_loss(std::nan(""), 0.0, 0.0, w), std::invalid_argument);
}

TEST_CASE("kl_divergence: nonnegative, zero iff equal") {
  SeedStream rng(29);
  for (int i = 0; i < 20; ++i) {
    const Vec p = testutil::random_simplex(rng, 6);
    const Vec q = testutil::random_simplex(rng, 6);
    CHECK(kl_divergence(p, q) >= -1e-12);
    CHECK(kl_divergence(p, p) == doctest::Approx(0.0));
  }
}

TEST_CASE("LossWeights validation") {
  LossWeights w;
  w.rho = 0.0;
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
  w.rho = 0.1;
  w.lambda_cs = -1.0;
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
}
