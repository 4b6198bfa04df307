// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "moecache/moe.hpp"
#include "moecache/rng.hpp"

namespace moecache::testutil {

/// Random routing trace: probabilities from softmaxed gaussians, requests the
/// Top-K under the production tie-break.
inline RoutingTrace random_trace(SeedStream& rng, int layers, int tokens, int experts,
                                 int top_k) {
  RoutingTrace tr;
  tr.layers = layers;
  tr.tokens = tokens;
  tr.experts = experts;
  tr.top_k = top_k;
  for (int l = 0; l < layers; ++l) {
    Mat p(tokens, experts);
    std::vector<std::vector<int>> reqs;
    for (int t = 0; t < tokens; ++t) {
      Vec logits(experts);
      for (int e = 0; e < experts; ++e) logits[e] = rng.gaussian();
      const Vec prob = softmax(logits);
      p.row(t) = prob.transpose();
      reqs.push_back(top_k_indices(prob, top_k));
    }
    tr.probs.push_back(std::move(p));
    tr.requests.push_back(std::move(reqs));
  }
  return tr;
}

inline Vec random_simplex(SeedStream& rng, int n) {
  Vec logits(n);
  for (int i = 0; i < n; ++i) logits[i] = rng.gaussian();
  return softmax(logits);
}

inline Mat random_matrix(SeedStream& rng, int rows, int cols, Real scale = 1.0) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.gaussian();
  return m;
}

}  // namespace moecache::testutil
