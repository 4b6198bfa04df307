// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "moecache/moe.hpp"

namespace moecache {

struct LossWeights {
  Real lambda_cs = 0.5;
  Real lambda_rm = 0.1;
  Real rho = 0.1;          // rank margin
  Real gamma = 0.9;        // cache decay
  int cache_capacity = 4;  // simulated capacity C

  void validate() const;
};

/// Router distributions of a frozen base model and the fine-tuned model over
/// the same inputs.
struct PairedTrace {
  RoutingTrace base;
  RoutingTrace tuned;
};

/// Margin hinge over base-ordered expert pairs:
/// sum_{i,j: p_base_i > p_base_j} [rho - (p_tuned_i - p_tuned_j)]_+.
Real rank_mistakes(const Eigen::Ref<const Vec>& p_base, const Eigen::Ref<const Vec>& p_tuned,
                   Real rho);

Real rank_matching_loss(const std::vector<PairedTrace>& paired, Real rho);

/// Pairwise inversions between the orderings of p and q. Entries within each
/// vector must be pairwise distinct.
long inversion_count(const Eigen::Ref<const Vec>& p, const Eigen::Ref<const Vec>& q);

Real kendall_tau(const Eigen::Ref<const Vec>& p, const Eigen::Ref<const Vec>& q);

Real total_loss(Real nll, Real lcs, Real lrm, const LossWeights& w);

/// KL(p || q). Diagnostic only; not part of the training objective.
Real kl_divergence(const Eigen::Ref<const Vec>& p, const Eigen::Ref<const Vec>& q);

}  // namespace moecache
