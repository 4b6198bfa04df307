// SPDX-License-Identifier: Apache-2.0
#include "moecache/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace moecache {

void LossWeights::validate() const {
  if (lambda_cs < 0.0 || lambda_rm < 0.0) {
    throw std::invalid_argument("LossWeights: lambda weights must be nonnegative");
  }
  if (rho <= 0.0 || rho >= 1.0) {
    throw std::invalid_argument("LossWeights: rho must lie in (0, 1)");
  }
  if (gamma < 0.0 || gamma > 1.0) {
    throw std::invalid_argument("LossWeights: gamma must lie in [0, 1]");
  }
  if (cache_capacity < 1) {
    throw std::invalid_argument("LossWeights: cache_capacity must be >= 1");
  }
}

Real rank_mistakes(const Eigen::Ref<const Vec>& p_base, const Eigen::Ref<const Vec>& p_tuned,
                   Real rho) {
  if (p_base.size() != p_tuned.size()) {
    throw std::invalid_argument("rank_mistakes: length mismatch");
  }
  const int n = static_cast<int>(p_base.size());
  Real total = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (p_base[i] > p_base[j]) {
        const Real hinge = rho - (p_tuned[i] - p_tuned[j]);
        if (hinge > 0.0) total += hinge;
      }
    }
  }
  return total;
}

Real rank_matching_loss(const std::vector<PairedTrace>& paired, Real rho) {
  if (paired.empty()) throw std::invalid_argument("rank_matching_loss: empty set");
  Real total = 0.0;
  long positions = 0;
  for (const PairedTrace& pt : paired) {
    if (pt.base.layers != pt.tuned.layers || pt.base.tokens != pt.tuned.tokens ||
        pt.base.experts != pt.tuned.experts) {
      throw std::invalid_argument("rank_matching_loss: paired trace shape mismatch");
    }
    for (int l = 0; l < pt.base.layers; ++l) {
      for (int t = 0; t < pt.base.tokens; ++t) {
        total += rank_mistakes(pt.base.prob_vector(l, t), pt.tuned.prob_vector(l, t), rho);
        ++positions;
      }
    }
  }
  return total / static_cast<Real>(positions);
}

long inversion_count(const Eigen::Ref<const Vec>& p, const Eigen::Ref<const Vec>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("inversion_count: length mismatch");
  const int n = static_cast<int>(p.size());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (p[i] == p[j] || q[i] == q[j]) {
        throw std::invalid_argument("inversion_count: tied entries");
      }
    }
  }
  long inv = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (p[i] > p[j] && q[i] < q[j]) ++inv;
    }
  }
  return inv;
}

Real kendall_tau(const Eigen::Ref<const Vec>& p, const Eigen::Ref<const Vec>& q) {
  const long n = p.size();
  if (n < 2) throw std::invalid_argument("kendall_tau: need at least two entries");
  const long pairs = n * (n - 1) / 2;
  return 1.0 - 2.0 * static_cast<Real>(inversion_count(p, q)) / static_cast<Real>(pairs);
}

Real total_loss(Real nll, Real lcs, Real lrm, const LossWeights& w) {
  if (!std::isfinite(nll) || !std::isfinite(lcs) || !std::isfinite(lrm)) {
    throw std::invalid_argument("total_loss: non-finite component");
  }
  return nll + w.lambda_cs * lcs + w.lambda_rm * lrm;
}

Real kl_divergence(const Eigen::Ref<const Vec>& p, const Eigen::Ref<const Vec>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  Real kl = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) throw std::invalid_argument("kl_divergence: zero mass in q under p");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

}  // namespace moecache
