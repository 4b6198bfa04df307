// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <vector>

#include "moecache/moe.hpp"

namespace moecache {

struct CacheInit {
  enum class Kind { kUniform, kPrefetch };
  Kind kind = Kind::kUniform;
  std::vector<std::vector<int>> prefetch;  // per layer, each of size C

  static CacheInit uniform() { return {}; }
  static CacheInit with_prefetch(std::vector<std::vector<int>> sets) {
    CacheInit init;
    init.kind = Kind::kPrefetch;
    init.prefetch = std::move(sets);
    return init;
  }
};

struct MissReport {
  std::vector<long> misses_per_layer;
  std::vector<long> evictions_per_layer;
  long total_misses = 0;
  int tokens = 0;

  Real transfers_per_layer() const {
    return misses_per_layer.empty()
               ? 0.0
               : static_cast<Real>(total_misses) / static_cast<Real>(misses_per_layer.size());
  }
};

/// gamma-discounted request counts: gamma * count + r.
Vec gamma_count_update(const Eigen::Ref<const Vec>& count, const Eigen::Ref<const Vec>& r,
                       Real gamma);

/// Discounted counts plus the Top-C resident set they induce.
struct HardCacheState {
  Vec count;
  std::vector<int> resident;  // sorted, size C
  Real gamma = 0.9;
  int capacity = 0;

  static HardCacheState make(int experts, Real gamma, int capacity, const CacheInit& init,
                             int layer);
};

/// Counts misses against the current resident set, then folds r into the
/// counts and recomputes Top-C. Returns the miss count for this step.
int hard_cache_step(HardCacheState& state, const Eigen::Ref<const Vec>& r);

MissReport hard_miss_count(const RoutingTrace& trace, Real gamma, int capacity,
                           const CacheInit& init = CacheInit::uniform());

enum class SoftCacheMode { kUniformInit, kFillPhase };

/// Differentiable recency-weighted cache vector with scalar normalizer.
struct SoftCacheState {
  Vec c;
  Real norm = 1.0;  // Gamma
  Real gamma = 0.9;
  int capacity = 0;
  int top_k = 0;
  SoftCacheMode mode = SoftCacheMode::kUniformInit;
  bool filled = true;  // fill phase complete (always true under uniform init)
};

SoftCacheState make_soft_cache(int experts, Real gamma, int capacity, int top_k,
                               SoftCacheMode mode);

SoftCacheState soft_cache_update(const SoftCacheState& state, const Eigen::Ref<const Vec>& r);

/// Mean over (layer, token) of <r, 1 - c>, the cache miss proxy.
Real soft_cache_loss(const RoutingTrace& trace, Real gamma, int capacity,
                     SoftCacheMode mode = SoftCacheMode::kUniformInit);

/// Recursion-free evaluation of the mean soft cache loss from pairwise request
/// inner products, with the normalizer in closed form.
Real lcs_closed_form(const std::vector<RoutingTrace>& traces, Real gamma, int capacity,
                     SoftCacheMode mode = SoftCacheMode::kUniformInit);

struct EvictionPolicy {
  enum class Kind { kLru, kLfu, kGammaCache };
  Kind kind = Kind::kGammaCache;
  Real gamma = 0.9;  // only for kGammaCache

  static EvictionPolicy lru() { return {Kind::kLru, 0.0}; }
  static EvictionPolicy lfu() { return {Kind::kLfu, 0.0}; }
  static EvictionPolicy gamma_cache(Real gamma) { return {Kind::kGammaCache, gamma}; }
};

/// Incremental per-layer cache under one eviction policy. Misses at a step are
/// counted against the resident set from before the step's requests.
class LayerCache {
 public:
  LayerCache(const EvictionPolicy& policy, int experts, int capacity, const CacheInit& init,
             int layer);

  int step(const std::vector<int>& requested);
  const std::vector<int>& resident() const { return resident_; }
  long misses() const { return misses_; }
  long evictions() const { return evictions_; }

 private:
  EvictionPolicy policy_;
  int experts_;
  int capacity_;
  Vec count_;                    // gamma-cache / LFU
  std::vector<long> last_used_;  // LRU stamps
  std::vector<int> resident_;
  std::vector<char> is_resident_;
  long step_index_ = 0;
  long misses_ = 0;
  long evictions_ = 0;

  void recompute_resident_from_counts();
};

MissReport run_eviction_policy(const RoutingTrace& trace, const EvictionPolicy& policy,
                               int capacity, const CacheInit& init = CacheInit::uniform());

}  // namespace moecache
