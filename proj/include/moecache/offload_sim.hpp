// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "moecache/cache_sim.hpp"
#include "moecache/predictor.hpp"

namespace moecache {

struct LatencyModel {
  Real compute_per_token_s = 2e-3;
  Real transfer_per_expert_s = 5.5e-3;  // PCIe transfer of one expert
  Real prefetch_s = 0.05;
};

Real latency_estimate(long n_miss, long tokens, const LatencyModel& lat, bool prefetched);

struct DecodeReport {
  std::vector<int> generated;
  std::vector<long> misses_per_layer;
  std::vector<long> evictions_per_layer;  // reported separately from fetches
  long total_transfers = 0;
  long total_requests = 0;
  Real decode_seconds = 0.0;
  Real tokens_per_s = 0.0;
  Real hit_rate = 0.0;
  RoutingTrace trace;  // all charged positions: prefill then decode
  CacheInit init_used;

  Real transfers_per_layer() const {
    return misses_per_layer.empty()
               ? 0.0
               : static_cast<Real>(total_transfers) /
                     static_cast<Real>(misses_per_layer.size());
  }
};

/// Greedy decode with a per-layer GPU-resident expert cache of capacity C.
/// Every position of the realized sequence (prompt prefill included) charges
/// its routing requests against the cache once, in order.
DecodeReport simulate_decode(const MoEModel& model, const std::vector<int>& prompt,
                             const EvictionPolicy& policy, int capacity,
                             const PrefetchPlan* plan, const LatencyModel& lat, int max_tokens);

/// Lockstep batched decode with one shared cache; per-step requests are the
/// union over sequences. Prefetch pools the per-sequence predicted scores and
/// takes the per-layer Top-C of their sum.
DecodeReport simulate_batch_decode(const MoEModel& model,
                                   const std::vector<std::vector<int>>& prompts,
                                   const EvictionPolicy& policy, int capacity,
                                   const std::vector<Mat>* predicted_scores,
                                   const LatencyModel& lat, int max_tokens);

}  // namespace moecache
