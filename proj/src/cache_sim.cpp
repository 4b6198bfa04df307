// SPDX-License-Identifier: Apache-2.0
#include "moecache/cache_sim.hpp"

#include <algorithm>
#include <stdexcept>

namespace moecache {

namespace {

void check_binary_requests(const Eigen::Ref<const Vec>& r) {
  for (int i = 0; i < r.size(); ++i) {
    if (r[i] != 0.0 && r[i] != 1.0) {
      throw std::invalid_argument("cache update: request vector must be binary");
    }
  }
}

void check_init(const CacheInit& init, int layers, int experts, int capacity) {
  if (init.kind != CacheInit::Kind::kPrefetch) return;
  if (static_cast<int>(init.prefetch.size()) != layers) {
    throw std::invalid_argument("prefetch init: one set per layer required");
  }
  for (const auto& set : init.prefetch) {
    if (static_cast<int>(set.size()) != capacity) {
      throw std::invalid_argument("prefetch init: set size must equal capacity");
    }
    for (int id : set) {
      if (id < 0 || id >= experts) throw std::invalid_argument("prefetch init: bad expert id");
    }
  }
}

Vec init_counts(const CacheInit& init, int experts, int capacity, int layer) {
  if (init.kind == CacheInit::Kind::kUniform) {
    return Vec::Constant(experts, static_cast<Real>(capacity) / static_cast<Real>(experts));
  }
  return indicator(init.prefetch[layer], experts);
}

}  // namespace

Vec gamma_count_update(const Eigen::Ref<const Vec>& count, const Eigen::Ref<const Vec>& r,
                       Real gamma) {
  if (gamma < 0.0 || gamma > 1.0) {
    throw std::invalid_argument("gamma_count_update: gamma must lie in [0, 1]");
  }
  if ((count.array() < 0.0).any()) {
    throw std::invalid_argument("gamma_count_update: negative count entries");
  }
  check_binary_requests(r);
  return gamma * count + r;
}

HardCacheState HardCacheState::make(int experts, Real gamma, int capacity,
                                    const CacheInit& init, int layer) {
  if (capacity < 1 || capacity > experts) {
    throw std::invalid_argument("HardCacheState: need 1 <= capacity <= experts");
  }
  HardCacheState s;
  s.gamma = gamma;
  s.capacity = capacity;
  s.count = init_counts(init, experts, capacity, layer);
  s.resident = top_k_indices(s.count, capacity);
  return s;
}

int hard_cache_step(HardCacheState& state, const Eigen::Ref<const Vec>& r) {
  int misses = 0;
  std::vector<char> res(state.count.size(), 0);
  for (int id : state.resident) res[id] = 1;
  for (int i = 0; i < r.size(); ++i) {
    if (r[i] == 1.0 && !res[i]) ++misses;
  }
  state.count = gamma_count_update(state.count, r, state.gamma);
  state.resident = top_k_indices(state.count, state.capacity);
  return misses;
}

MissReport hard_miss_count(const RoutingTrace& trace, Real gamma, int capacity,
                           const CacheInit& init) {
  if (capacity > trace.experts) {
    throw std::invalid_argument("hard_miss_count: capacity exceeds expert count");
  }
  check_init(init, trace.layers, trace.experts, capacity);
  MissReport report;
  report.tokens = trace.tokens;
  report.misses_per_layer.assign(trace.layers, 0);
  report.evictions_per_layer.assign(trace.layers, 0);
  for (int l = 0; l < trace.layers; ++l) {
    HardCacheState state = HardCacheState::make(trace.experts, gamma, capacity, init, l);
    for (int t = 0; t < trace.tokens; ++t) {
      std::vector<int> before = state.resident;
      report.misses_per_layer[l] += hard_cache_step(state, trace.request_vector(l, t));
      for (int id : before) {
        if (!std::binary_search(state.resident.begin(), state.resident.end(), id)) {
          ++report.evictions_per_layer[l];
        }
      }
    }
    report.total_misses += report.misses_per_layer[l];
  }
  return report;
}

SoftCacheState make_soft_cache(int experts, Real gamma, int capacity, int top_k,
                               SoftCacheMode mode) {
  if (capacity < 1 || capacity > experts) {
    throw std::invalid_argument("make_soft_cache: need 1 <= capacity <= experts");
  }
  if (gamma < 0.0 || gamma > 1.0) {
    throw std::invalid_argument("make_soft_cache: gamma must lie in [0, 1]");
  }
  SoftCacheState s;
  s.gamma = gamma;
  s.capacity = capacity;
  s.top_k = top_k;
  s.mode = mode;
  if (mode == SoftCacheMode::kUniformInit) {
    s.c = Vec::Constant(experts, static_cast<Real>(capacity) / static_cast<Real>(experts));
    s.norm = 1.0;
    s.filled = true;
  } else {
    s.c = Vec::Zero(experts);
    s.norm = 1.0;
    s.filled = false;
  }
  return s;
}

SoftCacheState soft_cache_update(const SoftCacheState& state, const Eigen::Ref<const Vec>& r) {
  if (state.norm <= 0.0) {
    throw std::invalid_argument("soft_cache_update: normalizer must be positive");
  }
  check_binary_requests(r);
  if (static_cast<int>(r.sum()) != state.top_k) {
    throw std::invalid_argument("soft_cache_update: request vector must have top_k ones");
  }
  SoftCacheState next = state;
  const Real cap = static_cast<Real>(state.capacity);
  if (state.filled) {
    const Real next_norm =
        state.gamma * state.norm + static_cast<Real>(state.top_k) / cap;
    next.c = (state.gamma * state.norm * state.c + r) / next_norm;
    next.norm = next_norm;
    return next;
  }
  // Fill phase: unnormalized growth until the L1 norm reaches capacity, then
  // rescale so that c = C * counts / ||counts||_1 from this step on.
  next.c = state.gamma * state.c + r;
  const Real mass = next.c.sum();
  if (mass >= cap) {
    next.norm = mass / cap;
    next.c /= next.norm;
    next.filled = true;
  }
  return next;
}

Real soft_cache_loss(const RoutingTrace& trace, Real gamma, int capacity, SoftCacheMode mode) {
  Real total = 0.0;
  for (int l = 0; l < trace.layers; ++l) {
    SoftCacheState state = make_soft_cache(trace.experts, gamma, capacity, trace.top_k, mode);
    for (int t = 0; t < trace.tokens; ++t) {
      const Vec r = trace.request_vector(l, t);
      total += r.dot((1.0 - state.c.array()).matrix());
      state = soft_cache_update(state, r);
    }
  }
  return total / (static_cast<Real>(trace.layers) * static_cast<Real>(trace.tokens));
}

Real lcs_closed_form(const std::vector<RoutingTrace>& traces, Real gamma, int capacity,
                     SoftCacheMode mode) {
  if (traces.empty()) throw std::invalid_argument("lcs_closed_form: empty trace set");
  const RoutingTrace& first = traces.front();
  for (const RoutingTrace& tr : traces) {
    if (tr.layers != first.layers || tr.tokens != first.tokens ||
        tr.experts != first.experts || tr.top_k != first.top_k) {
      throw std::invalid_argument("lcs_closed_form: heterogeneous trace shapes");
    }
  }
  const int t_len = first.tokens;
  const Real cap = static_cast<Real>(capacity);
  const Real k = static_cast<Real>(first.top_k);

  // sigma(t) = sum_{i=1}^{t-1} gamma^{t-1-i}; deterministic, shared by traces.
  std::vector<Real> sigma(t_len + 1, 0.0);
  std::vector<Real> gamma_pow(t_len + 1, 1.0);
  for (int t = 2; t <= t_len; ++t) sigma[t] = gamma * sigma[t - 1] + 1.0;
  for (int t = 1; t <= t_len; ++t) gamma_pow[t] = gamma_pow[t - 1] * gamma;

  Real total = 0.0;
  for (const RoutingTrace& tr : traces) {
    for (int l = 0; l < tr.layers; ++l) {
      for (int t = 1; t <= t_len; ++t) {
        const auto& req_t = tr.requests[l][t - 1];
        Real overlap_sum = 0.0;
        for (int i = 1; i < t; ++i) {
          const auto& req_i = tr.requests[l][i - 1];
          int overlap = 0;
          std::size_t a = 0, b = 0;
          while (a < req_t.size() && b < req_i.size()) {
            if (req_t[a] == req_i[b]) {
              ++overlap;
              ++a;
              ++b;
            } else if (req_t[a] < req_i[b]) {
              ++a;
            } else {
              ++b;
            }
          }
          overlap_sum += gamma_pow[t - 1 - i] * static_cast<Real>(overlap);
        }
        if (mode == SoftCacheMode::kUniformInit) {
          const Real norm = gamma_pow[t - 1] + (k / cap) * sigma[t];
          const Real init_term =
              gamma_pow[t - 1] * k * cap / static_cast<Real>(tr.experts);
          total += k - (overlap_sum + init_term) / norm;
        } else {
          const Real mass = k * sigma[t];  // ||counts||_1 with zero init
          if (mass < cap) {
            total += k - overlap_sum;
          } else {
            total += k - cap * overlap_sum / mass;
          }
        }
      }
    }
  }
  return total / (static_cast<Real>(traces.size()) * static_cast<Real>(first.layers) *
                  static_cast<Real>(t_len));
}

LayerCache::LayerCache(const EvictionPolicy& policy, int experts, int capacity,
                       const CacheInit& init, int layer)
    : policy_(policy), experts_(experts), capacity_(capacity) {
  if (capacity < 1 || capacity > experts) {
    throw std::invalid_argument("LayerCache: need 1 <= capacity <= experts");
  }
  if (init.kind == CacheInit::Kind::kPrefetch) {
    if (layer >= static_cast<int>(init.prefetch.size())) {
      throw std::invalid_argument("LayerCache: prefetch set missing for layer");
    }
    if (static_cast<int>(init.prefetch[layer].size()) != capacity) {
      throw std::invalid_argument("LayerCache: prefetch set size must equal capacity");
    }
  }
  count_ = init_counts(init, experts, capacity, layer);
  last_used_.assign(experts, 0);
  resident_ = top_k_indices(count_, capacity);
  is_resident_.assign(experts, 0);
  for (int id : resident_) is_resident_[id] = 1;
}

void LayerCache::recompute_resident_from_counts() {
  std::vector<int> next = top_k_indices(count_, capacity_);
  for (int id : resident_) {
    if (!std::binary_search(next.begin(), next.end(), id)) ++evictions_;
  }
  resident_ = std::move(next);
  std::fill(is_resident_.begin(), is_resident_.end(), 0);
  for (int id : resident_) is_resident_[id] = 1;
}

int LayerCache::step(const std::vector<int>& requested) {
  ++step_index_;
  int misses = 0;
  for (int id : requested) {
    if (id < 0 || id >= experts_) throw std::invalid_argument("LayerCache: bad expert id");
    if (!is_resident_[id]) ++misses;
  }
  misses_ += misses;
  switch (policy_.kind) {
    case EvictionPolicy::Kind::kGammaCache: {
      count_ = gamma_count_update(count_, indicator(requested, experts_), policy_.gamma);
      recompute_resident_from_counts();
      break;
    }
    case EvictionPolicy::Kind::kLfu: {
      for (int id : requested) count_[id] += 1.0;
      recompute_resident_from_counts();
      break;
    }
    case EvictionPolicy::Kind::kLru: {
      // Stamp resident hits before handling misses so a just-requested expert
      // is never picked as a victim within the same step.
      for (int id : requested) {
        if (is_resident_[id]) last_used_[id] = step_index_;
      }
      for (int id : requested) {
        if (is_resident_[id]) continue;
        // Evict the stalest resident; equally stale entries keep the lower
        // index, so the victim is the highest-indexed one among them.
        int victim = -1;
        for (int res : resident_) {
          if (victim < 0 || last_used_[res] < last_used_[victim] ||
              (last_used_[res] == last_used_[victim] && res > victim)) {
            victim = res;
          }
        }
        is_resident_[victim] = 0;
        is_resident_[id] = 1;
        last_used_[id] = step_index_;
        ++evictions_;
        resident_.erase(std::find(resident_.begin(), resident_.end(), victim));
        resident_.insert(std::lower_bound(resident_.begin(), resident_.end(), id), id);
      }
      break;
    }
  }
  return misses;
}

MissReport run_eviction_policy(const RoutingTrace& trace, const EvictionPolicy& policy,
                               int capacity, const CacheInit& init) {
  if (capacity > trace.experts) {
    throw std::invalid_argument("run_eviction_policy: capacity exceeds expert count");
  }
  check_init(init, trace.layers, trace.experts, capacity);
  MissReport report;
  report.tokens = trace.tokens;
  report.misses_per_layer.assign(trace.layers, 0);
  report.evictions_per_layer.assign(trace.layers, 0);
  for (int l = 0; l < trace.layers; ++l) {
    LayerCache cache(policy, trace.experts, capacity, init, l);
    for (int t = 0; t < trace.tokens; ++t) {
      cache.step(trace.requests[l][t]);
    }
    report.misses_per_layer[l] = cache.misses();
    report.evictions_per_layer[l] = cache.evictions();
    report.total_misses += cache.misses();
  }
  return report;
}

}  // namespace moecache
