// SPDX-License-Identifier: Apache-2.0
#include "moecache/offload_sim.hpp"

#include <algorithm>
#include <stdexcept>

namespace moecache {

Real latency_estimate(long n_miss, long tokens, const LatencyModel& lat, bool prefetched) {
  if (n_miss < 0 || tokens < 0) {
    throw std::invalid_argument("latency_estimate: negative inputs");
  }
  if (lat.compute_per_token_s < 0.0 || lat.transfer_per_expert_s < 0.0 ||
      lat.prefetch_s < 0.0) {
    throw std::invalid_argument("latency_estimate: negative latency constants");
  }
  return static_cast<Real>(tokens) * lat.compute_per_token_s +
         static_cast<Real>(n_miss) * lat.transfer_per_expert_s +
         (prefetched ? lat.prefetch_s : 0.0);
}

namespace {

int argmax_lowest(const Vec& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

CacheInit init_from_plan(const PrefetchPlan* plan, int layers, int capacity) {
  if (plan == nullptr) return CacheInit::uniform();
  if (static_cast<int>(plan->experts_per_layer.size()) != layers) {
    throw std::invalid_argument("simulate_decode: prefetch plan layer count mismatch");
  }
  for (const auto& set : plan->experts_per_layer) {
    if (static_cast<int>(set.size()) != capacity) {
      throw std::invalid_argument("simulate_decode: prefetch set size must equal capacity");
    }
  }
  return CacheInit::with_prefetch(plan->experts_per_layer);
}

DecodeReport empty_report(const MoEModel& model, const CacheInit& init) {
  DecodeReport report;
  report.misses_per_layer.assign(model.config.layers, 0);
  report.evictions_per_layer.assign(model.config.layers, 0);
  report.trace.layers = model.config.layers;
  report.trace.experts = model.config.experts;
  report.trace.top_k = model.config.top_k;
  report.trace.probs.assign(model.config.layers, Mat(0, model.config.experts));
  report.trace.requests.assign(model.config.layers, {});
  report.init_used = init;
  return report;
}

}  // namespace

DecodeReport simulate_decode(const MoEModel& model, const std::vector<int>& prompt,
                             const EvictionPolicy& policy, int capacity,
                             const PrefetchPlan* plan, const LatencyModel& lat,
                             int max_tokens) {
  if (prompt.empty()) throw std::invalid_argument("simulate_decode: empty prompt");
  if (capacity < 1 || capacity > model.config.experts) {
    throw std::invalid_argument("simulate_decode: capacity out of range");
  }
  if (max_tokens < 0) throw std::invalid_argument("simulate_decode: negative max_tokens");

  const CacheInit init = init_from_plan(plan, model.config.layers, capacity);
  DecodeReport report = empty_report(model, init);
  if (max_tokens == 0) return report;

  std::vector<LayerCache> caches;
  caches.reserve(model.config.layers);
  for (int l = 0; l < model.config.layers; ++l) {
    caches.emplace_back(policy, model.config.experts, capacity, init, l);
  }

  Vec last_logits;
  auto charge = [&](int token) {
    StepOutput step = model_step(model, token);
    for (int l = 0; l < model.config.layers; ++l) {
      caches[l].step(step.requests[l]);
    }
    report.trace.append_step(step.probs, step.requests);
    last_logits = std::move(step.logits);
  };

  for (int token : prompt) charge(token);
  for (int i = 0; i < max_tokens; ++i) {
    const int next = argmax_lowest(last_logits);
    report.generated.push_back(next);
    charge(next);
  }

  for (int l = 0; l < model.config.layers; ++l) {
    report.misses_per_layer[l] = caches[l].misses();
    report.evictions_per_layer[l] = caches[l].evictions();
    report.total_transfers += caches[l].misses();
  }
  report.total_requests = static_cast<long>(report.trace.tokens) * model.config.layers *
                          model.config.top_k;
  report.decode_seconds = latency_estimate(report.total_transfers,
                                           static_cast<long>(report.generated.size()), lat,
                                           plan != nullptr);
  report.tokens_per_s = report.decode_seconds > 0.0
                            ? static_cast<Real>(report.generated.size()) / report.decode_seconds
                            : 0.0;
  report.hit_rate = report.total_requests > 0
                        ? 1.0 - static_cast<Real>(report.total_transfers) /
                                    static_cast<Real>(report.total_requests)
                        : 0.0;
  return report;
}

DecodeReport simulate_batch_decode(const MoEModel& model,
                                   const std::vector<std::vector<int>>& prompts,
                                   const EvictionPolicy& policy, int capacity,
                                   const std::vector<Mat>* predicted_scores,
                                   const LatencyModel& lat, int max_tokens) {
  if (prompts.empty()) throw std::invalid_argument("simulate_batch_decode: empty batch");
  for (const auto& p : prompts) {
    if (p.empty()) throw std::invalid_argument("simulate_batch_decode: empty prompt");
  }
  if (capacity < 1 || capacity > model.config.experts) {
    throw std::invalid_argument("simulate_batch_decode: capacity out of range");
  }

  // Pool predicted preference mass across the batch, then Top-C per layer.
  std::optional<PrefetchPlan> plan;
  if (predicted_scores != nullptr) {
    if (predicted_scores->size() != prompts.size()) {
      throw std::invalid_argument("simulate_batch_decode: one score matrix per sequence");
    }
    Mat pooled = Mat::Zero(model.config.layers, model.config.experts);
    for (const Mat& s : *predicted_scores) {
      if (s.rows() != model.config.layers || s.cols() != model.config.experts) {
        throw std::invalid_argument("simulate_batch_decode: score matrix shape mismatch");
      }
      pooled += s;
    }
    plan = plan_from_scores(pooled, capacity);
  }
  const CacheInit init =
      init_from_plan(plan.has_value() ? &plan.value() : nullptr, model.config.layers, capacity);
  DecodeReport report = empty_report(model, init);
  if (max_tokens == 0) return report;

  std::vector<LayerCache> caches;
  for (int l = 0; l < model.config.layers; ++l) {
    caches.emplace_back(policy, model.config.experts, capacity, init, l);
  }

  const std::size_t batch = prompts.size();
  std::size_t max_prompt = 0;
  for (const auto& p : prompts) max_prompt = std::max(max_prompt, p.size());

  std::vector<Vec> last_logits(batch);
  std::vector<std::vector<int>> generated(batch);
  long steps = 0;

  auto charge_union = [&](const std::vector<int>& tokens_now,
                          const std::vector<char>& active) {
    std::vector<std::vector<int>> union_req(model.config.layers);
    for (std::size_t s = 0; s < batch; ++s) {
      if (!active[s]) continue;
      StepOutput step = model_step(model, tokens_now[s]);
      for (int l = 0; l < model.config.layers; ++l) {
        union_req[l].insert(union_req[l].end(), step.requests[l].begin(),
                            step.requests[l].end());
      }
      last_logits[s] = std::move(step.logits);
    }
    for (int l = 0; l < model.config.layers; ++l) {
      std::sort(union_req[l].begin(), union_req[l].end());
      union_req[l].erase(std::unique(union_req[l].begin(), union_req[l].end()),
                         union_req[l].end());
      caches[l].step(union_req[l]);
      report.total_requests += static_cast<long>(union_req[l].size());
    }
    ++steps;
  };

  // Prefill, left-aligned; shorter prompts simply skip the tail positions.
  for (std::size_t pos = 0; pos < max_prompt; ++pos) {
    std::vector<int> tokens_now(batch, 0);
    std::vector<char> active(batch, 0);
    for (std::size_t s = 0; s < batch; ++s) {
      if (pos < prompts[s].size()) {
        tokens_now[s] = prompts[s][pos];
        active[s] = 1;
      }
    }
    charge_union(tokens_now, active);
  }
  for (int i = 0; i < max_tokens; ++i) {
    std::vector<int> tokens_now(batch);
    std::vector<char> active(batch, 1);
    for (std::size_t s = 0; s < batch; ++s) {
      tokens_now[s] = argmax_lowest(last_logits[s]);
      generated[s].push_back(tokens_now[s]);
    }
    charge_union(tokens_now, active);
  }

  for (std::size_t s = 0; s < batch; ++s) {
    report.generated.insert(report.generated.end(), generated[s].begin(), generated[s].end());
  }
  for (int l = 0; l < model.config.layers; ++l) {
    report.misses_per_layer[l] = caches[l].misses();
    report.evictions_per_layer[l] = caches[l].evictions();
    report.total_transfers += caches[l].misses();
  }
  report.decode_seconds =
      latency_estimate(report.total_transfers, max_tokens, lat, plan.has_value());
  report.tokens_per_s = report.decode_seconds > 0.0
                            ? static_cast<Real>(report.generated.size()) / report.decode_seconds
                            : 0.0;
  report.hit_rate = report.total_requests > 0
                        ? 1.0 - static_cast<Real>(report.total_transfers) /
                                    static_cast<Real>(report.total_requests)
                        : 0.0;
  return report;
}

}  // namespace moecache
