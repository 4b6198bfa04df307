// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "moecache/linalg.hpp"
#include "moecache/rng.hpp"

namespace moecache {

enum class RoutingMode { kHard, kSoft };

struct ModelConfig {
  int layers = 4;       // L
  int experts = 16;     // E
  int top_k = 2;        // K
  int hidden_dim = 32;  // d
  int ff_dim = 64;      // d_ff
  int vocab = 64;       // V
  int max_seq_len = 64; // T_max
  Activation activation = Activation::kSiLU;
  RoutingMode routing = RoutingMode::kHard;

  void validate() const;
};

/// One expert FFN: y = W_down (phi(W_gate x) .* (W_up x)).
struct ExpertWeights {
  Mat w_gate;  // ff_dim x hidden_dim
  Mat w_up;    // ff_dim x hidden_dim
  Mat w_down;  // hidden_dim x ff_dim
};

struct MoELayer {
  Mat w_router;  // experts x hidden_dim
  std::vector<ExpertWeights> experts;
};

struct MoEModel {
  ModelConfig config;
  Mat embed;  // vocab x hidden_dim
  std::vector<MoELayer> layers;
  Mat head;  // vocab x hidden_dim

  static MoEModel random_init(const ModelConfig& cfg, SeedStream rng);
};

/// Router probabilities and Top-K requests for every (layer, token) of one
/// sequence. The substrate for the cache simulations and auxiliary losses.
struct RoutingTrace {
  int layers = 0;
  int tokens = 0;
  int experts = 0;
  int top_k = 0;
  std::vector<Mat> probs;                          // per layer: tokens x experts
  std::vector<std::vector<std::vector<int>>> requests;  // [layer][token] -> sorted ids

  Vec prob_vector(int layer, int token) const { return probs[layer].row(token).transpose(); }
  Vec request_vector(int layer, int token) const {
    return indicator(requests[layer][token], experts);
  }
  void append_step(const std::vector<Vec>& p_per_layer,
                   const std::vector<std::vector<int>>& req_per_layer);
  void validate() const;
};

/// Binary Top-K selection over routing probabilities, lowest index wins ties.
Vec top_k_select(const Eigen::Ref<const Vec>& p, int k);

Vec expert_forward(const ExpertWeights& e, const Eigen::Ref<const Vec>& x,
                   Activation act = Activation::kSiLU);

struct LayerOutput {
  Vec y;
  Vec p;
  std::vector<int> selected;
};

LayerOutput moe_layer_forward(const MoELayer& layer, const Eigen::Ref<const Vec>& x, int k,
                              Activation act = Activation::kSiLU,
                              RoutingMode routing = RoutingMode::kHard);

struct StepOutput {
  Vec logits;                        // vocab
  std::vector<Vec> probs;            // per layer
  std::vector<std::vector<int>> requests;  // per layer
};

/// Forward of a single position. The stack has no attention, so positions are
/// independent and a full-sequence forward is a fold of steps.
StepOutput model_step(const MoEModel& m, int token);

struct ForwardResult {
  Mat logits;  // tokens x vocab
  RoutingTrace trace;
};

ForwardResult model_forward(const MoEModel& m, const std::vector<int>& tokens);

Real nll_loss(const Eigen::Ref<const Mat>& logits, const std::vector<int>& targets);

}  // namespace moecache
