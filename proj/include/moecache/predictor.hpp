// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "moecache/moe.hpp"

namespace moecache {

struct PromptEmbedding {
  Vec v;  // unit L2 norm
};

struct EmbeddingConfig {
  int dim = 64;
  Real damping = 0.125;     // per-position decay rate; position t scaled by 1/(1 + damping*t)
  bool positional = true;  // disable for a pure bag of tokens
};

/// Deterministic hashed bag-of-tokens embedding with positional damping.
PromptEmbedding embed_prompt(const std::vector<int>& tokens, const EmbeddingConfig& cfg);

/// Per-layer average router probabilities over a greedy generation.
struct PreferenceTarget {
  Mat y;  // layers x experts, rows normalized
};

struct PredictorExample {
  Vec embedding;
  Mat target;
};

/// Greedy continuation of a prompt; returns prompt + generated tokens.
std::vector<int> greedy_decode(const MoEModel& m, const std::vector<int>& prompt,
                               int max_new_tokens);

PreferenceTarget build_target(const MoEModel& m, const std::vector<int>& prompt, int gen_len);

std::vector<PredictorExample> build_targets(const MoEModel& m,
                                            const std::vector<std::vector<int>>& prompts,
                                            int gen_len, const EmbeddingConfig& cfg);

struct PredictorConfig {
  int input_dim = 64;
  int hidden_dim = 128;  // 1024 at paper fidelity
  Real learning_rate = 2e-4;
  int epochs = 10;
  int batch_size = 16;
  Real momentum = 0.9;
  std::uint64_t seed = 0;
};

/// Two-layer MLP mapping prompt embeddings to layers x experts preference
/// scores; rows are softmaxed for prediction.
struct PredictorMLP {
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
  int layers = 0;
  int experts = 0;

  Mat raw_scores(const Vec& embedding) const;  // layers x experts
  Mat predict(const Vec& embedding) const;     // row-softmaxed
};

/// SGD with momentum on mean row-wise KL(target || softmax(pred)).
PredictorMLP train_predictor(const std::vector<PredictorExample>& dataset,
                             const PredictorConfig& cfg, int layers, int experts,
                             std::vector<Real>* epoch_loss = nullptr);

Real predictor_kl(const PredictorMLP& mlp, const std::vector<PredictorExample>& dataset);

struct PrefetchPlan {
  std::vector<std::vector<int>> experts_per_layer;  // each of size C, sorted
};

PrefetchPlan predict_prefetch(const PredictorMLP& mlp, const PromptEmbedding& emb, int capacity);

/// Prefetch plan straight from a score matrix (layers x experts).
PrefetchPlan plan_from_scores(const Mat& scores, int capacity);

}  // namespace moecache
