// SPDX-License-Identifier: Apache-2.0
#include "moecache/predictor.hpp"

#include <cmath>
#include <stdexcept>

#include "moecache/rng.hpp"

namespace moecache {

namespace {

/// Deterministic pseudo-random unit direction for a token id.
Vec token_direction(int token, int dim) {
  SeedStream s(static_cast<std::uint64_t>(token) + 1, "token-embedding");
  Vec v(dim);
  for (int i = 0; i < dim; ++i) v[i] = s.gaussian();
  return v / v.norm();
}

Vec row_softmax_row(const Mat& m, int row) { return softmax(Vec(m.row(row).transpose())); }

}  // namespace

PromptEmbedding embed_prompt(const std::vector<int>& tokens, const EmbeddingConfig& cfg) {
  if (tokens.empty()) throw std::invalid_argument("embed_prompt: empty prompt");
  Vec acc = Vec::Zero(cfg.dim);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const Real damp =
        cfg.positional ? 1.0 / (1.0 + cfg.damping * static_cast<Real>(t)) : 1.0;
    acc += damp * token_direction(tokens[t], cfg.dim);
  }
  const Real n = acc.norm();
  if (n > 0.0) acc /= n;
  return {acc};
}

std::vector<int> greedy_decode(const MoEModel& m, const std::vector<int>& prompt,
                               int max_new_tokens) {
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  std::vector<int> out = prompt;
  int current = prompt.back();
  for (int i = 0; i < max_new_tokens; ++i) {
    const StepOutput step = model_step(m, current);
    int best = 0;
    for (int v = 1; v < step.logits.size(); ++v) {
      if (step.logits[v] > step.logits[best]) best = v;
    }
    out.push_back(best);
    current = best;
  }
  return out;
}

PreferenceTarget build_target(const MoEModel& m, const std::vector<int>& prompt, int gen_len) {
  if (gen_len < 1) throw std::invalid_argument("build_target: gen_len must be >= 1");
  const std::vector<int> full = greedy_decode(m, prompt, gen_len);
  PreferenceTarget target;
  target.y = Mat::Zero(m.config.layers, m.config.experts);
  // Average router probabilities over the generated positions only.
  for (std::size_t t = prompt.size(); t < full.size(); ++t) {
    const StepOutput step = model_step(m, full[t]);
    for (int l = 0; l < m.config.layers; ++l) {
      target.y.row(l) += step.probs[l].transpose();
    }
  }
  target.y /= static_cast<Real>(gen_len);
  for (int l = 0; l < m.config.layers; ++l) {
    target.y.row(l) /= target.y.row(l).sum();
  }
  return target;
}

std::vector<PredictorExample> build_targets(const MoEModel& m,
                                            const std::vector<std::vector<int>>& prompts,
                                            int gen_len, const EmbeddingConfig& cfg) {
  std::vector<PredictorExample> dataset;
  dataset.reserve(prompts.size());
  for (const auto& prompt : prompts) {
    PredictorExample ex;
    ex.embedding = embed_prompt(prompt, cfg).v;
    ex.target = build_target(m, prompt, gen_len).y;
    dataset.push_back(std::move(ex));
  }
  return dataset;
}

Mat PredictorMLP::raw_scores(const Vec& embedding) const {
  const Vec hidden = apply_activation(Vec(w1 * embedding + b1), Activation::kReLU);
  const Vec out = w2 * hidden + b2;
  return Eigen::Map<const Mat>(out.data(), experts, layers).transpose();
}

Mat PredictorMLP::predict(const Vec& embedding) const {
  Mat scores = raw_scores(embedding);
  for (int l = 0; l < layers; ++l) {
    scores.row(l) = row_softmax_row(scores, l).transpose();
  }
  return scores;
}

PredictorMLP train_predictor(const std::vector<PredictorExample>& dataset,
                             const PredictorConfig& cfg, int layers, int experts,
                             std::vector<Real>* epoch_loss) {
  if (dataset.empty()) throw std::invalid_argument("train_predictor: empty dataset");
  PredictorMLP mlp;
  mlp.layers = layers;
  mlp.experts = experts;
  const int out_dim = layers * experts;
  SeedStream rng(cfg.seed, "predictor-init");
  auto gaussian_fill = [&](Mat& m, int rows, int cols, Real scale) {
    m.resize(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.gaussian();
  };
  gaussian_fill(mlp.w1, cfg.hidden_dim, cfg.input_dim, 1.0 / std::sqrt(Real(cfg.input_dim)));
  mlp.b1 = Vec::Zero(cfg.hidden_dim);
  gaussian_fill(mlp.w2, out_dim, cfg.hidden_dim, 1.0 / std::sqrt(Real(cfg.hidden_dim)));
  mlp.b2 = Vec::Zero(out_dim);

  Mat vw1 = Mat::Zero(mlp.w1.rows(), mlp.w1.cols());
  Vec vb1 = Vec::Zero(mlp.b1.size());
  Mat vw2 = Mat::Zero(mlp.w2.rows(), mlp.w2.cols());
  Vec vb2 = Vec::Zero(mlp.b2.size());

  SeedStream order_rng = rng.substream("order");
  const int n = static_cast<int>(dataset.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = order_rng.permutation(n);
    Real running = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int end = std::min(n, start + cfg.batch_size);
      Mat gw1 = Mat::Zero(mlp.w1.rows(), mlp.w1.cols());
      Vec gb1 = Vec::Zero(mlp.b1.size());
      Mat gw2 = Mat::Zero(mlp.w2.rows(), mlp.w2.cols());
      Vec gb2 = Vec::Zero(mlp.b2.size());
      for (int i = start; i < end; ++i) {
        const PredictorExample& ex = dataset[order[i]];
        const Vec pre = mlp.w1 * ex.embedding + mlp.b1;
        const Vec hidden = apply_activation(pre, Activation::kReLU);
        const Vec out = mlp.w2 * hidden + mlp.b2;
        // KL(y || softmax(z)) per row; gradient w.r.t. z is (softmax(z) - y) / L.
        Vec dz(out.size());
        for (int l = 0; l < layers; ++l) {
          const Vec z = out.segment(l * experts, experts);
          const Vec q = softmax(z);
          const Vec y = ex.target.row(l).transpose();
          for (int e = 0; e < experts; ++e) {
            if (y[e] > 0.0) running += y[e] * std::log(y[e] / q[e]);
          }
          dz.segment(l * experts, experts) = (q - y) / static_cast<Real>(layers);
        }
        gw2 += dz * hidden.transpose();
        gb2 += dz;
        Vec dh = mlp.w2.transpose() * dz;
        dh = dh.cwiseProduct(activation_grad(pre, Activation::kReLU));
        gw1 += dh * ex.embedding.transpose();
        gb1 += dh;
      }
      const Real inv = 1.0 / static_cast<Real>(end - start);
      vw1 = cfg.momentum * vw1 + inv * gw1;
      vb1 = cfg.momentum * vb1 + inv * gb1;
      vw2 = cfg.momentum * vw2 + inv * gw2;
      vb2 = cfg.momentum * vb2 + inv * gb2;
      mlp.w1 -= cfg.learning_rate * vw1;
      mlp.b1 -= cfg.learning_rate * vb1;
      mlp.w2 -= cfg.learning_rate * vw2;
      mlp.b2 -= cfg.learning_rate * vb2;
    }
    const Real mean_kl = running / (static_cast<Real>(n) * static_cast<Real>(layers));
    if (!std::isfinite(mean_kl)) throw std::runtime_error("train_predictor: non-finite loss");
    if (epoch_loss) epoch_loss->push_back(mean_kl);
  }
  return mlp;
}

Real predictor_kl(const PredictorMLP& mlp, const std::vector<PredictorExample>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("predictor_kl: empty dataset");
  Real total = 0.0;
  for (const PredictorExample& ex : dataset) {
    const Mat pred = mlp.predict(ex.embedding);
    for (int l = 0; l < mlp.layers; ++l) {
      for (int e = 0; e < mlp.experts; ++e) {
        const Real y = ex.target(l, e);
        if (y > 0.0) total += y * std::log(y / pred(l, e));
      }
    }
  }
  return total / (static_cast<Real>(dataset.size()) * static_cast<Real>(mlp.layers));
}

PrefetchPlan plan_from_scores(const Mat& scores, int capacity) {
  if (capacity < 1 || capacity > scores.cols()) {
    throw std::invalid_argument("plan_from_scores: capacity out of range");
  }
  PrefetchPlan plan;
  plan.experts_per_layer.reserve(scores.rows());
  for (int l = 0; l < scores.rows(); ++l) {
    plan.experts_per_layer.push_back(top_k_indices(Vec(scores.row(l).transpose()), capacity));
  }
  return plan;
}

PrefetchPlan predict_prefetch(const PredictorMLP& mlp, const PromptEmbedding& emb,
                              int capacity) {
  if (capacity > mlp.experts) {
    throw std::invalid_argument("predict_prefetch: capacity exceeds expert count");
  }
  return plan_from_scores(mlp.predict(emb.v), capacity);
}

}  // namespace moecache
