// SPDX-License-Identifier: Apache-2.0
#include "moecache/moe.hpp"

#include <stdexcept>

namespace moecache {

void ModelConfig::validate() const {
  if (layers < 1 || hidden_dim < 1 || ff_dim < 1 || vocab < 1) {
    throw std::invalid_argument("ModelConfig: layers, dims and vocab must be >= 1");
  }
  if (top_k < 1 || top_k > experts) {
    throw std::invalid_argument("ModelConfig: need 1 <= top_k <= experts");
  }
  if (max_seq_len < 1) {
    throw std::invalid_argument("ModelConfig: max_seq_len must be >= 1");
  }
}

MoEModel MoEModel::random_init(const ModelConfig& cfg, SeedStream rng) {
  cfg.validate();
  MoEModel m;
  m.config = cfg;
  auto fill = [](Mat& w, int rows, int cols, SeedStream& s, Real scale) {
    w.resize(rows, cols);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) w(i, j) = scale * s.gaussian();
    }
  };
  SeedStream s_embed = rng.substream("embed");
  fill(m.embed, cfg.vocab, cfg.hidden_dim, s_embed, 1.0 / std::sqrt(Real(cfg.hidden_dim)));
  SeedStream s_head = rng.substream("head");
  fill(m.head, cfg.vocab, cfg.hidden_dim, s_head, 1.0 / std::sqrt(Real(cfg.hidden_dim)));
  m.layers.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    SeedStream sl = rng.substream("layer" + std::to_string(l));
    // Wider router init keeps per-token expert preferences distinct from the
    // start; near-uniform routing leaves Top-K selections at the mercy of
    // noise and stalls both objectives.
    fill(m.layers[l].w_router, cfg.experts, cfg.hidden_dim, sl,
         12.0 / std::sqrt(Real(cfg.hidden_dim)));
    m.layers[l].experts.resize(cfg.experts);
    for (int e = 0; e < cfg.experts; ++e) {
      ExpertWeights& ew = m.layers[l].experts[e];
      fill(ew.w_gate, cfg.ff_dim, cfg.hidden_dim, sl, 1.0 / std::sqrt(Real(cfg.hidden_dim)));
      fill(ew.w_up, cfg.ff_dim, cfg.hidden_dim, sl, 1.0 / std::sqrt(Real(cfg.hidden_dim)));
      fill(ew.w_down, cfg.hidden_dim, cfg.ff_dim, sl, 1.0 / std::sqrt(Real(cfg.ff_dim)));
    }
  }
  return m;
}

void RoutingTrace::append_step(const std::vector<Vec>& p_per_layer,
                               const std::vector<std::vector<int>>& req_per_layer) {
  if (static_cast<int>(p_per_layer.size()) != layers) {
    throw std::invalid_argument("RoutingTrace::append_step: layer count mismatch");
  }
  for (int l = 0; l < layers; ++l) {
    probs[l].conservativeResize(tokens + 1, experts);
    probs[l].row(tokens) = p_per_layer[l].transpose();
    requests[l].push_back(req_per_layer[l]);
  }
  ++tokens;
}

void RoutingTrace::validate() const {
  if (static_cast<int>(probs.size()) != layers ||
      static_cast<int>(requests.size()) != layers) {
    throw std::invalid_argument("RoutingTrace: layer count mismatch");
  }
  for (int l = 0; l < layers; ++l) {
    if (probs[l].rows() != tokens || probs[l].cols() != experts ||
        static_cast<int>(requests[l].size()) != tokens) {
      throw std::invalid_argument("RoutingTrace: shape mismatch");
    }
    for (int t = 0; t < tokens; ++t) {
      if (std::abs(probs[l].row(t).sum() - 1.0) > 1e-6) {
        throw std::invalid_argument("RoutingTrace: probabilities must sum to 1");
      }
      if (static_cast<int>(requests[l][t].size()) != top_k) {
        throw std::invalid_argument("RoutingTrace: request size != top_k");
      }
      for (int i : requests[l][t]) {
        if (i < 0 || i >= experts) throw std::invalid_argument("RoutingTrace: bad expert id");
      }
    }
  }
}

Vec top_k_select(const Eigen::Ref<const Vec>& p, int k) {
  return indicator(top_k_indices(p, k), static_cast<int>(p.size()));
}

Vec expert_forward(const ExpertWeights& e, const Eigen::Ref<const Vec>& x, Activation act) {
  if (e.w_gate.cols() != x.size() || e.w_up.cols() != x.size() ||
      e.w_down.cols() != e.w_gate.rows()) {
    throw std::invalid_argument("expert_forward: shape mismatch");
  }
  const Vec gate = apply_activation(Vec(e.w_gate * x), act);
  const Vec up = e.w_up * x;
  return e.w_down * gate.cwiseProduct(up);
}

LayerOutput moe_layer_forward(const MoELayer& layer, const Eigen::Ref<const Vec>& x, int k,
                              Activation act, RoutingMode routing) {
  if (layer.w_router.cols() != x.size()) {
    throw std::invalid_argument("moe_layer_forward: shape mismatch");
  }
  LayerOutput out;
  out.p = softmax(Vec(layer.w_router * x));
  out.selected = top_k_indices(out.p, k);
  out.y = Vec::Zero(x.size());
  if (routing == RoutingMode::kSoft) {
    for (int e = 0; e < static_cast<int>(layer.experts.size()); ++e) {
      out.y += out.p[e] * expert_forward(layer.experts[e], x, act);
    }
  } else {
    for (int e : out.selected) {
      out.y += out.p[e] * expert_forward(layer.experts[e], x, act);
    }
  }
  return out;
}

StepOutput model_step(const MoEModel& m, int token) {
  if (token < 0 || token >= m.config.vocab) {
    throw std::invalid_argument("model_step: token id out of range");
  }
  StepOutput out;
  Vec h = m.embed.row(token).transpose();
  out.probs.reserve(m.layers.size());
  out.requests.reserve(m.layers.size());
  for (const MoELayer& layer : m.layers) {
    LayerOutput lo =
        moe_layer_forward(layer, h, m.config.top_k, m.config.activation, m.config.routing);
    h += lo.y;
    out.probs.push_back(std::move(lo.p));
    out.requests.push_back(std::move(lo.selected));
  }
  out.logits = m.head * h;
  return out;
}

ForwardResult model_forward(const MoEModel& m, const std::vector<int>& tokens) {
  const int t_len = static_cast<int>(tokens.size());
  if (t_len < 1) throw std::invalid_argument("model_forward: empty sequence");
  if (t_len > m.config.max_seq_len) {
    throw std::invalid_argument("model_forward: sequence exceeds max_seq_len");
  }
  ForwardResult r;
  r.trace.layers = m.config.layers;
  r.trace.experts = m.config.experts;
  r.trace.top_k = m.config.top_k;
  r.trace.probs.assign(m.config.layers, Mat(t_len, m.config.experts));
  r.trace.requests.assign(m.config.layers, {});
  r.logits.resize(t_len, m.config.vocab);
  for (int t = 0; t < t_len; ++t) {
    StepOutput step = model_step(m, tokens[t]);
    r.logits.row(t) = step.logits.transpose();
    for (int l = 0; l < m.config.layers; ++l) {
      r.trace.probs[l].row(t) = step.probs[l].transpose();
      r.trace.requests[l].push_back(std::move(step.requests[l]));
    }
  }
  r.trace.tokens = t_len;
  return r;
}

Real nll_loss(const Eigen::Ref<const Mat>& logits, const std::vector<int>& targets) {
  if (static_cast<int>(targets.size()) != logits.rows()) {
    throw std::invalid_argument("nll_loss: targets length mismatch");
  }
  Real total = 0.0;
  for (int t = 0; t < logits.rows(); ++t) {
    const int target = targets[t];
    if (target < 0 || target >= logits.cols()) {
      throw std::invalid_argument("nll_loss: target id out of range");
    }
    total += log_sum_exp(logits.row(t)) - logits(t, target);
  }
  return total / static_cast<Real>(logits.rows());
}

}  // namespace moecache
