// SPDX-License-Identifier: Apache-2.0
#include "moecache/trainer.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "moecache/cache_sim.hpp"

namespace moecache {

namespace {

std::string expert_prefix(int l, int e) {
  return "layer" + std::to_string(l) + ".expert" + std::to_string(e);
}

struct ParamSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  bool trainable = false;
};

std::vector<ParamSpec> param_specs(const MoEModel& m, const LoRASet* lora) {
  std::vector<ParamSpec> specs;
  auto push = [&](const std::string& name, const Mat& w, bool trainable) {
    specs.push_back({name, static_cast<int>(w.rows()), static_cast<int>(w.cols()), trainable});
  };
  push("embed", m.embed, false);
  push("head", m.head, false);
  for (int l = 0; l < m.config.layers; ++l) {
    push("layer" + std::to_string(l) + ".router", m.layers[l].w_router, true);
    for (int e = 0; e < m.config.experts; ++e) {
      const ExpertWeights& ew = m.layers[l].experts[e];
      push(expert_prefix(l, e) + ".gate", ew.w_gate, true);
      push(expert_prefix(l, e) + ".up", ew.w_up, false);
      push(expert_prefix(l, e) + ".down", ew.w_down, false);
      if (lora && lora->enabled()) {
        const ExpertAdapters& ad = lora->layers[l][e];
        push(expert_prefix(l, e) + ".lora_up.a", ad.up.a, true);
        push(expert_prefix(l, e) + ".lora_up.b", ad.up.b, true);
        push(expert_prefix(l, e) + ".lora_down.a", ad.down.a, true);
        push(expert_prefix(l, e) + ".lora_down.b", ad.down.b, true);
      }
    }
  }
  return specs;
}

/// Lazily created tape vars for model weights. Routers and gate projections
/// are trainable leaves; everything else enters as constants (up/down get an
/// adapter delta on top when LoRA is active).
class GraphWeights {
 public:
  GraphWeights(ad::Tape& tape, const MoEModel& model, const LoRASet* lora,
               bool train_all = false)
      : tape_(tape), model_(model), lora_(lora), train_all_(train_all) {
    const int l_count = model.config.layers;
    const int e_count = model.config.experts;
    routers_.assign(l_count, ad::Var{});
    gates_.assign(l_count, std::vector<ad::Var>(e_count));
    ups_.assign(l_count, std::vector<ad::Var>(e_count));
    downs_.assign(l_count, std::vector<ad::Var>(e_count));
  }

  ad::Var router(int l) {
    if (!routers_[l].valid()) {
      routers_[l] = tape_.leaf(model_.layers[l].w_router);
      created_.emplace_back("layer" + std::to_string(l) + ".router", routers_[l]);
    }
    return routers_[l];
  }

  ad::Var gate(int l, int e) {
    if (!gates_[l][e].valid()) {
      gates_[l][e] = tape_.leaf(model_.layers[l].experts[e].w_gate);
      created_.emplace_back(expert_prefix(l, e) + ".gate", gates_[l][e]);
    }
    return gates_[l][e];
  }

  ad::Var up(int l, int e) {
    if (!ups_[l][e].valid()) ups_[l][e] = effective(l, e, /*up=*/true);
    return ups_[l][e];
  }

  ad::Var down(int l, int e) {
    if (!downs_[l][e].valid()) downs_[l][e] = effective(l, e, /*up=*/false);
    return downs_[l][e];
  }

  ad::Var embed_row(int token) {
    auto it = embed_rows_.find(token);
    if (it != embed_rows_.end()) return it->second;
    ad::Var v;
    if (train_all_) {
      if (!embed_.valid()) {
        embed_ = tape_.leaf(model_.embed);
        created_.emplace_back("embed", embed_);
      }
      v = ad::slice_row(tape_, embed_, token);
    } else {
      v = tape_.constant(model_.embed.row(token).transpose());
    }
    embed_rows_.emplace(token, v);
    return v;
  }

  ad::Var head() {
    if (!head_.valid()) {
      if (train_all_) {
        head_ = tape_.leaf(model_.head);
        created_.emplace_back("head", head_);
      } else {
        head_ = tape_.constant(model_.head);
      }
    }
    return head_;
  }

  const std::vector<std::pair<std::string, ad::Var>>& created() const { return created_; }

 private:
  ad::Var effective(int l, int e, bool up) {
    const ExpertWeights& ew = model_.layers[l].experts[e];
    if (train_all_) {
      ad::Var leaf = tape_.leaf(up ? ew.w_up : ew.w_down);
      created_.emplace_back(expert_prefix(l, e) + (up ? ".up" : ".down"), leaf);
      return leaf;
    }
    ad::Var base = tape_.constant(up ? ew.w_up : ew.w_down);
    if (!lora_ || !lora_->enabled()) return base;
    const LoRAAdapter& adapter = up ? lora_->layers[l][e].up : lora_->layers[l][e].down;
    const std::string stem = expert_prefix(l, e) + (up ? ".lora_up" : ".lora_down");
    ad::Var a = tape_.leaf(adapter.a);
    ad::Var b = tape_.leaf(adapter.b);
    created_.emplace_back(stem + ".a", a);
    created_.emplace_back(stem + ".b", b);
    return ad::add(tape_, base, ad::matmul(tape_, b, a));
  }

  ad::Tape& tape_;
  const MoEModel& model_;
  const LoRASet* lora_;
  bool train_all_ = false;
  ad::Var embed_;
  std::vector<ad::Var> routers_;
  std::vector<std::vector<ad::Var>> gates_, ups_, downs_;
  std::unordered_map<int, ad::Var> embed_rows_;
  ad::Var head_;
  std::vector<std::pair<std::string, ad::Var>> created_;
};

struct SequenceGraph {
  ad::Var total;
  LossBreakdown values;
};

/// Records the full objective for one sequence on the tape. Subgraphs for
/// zero-weighted terms are skipped; their reported values are still computed
/// as plain folds over the recorded router distributions.
SequenceGraph build_objective(ad::Tape& tape, GraphWeights& gw, const MoEModel& model,
                              const MoEModel* base, const Sequence& seq, const LossWeights& lw,
                              GradMode mode, Real lambda_balance, int bptt_window) {
  const ModelConfig& cfg = model.config;
  const int t_len = static_cast<int>(seq.tokens.size());
  if (t_len < 1) throw std::invalid_argument("build_objective: empty sequence");
  if (static_cast<int>(seq.targets.size()) != t_len) {
    throw std::invalid_argument("build_objective: target length mismatch");
  }

  std::vector<std::vector<ad::Var>> p_vars(cfg.layers, std::vector<ad::Var>(t_len));
  std::vector<std::vector<std::vector<int>>> selections(cfg.layers,
                                                        std::vector<std::vector<int>>(t_len));

  ad::Var nll_sum;
  for (int t = 0; t < t_len; ++t) {
    ad::Var h = gw.embed_row(seq.tokens[t]);
    for (int l = 0; l < cfg.layers; ++l) {
      ad::Var z = ad::matmul(tape, gw.router(l), h);
      ad::Var p = ad::softmax_vec(tape, z);
      std::vector<int> sel = top_k_indices(tape.value(p), cfg.top_k);
      p_vars[l][t] = p;
      selections[l][t] = sel;
      const std::vector<int>* active = &sel;
      std::vector<int> all;
      if (cfg.routing == RoutingMode::kSoft) {
        all.resize(cfg.experts);
        for (int e = 0; e < cfg.experts; ++e) all[e] = e;
        active = &all;
      }
      ad::Var y;
      for (int e : *active) {
        ad::Var gate_act = ad::activation(tape, ad::matmul(tape, gw.gate(l, e), h),
                                          cfg.activation);
        ad::Var mixed = ad::hadamard(tape, gate_act, ad::matmul(tape, gw.up(l, e), h));
        ad::Var out = ad::matmul(tape, gw.down(l, e), mixed);
        ad::Var contrib = ad::mul_scalar(tape, out, ad::entry(tape, p, e));
        y = y.valid() ? ad::add(tape, y, contrib) : contrib;
      }
      h = ad::add(tape, h, y);
    }
    ad::Var logits = ad::matmul(tape, gw.head(), h);
    ad::Var nll_t = ad::nll_token(tape, logits, seq.targets[t]);
    nll_sum = nll_sum.valid() ? ad::add(tape, nll_sum, nll_t) : nll_t;
  }
  ad::Var nll = ad::scale(tape, nll_sum, 1.0 / static_cast<Real>(t_len));

  SequenceGraph g;
  g.values.nll = ad::scalar_value(tape, nll);
  g.total = nll;

  // Normalizer recursion is data-independent; precompute it once.
  const Real cap = static_cast<Real>(lw.cache_capacity);
  std::vector<Real> norm(t_len + 1, 1.0);
  for (int t = 1; t <= t_len; ++t) {
    norm[t] = (t == 1) ? 1.0 : lw.gamma * norm[t - 1] + static_cast<Real>(cfg.top_k) / cap;
  }

  // Cache simulation term: value fold always, tape subgraph when weighted.
  {
    const bool on_tape = lw.lambda_cs != 0.0;
    Real value_acc = 0.0;
    ad::Var cache_sum;
    for (int l = 0; l < cfg.layers; ++l) {
      Vec c_val = Vec::Constant(cfg.experts, cap / static_cast<Real>(cfg.experts));
      ad::Var c;
      if (on_tape) c = tape.constant(c_val);
      for (int t = 0; t < t_len; ++t) {
        Vec s_val;
        ad::Var s;
        if (mode == GradMode::kSoftRoute) {
          s_val = static_cast<Real>(cfg.top_k) * tape.value(p_vars[l][t]).col(0);
          if (on_tape) s = ad::scale(tape, p_vars[l][t], static_cast<Real>(cfg.top_k));
        } else {
          s_val = indicator(selections[l][t], cfg.experts);
          if (on_tape) s = ad::straight_through(tape, p_vars[l][t], s_val);
        }
        value_acc += (s_val.array() * (1.0 - c_val.array())).sum();
        if (on_tape) {
          ad::Var term = ad::cache_miss_term(tape, s, c);
          cache_sum = cache_sum.valid() ? ad::add(tape, cache_sum, term) : term;
        }
        if (t + 1 < t_len) {
          const Real coef_c = lw.gamma * norm[t + 1] / norm[t + 2];
          const Real coef_s = 1.0 / norm[t + 2];
          c_val = coef_c * c_val + coef_s * s_val;
          if (on_tape) {
            c = ad::axpby(tape, coef_c, c, coef_s, s);
            if (bptt_window > 0 && (t + 1) % bptt_window == 0) c = ad::detach(tape, c);
          }
        }
      }
    }
    const Real denom = static_cast<Real>(cfg.layers) * static_cast<Real>(t_len);
    g.values.cache = value_acc / denom;
    if (on_tape) {
      ad::Var cache = ad::scale(tape, cache_sum, 1.0 / denom);
      g.total = ad::axpby(tape, 1.0, g.total, lw.lambda_cs, cache);
    }
  }

  // Rank matching against the frozen base router.
  if (base != nullptr) {
    const bool on_tape = lw.lambda_rm != 0.0;
    ForwardResult base_fwd = model_forward(*base, seq.tokens);
    Real value_acc = 0.0;
    ad::Var rank_sum;
    for (int l = 0; l < cfg.layers; ++l) {
      for (int t = 0; t < t_len; ++t) {
        const Vec p_base = base_fwd.trace.prob_vector(l, t);
        value_acc += rank_mistakes(p_base, Vec(tape.value(p_vars[l][t]).col(0)), lw.rho);
        if (on_tape) {
          ad::Var term = ad::rank_hinge(tape, p_vars[l][t], p_base, lw.rho);
          rank_sum = rank_sum.valid() ? ad::add(tape, rank_sum, term) : term;
        }
      }
    }
    const Real denom = static_cast<Real>(cfg.layers) * static_cast<Real>(t_len);
    g.values.rank = value_acc / denom;
    if (on_tape) {
      ad::Var rank = ad::scale(tape, rank_sum, 1.0 / denom);
      g.total = ad::axpby(tape, 1.0, g.total, lw.lambda_rm, rank);
    }
  } else if (lw.lambda_rm != 0.0) {
    throw std::invalid_argument("build_objective: rank loss needs a base model snapshot");
  }

  // Load-balance pressure (pretraining only): E * sum_i f_i * mean_p_i.
  {
    const bool on_tape = lambda_balance != 0.0;
    Real value_acc = 0.0;
    ad::Var balance_sum;
    for (int l = 0; l < cfg.layers; ++l) {
      Vec freq = Vec::Zero(cfg.experts);
      for (int t = 0; t < t_len; ++t) {
        for (int e : selections[l][t]) freq[e] += 1.0;
      }
      freq /= static_cast<Real>(t_len) * static_cast<Real>(cfg.top_k);
      Vec mean_p_val = Vec::Zero(cfg.experts);
      for (int t = 0; t < t_len; ++t) mean_p_val += tape.value(p_vars[l][t]).col(0);
      mean_p_val /= static_cast<Real>(t_len);
      value_acc += static_cast<Real>(cfg.experts) * freq.dot(mean_p_val);
      if (on_tape) {
        ad::Var mean_sum;
        for (int t = 0; t < t_len; ++t) {
          mean_sum = mean_sum.valid() ? ad::add(tape, mean_sum, p_vars[l][t]) : p_vars[l][t];
        }
        ad::Var mean_p = ad::scale(tape, mean_sum, 1.0 / static_cast<Real>(t_len));
        ad::Var term = ad::dot(tape, tape.constant(freq), mean_p);
        term = ad::scale(tape, term, static_cast<Real>(cfg.experts));
        balance_sum = balance_sum.valid() ? ad::add(tape, balance_sum, term) : term;
      }
    }
    g.values.balance = value_acc / static_cast<Real>(cfg.layers);
    if (on_tape) {
      ad::Var balance = ad::scale(tape, balance_sum, 1.0 / static_cast<Real>(cfg.layers));
      g.total = ad::axpby(tape, 1.0, g.total, lambda_balance, balance);
    }
  }

  g.values.total = g.values.nll + lw.lambda_cs * g.values.cache + lw.lambda_rm * g.values.rank +
                   lambda_balance * g.values.balance;
  return g;
}

void check_finite(const LossBreakdown& b) {
  auto bad = [](Real v) { return !std::isfinite(v); };
  if (bad(b.nll)) throw std::runtime_error("backward: non-finite loss component l_nll");
  if (bad(b.cache)) throw std::runtime_error("backward: non-finite loss component l_cs");
  if (bad(b.rank)) throw std::runtime_error("backward: non-finite loss component l_rm");
  if (bad(b.balance)) throw std::runtime_error("backward: non-finite loss component l_balance");
}

}  // namespace

Mat apply_lora(const Mat& w, const LoRAAdapter& adapter) {
  if (adapter.b.cols() != adapter.a.rows() || adapter.b.rows() != w.rows() ||
      adapter.a.cols() != w.cols()) {
    throw std::invalid_argument("apply_lora: shape mismatch");
  }
  return w + adapter.b * adapter.a;
}

LoRASet LoRASet::make(const ModelConfig& cfg, int rank, SeedStream rng) {
  if (rank > std::min(cfg.hidden_dim, cfg.ff_dim)) {
    throw std::invalid_argument("LoRASet: rank exceeds min(hidden_dim, ff_dim)");
  }
  LoRASet set;
  set.rank = rank;
  if (rank <= 0) return set;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(rank));
  set.layers.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    set.layers[l].resize(cfg.experts);
    for (int e = 0; e < cfg.experts; ++e) {
      SeedStream s = rng.substream("lora" + std::to_string(l) + "_" + std::to_string(e));
      auto gaussian_fill = [&](Mat& m, int rows, int cols) {
        m.resize(rows, cols);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) m(i, j) = scale * s.gaussian();
      };
      ExpertAdapters& ad = set.layers[l][e];
      gaussian_fill(ad.up.a, rank, cfg.hidden_dim);
      ad.up.b = Mat::Zero(cfg.ff_dim, rank);
      gaussian_fill(ad.down.a, rank, cfg.ff_dim);
      ad.down.b = Mat::Zero(cfg.hidden_dim, rank);
    }
  }
  return set;
}

MoEModel merge_lora(const MoEModel& model, const LoRASet& lora) {
  if (!lora.enabled()) return model;
  MoEModel merged = model;
  for (int l = 0; l < model.config.layers; ++l) {
    for (int e = 0; e < model.config.experts; ++e) {
      ExpertWeights& ew = merged.layers[l].experts[e];
      ew.w_up = apply_lora(ew.w_up, lora.layers[l][e].up);
      ew.w_down = apply_lora(ew.w_down, lora.layers[l][e].down);
    }
  }
  return merged;
}

void TrainConfig::validate() const {
  if (learning_rate < 0.0) {
    throw std::invalid_argument("TrainConfig: learning_rate must be nonnegative");
  }
  if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
  if (train_all && lora_rank > 0) {
    throw std::invalid_argument("TrainConfig: train_all and LoRA are mutually exclusive");
  }
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  weights.validate();
}

const Mat& GradientReport::find(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return grads[i];
  }
  throw std::invalid_argument("GradientReport: unknown parameter " + name);
}

std::vector<ParamRef> enumerate_params(MoEModel& model, LoRASet* lora) {
  std::vector<ParamRef> refs;
  refs.push_back({"embed", &model.embed, false});
  refs.push_back({"head", &model.head, false});
  for (int l = 0; l < model.config.layers; ++l) {
    refs.push_back({"layer" + std::to_string(l) + ".router", &model.layers[l].w_router, true});
    for (int e = 0; e < model.config.experts; ++e) {
      ExpertWeights& ew = model.layers[l].experts[e];
      refs.push_back({expert_prefix(l, e) + ".gate", &ew.w_gate, true});
      refs.push_back({expert_prefix(l, e) + ".up", &ew.w_up, false});
      refs.push_back({expert_prefix(l, e) + ".down", &ew.w_down, false});
      if (lora && lora->enabled()) {
        ExpertAdapters& ad = lora->layers[l][e];
        refs.push_back({expert_prefix(l, e) + ".lora_up.a", &ad.up.a, true});
        refs.push_back({expert_prefix(l, e) + ".lora_up.b", &ad.up.b, true});
        refs.push_back({expert_prefix(l, e) + ".lora_down.a", &ad.down.a, true});
        refs.push_back({expert_prefix(l, e) + ".lora_down.b", &ad.down.b, true});
      }
    }
  }
  return refs;
}

Real objective_value(const MoEModel& model, const LoRASet* lora, const MoEModel* base,
                     const Sequence& seq, const LossWeights& w, GradMode mode,
                     Real lambda_balance, int bptt_window, bool train_all) {
  ad::Tape tape;
  GraphWeights gw(tape, model, lora, train_all);
  SequenceGraph g =
      build_objective(tape, gw, model, base, seq, w, mode, lambda_balance, bptt_window);
  return ad::scalar_value(tape, g.total);
}

LossBreakdown backward(const MoEModel& model, const LoRASet* lora, const MoEModel* base,
                       std::span<const Sequence> batch, const LossWeights& w, GradMode mode,
                       Real lambda_balance, int bptt_window, GradientReport* report,
                       bool train_all) {
  if (batch.empty()) throw std::invalid_argument("backward: empty batch");
  w.validate();
  const std::vector<ParamSpec> specs = param_specs(model, lora);
  std::unordered_map<std::string, int> slot;
  if (report) {
    report->names.clear();
    report->grads.clear();
    for (std::size_t i = 0; i < specs.size(); ++i) {
      slot[specs[i].name] = static_cast<int>(i);
      report->names.push_back(specs[i].name);
      report->grads.push_back(Mat::Zero(specs[i].rows, specs[i].cols));
    }
  }

  LossBreakdown mean;
  for (const Sequence& seq : batch) {
    ad::Tape tape;
    GraphWeights gw(tape, model, lora, train_all);
    SequenceGraph g =
        build_objective(tape, gw, model, base, seq, w, mode, lambda_balance, bptt_window);
    check_finite(g.values);
    mean.nll += g.values.nll;
    mean.cache += g.values.cache;
    mean.rank += g.values.rank;
    mean.balance += g.values.balance;
    mean.total += g.values.total;
    if (report) {
      tape.backward(g.total);
      for (const auto& [name, var] : gw.created()) {
        report->grads[slot.at(name)] += tape.grad_or_zero(var);
      }
    }
  }
  const Real inv = 1.0 / static_cast<Real>(batch.size());
  mean.nll *= inv;
  mean.cache *= inv;
  mean.rank *= inv;
  mean.balance *= inv;
  mean.total *= inv;
  if (report) {
    Real sq = 0.0;
    for (Mat& g : report->grads) {
      g *= inv;
      sq += g.squaredNorm();
    }
    report->global_norm = std::sqrt(sq);
  }
  return mean;
}

std::vector<Mat> finite_difference_grad(
    const std::function<Real(const std::vector<Mat>&)>& loss_fn, const std::vector<Mat>& params,
    Real epsilon) {
  if (epsilon <= 0.0) throw std::invalid_argument("finite_difference_grad: epsilon must be > 0");
  std::vector<Mat> grads;
  grads.reserve(params.size());
  std::vector<Mat> work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Mat g(params[p].rows(), params[p].cols());
    for (int i = 0; i < params[p].rows(); ++i) {
      for (int j = 0; j < params[p].cols(); ++j) {
        const Real saved = work[p](i, j);
        work[p](i, j) = saved + epsilon;
        const Real up = loss_fn(work);
        work[p](i, j) = saved - epsilon;
        const Real down = loss_fn(work);
        work[p](i, j) = saved;
        g(i, j) = (up - down) / (2.0 * epsilon);
      }
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

namespace {

struct AdamW {
  Real lr_peak, beta1, beta2, eps, weight_decay;
  long total_steps, warmup_steps;
  long step_count = 0;
  std::vector<Mat> m, v;

  void init(const std::vector<Mat*>& params) {
    for (Mat* p : params) {
      m.push_back(Mat::Zero(p->rows(), p->cols()));
      v.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }

  Real lr_at(long step) const {
    if (total_steps <= 0) return lr_peak;
    if (warmup_steps > 0 && step <= warmup_steps) {
      return lr_peak * static_cast<Real>(step) / static_cast<Real>(warmup_steps);
    }
    const Real rem = static_cast<Real>(total_steps - step) /
                     static_cast<Real>(std::max<long>(1, total_steps - warmup_steps));
    return lr_peak * std::max<Real>(0.0, rem);
  }

  void step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads) {
    ++step_count;
    const Real lr = lr_at(step_count);
    const Real bc1 = 1.0 - std::pow(beta1, static_cast<Real>(step_count));
    const Real bc2 = 1.0 - std::pow(beta2, static_cast<Real>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * (*grads[i]);
      v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i]->cwiseProduct(*grads[i]);
      const Mat m_hat = m[i] / bc1;
      const Mat v_hat = v[i] / bc2;
      *params[i] -=
          lr * (m_hat.array() / (v_hat.array().sqrt() + eps) + weight_decay * params[i]->array())
              .matrix();
    }
  }
};

}  // namespace

TrainResult train(const MoEModel& model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty dataset");

  TrainResult result;
  result.model = model;
  SeedStream rng(cfg.seed, "train");
  result.lora = LoRASet::make(model.config, cfg.lora_rank, rng.substream("lora-init"));
  if (cfg.epochs == 0) return result;

  const MoEModel base = model;  // frozen snapshot for the rank loss
  LoRASet* lora = result.lora.enabled() ? &result.lora : nullptr;

  std::vector<ParamRef> refs = enumerate_params(result.model, lora);
  std::vector<Mat*> train_params;
  std::vector<std::string> train_names;
  for (ParamRef& r : refs) {
    if (r.trainable || cfg.train_all) {
      train_params.push_back(r.value);
      train_names.push_back(r.name);
    }
  }

  const long n = static_cast<long>(data.train.size());
  const long batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  AdamW opt{cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
            cfg.weight_decay,  0,              0};
  opt.total_steps = batches_per_epoch * cfg.epochs;
  opt.warmup_steps = std::lround(cfg.warmup_ratio * static_cast<Real>(opt.total_steps));
  opt.init(train_params);

  SeedStream order_rng = rng.substream("training-order");
  MoEModel last_good = result.model;
  LoRASet last_good_lora = result.lora;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t_start = std::chrono::steady_clock::now();
    std::vector<int> order = order_rng.permutation(static_cast<int>(n));
    LossBreakdown epoch_mean;
    long seen = 0;
    bool diverged = false;
    for (long b = 0; b < batches_per_epoch; ++b) {
      std::vector<Sequence> batch;
      for (long i = b * cfg.batch_size; i < std::min<long>(n, (b + 1) * cfg.batch_size); ++i) {
        batch.push_back(data.train[order[i]]);
      }
      GradientReport report;
      LossBreakdown loss;
      try {
        loss = backward(result.model, lora, &base, batch, cfg.weights, cfg.grad_mode,
                        cfg.lambda_balance, cfg.bptt_window, &report, cfg.train_all);
      } catch (const std::runtime_error&) {
        diverged = true;
        break;
      }
      epoch_mean.nll += loss.nll * static_cast<Real>(batch.size());
      epoch_mean.cache += loss.cache * static_cast<Real>(batch.size());
      epoch_mean.rank += loss.rank * static_cast<Real>(batch.size());
      seen += static_cast<long>(batch.size());

      std::vector<const Mat*> grads;
      std::unordered_map<std::string, const Mat*> by_name;
      for (std::size_t i = 0; i < report.names.size(); ++i) {
        by_name[report.names[i]] = &report.grads[i];
      }
      for (const std::string& name : train_names) grads.push_back(by_name.at(name));
      opt.step(train_params, grads);
      // Runaway parameters make the next loss evaluation non-finite; catch
      // the blow-up at the step that caused it.
      constexpr Real kParamGuard = 1e100;
      for (const Mat* p : train_params) {
        if (!p->allFinite() || p->cwiseAbs().maxCoeff() > kParamGuard) {
          diverged = true;
          break;
        }
      }
      if (diverged) break;
    }
    if (diverged) {
      result.model = last_good;
      result.lora = last_good_lora;
      result.history.diverged = true;
      break;
    }
    last_good = result.model;
    last_good_lora = result.lora;

    EpochMetrics em;
    em.epoch = epoch;
    em.l_nll = epoch_mean.nll / static_cast<Real>(seen);
    em.l_cs = epoch_mean.cache / static_cast<Real>(seen);
    em.l_rm = epoch_mean.rank / static_cast<Real>(seen);
    const MoEModel eval_model = lora ? merge_lora(result.model, result.lora) : result.model;
    em.transfers_per_layer = evaluate_transfers_per_layer(
        eval_model, data.val, cfg.weights.gamma, cfg.weights.cache_capacity);
    em.wall_time_s =
        std::chrono::duration<Real>(std::chrono::steady_clock::now() - t_start).count();
    result.history.epochs.push_back(em);
  }
  return result;
}

Real evaluate_nll(const MoEModel& model, std::span<const Sequence> seqs) {
  if (seqs.empty()) throw std::invalid_argument("evaluate_nll: empty slice");
  Real total = 0.0;
  for (const Sequence& s : seqs) {
    total += nll_loss(model_forward(model, s.tokens).logits, s.targets);
  }
  return total / static_cast<Real>(seqs.size());
}

Real evaluate_transfers_per_layer(const MoEModel& model, std::span<const Sequence> seqs,
                                  Real gamma, int capacity) {
  if (seqs.empty()) return 0.0;
  Real total = 0.0;
  for (const Sequence& s : seqs) {
    const RoutingTrace trace = model_forward(model, s.tokens).trace;
    total += hard_miss_count(trace, gamma, capacity).transfers_per_layer();
  }
  return total / static_cast<Real>(seqs.size());
}

}  // namespace moecache
