// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moecache/autodiff.hpp"
#include "moecache/dataset.hpp"
#include "moecache/losses.hpp"
#include "moecache/moe.hpp"

namespace moecache {

/// Gradient path through the Top-K selection inside the cache loss.
/// kSoftRoute drives the cache with K * p (fully differentiable); the layer
/// output keeps its hard Top-K mask as a constant in both modes.
/// kStraightThrough drives the cache with binary requests whose backward pass
/// is the identity into p.
enum class GradMode { kSoftRoute, kStraightThrough };

struct LoRAAdapter {
  Mat a;  // rank x in_dim
  Mat b;  // out_dim x rank, zero-initialized
};

/// effective weights = w + b * a; the base matrix is untouched.
Mat apply_lora(const Mat& w, const LoRAAdapter& adapter);

struct ExpertAdapters {
  LoRAAdapter up;
  LoRAAdapter down;
};

struct LoRASet {
  int rank = 0;
  std::vector<std::vector<ExpertAdapters>> layers;  // [layer][expert]

  bool enabled() const { return rank > 0; }
  static LoRASet make(const ModelConfig& cfg, int rank, SeedStream rng);
};

/// Bake adapters into expert up/down projections.
MoEModel merge_lora(const MoEModel& model, const LoRASet& lora);

struct TrainConfig {
  Real learning_rate = 1e-3;  // toy-scale default
  int epochs = 1;
  int batch_size = 8;
  LossWeights weights;
  GradMode grad_mode = GradMode::kSoftRoute;
  int lora_rank = 0;
  Real lambda_balance = 0.0;  // spread pressure, used when pretraining the base
  bool train_all = false;     // pretraining mode: update every parameter
  Real warmup_ratio = 0.03;
  Real weight_decay = 0.0;
  Real adam_beta1 = 0.9;
  Real adam_beta2 = 0.999;
  Real adam_eps = 1e-8;
  int bptt_window = 64;  // cache recursion detaches beyond this many steps
  std::uint64_t seed = 0;

  void validate() const;
};

struct LossBreakdown {
  Real nll = 0.0;
  Real cache = 0.0;
  Real rank = 0.0;
  Real balance = 0.0;
  Real total = 0.0;
};

struct GradientReport {
  std::vector<std::string> names;
  std::vector<Mat> grads;  // one per parameter, frozen ones exactly zero
  Real global_norm = 0.0;

  const Mat& find(const std::string& name) const;
};

struct ParamRef {
  std::string name;
  Mat* value = nullptr;
  bool trainable = false;
};

/// Fixed-order enumeration of every model (and adapter) parameter. The
/// trainable set is routers + gate projections, plus adapters when present.
std::vector<ParamRef> enumerate_params(MoEModel& model, LoRASet* lora);

/// Full objective value for one sequence; the exact function backward()
/// differentiates.
Real objective_value(const MoEModel& model, const LoRASet* lora, const MoEModel* base,
                     const Sequence& seq, const LossWeights& w, GradMode mode,
                     Real lambda_balance, int bptt_window, bool train_all = false);

/// Mean loss and gradients over a batch. `base` supplies the frozen router
/// distributions for the rank matching term; required when lambda_rm > 0.
LossBreakdown backward(const MoEModel& model, const LoRASet* lora, const MoEModel* base,
                       std::span<const Sequence> batch, const LossWeights& w, GradMode mode,
                       Real lambda_balance, int bptt_window, GradientReport* report,
                       bool train_all = false);

/// Central differences (f(x+eps) - f(x-eps)) / 2eps per coordinate.
std::vector<Mat> finite_difference_grad(
    const std::function<Real(const std::vector<Mat>&)>& loss_fn, const std::vector<Mat>& params,
    Real epsilon);

struct EpochMetrics {
  int epoch = 0;
  Real l_nll = 0.0;
  Real l_cs = 0.0;
  Real l_rm = 0.0;
  Real transfers_per_layer = 0.0;  // validation slice, hard gamma-cache
  Real wall_time_s = 0.0;
};

struct MetricsHistory {
  std::vector<EpochMetrics> epochs;
  bool diverged = false;
};

struct TrainResult {
  MoEModel model;
  LoRASet lora;
  MetricsHistory history;
};

TrainResult train(const MoEModel& model, const Dataset& data, const TrainConfig& cfg);

Real evaluate_nll(const MoEModel& model, std::span<const Sequence> seqs);

/// Mean hard gamma-cache transfers per layer per sequence.
Real evaluate_transfers_per_layer(const MoEModel& model, std::span<const Sequence> seqs,
                                  Real gamma, int capacity);

}  // namespace moecache
