// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "moecache/dataset.hpp"
#include "moecache/io.hpp"
#include "moecache/offload_sim.hpp"
#include "moecache/predictor.hpp"
#include "moecache/trainer.hpp"

namespace moecache {

struct SimulateConfig {
  std::string policy = "lfu";  // lru | lfu | gamma
  Real gamma = 0.9;            // gamma policy decay
  int capacity = 4;
  Real capacity_multiplier = 1.0;  // quantized residency modeled as extra capacity
  bool prefetch = true;
  int prompt_len = 6;
  int max_tokens = 24;
  int gen_len = 24;     // predictor target generation length
  int num_prompts = 50; // capped by the validation split
};

struct SweepConfig {
  std::vector<Real> lambda_cs;
  std::vector<Real> lambda_rm;
  std::vector<std::string> policies;
  std::vector<Real> gammas;
  std::vector<int> capacities;
  std::vector<int> prefetch;  // 0 / 1
};

struct ExperimentConfig {
  int version = 1;
  ModelConfig model;
  SyntheticDatasetSpec data;
  TrainConfig train;
  PredictorConfig predictor;
  EmbeddingConfig embedding;
  SimulateConfig simulate;
  SweepConfig sweep;
  LatencyModel latency;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
};

/// Thrown on malformed configs; the message names the offending field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ExperimentConfig parse_config_file(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text);

EvictionPolicy policy_from_name(const std::string& name, Real gamma);

/// Effective cache capacity after the quantization multiplier.
int effective_capacity(int capacity, Real multiplier, int experts);

struct SimulationArtifacts {
  std::vector<DecodeReport> reports;
  SweepRow row;
  Real mean_hit_rate = 0.0;
};

/// Shared by `simulate` and each `sweep` grid point: trains the activation
/// predictor on the train split, decodes held-out prompts, aggregates.
SimulationArtifacts run_simulation(const MoEModel& model, const Dataset& data,
                                   const ExperimentConfig& cfg, const std::string& policy_name,
                                   Real policy_gamma, int capacity, bool prefetch);

int cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir);
int cmd_train(const ExperimentConfig& cfg, const std::string& out_dir,
              const std::string& init_checkpoint);
int cmd_simulate(const ExperimentConfig& cfg, const std::string& out_dir,
                 const std::string& checkpoint);
int cmd_sweep(const ExperimentConfig& cfg, const std::string& out_dir,
              const std::string& init_checkpoint, int workers);
int cmd_report(const std::string& dir);

}  // namespace moecache
