// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "moecache/dataset.hpp"
#include "moecache/moe.hpp"
#include "moecache/offload_sim.hpp"
#include "moecache/predictor.hpp"
#include "moecache/trainer.hpp"

namespace moecache {

// Versioned JSON checkpoint: config plus flat row-major arrays per parameter.
void save_checkpoint(const MoEModel& model, const std::string& path);
MoEModel load_checkpoint(const std::string& path);

void save_predictor(const PredictorMLP& mlp, int input_dim, const std::string& path);
PredictorMLP load_predictor(const std::string& path);

// JSONL, one record per sequence with L x T x E probability arrays and
// request index lists.
void append_trace_jsonl(const RoutingTrace& trace, const std::string& path);
std::vector<RoutingTrace> load_traces_jsonl(const std::string& path);

void save_dataset_jsonl(const Dataset& data, const std::string& path);

// epoch,l_nll,l_cs,l_rm,transfers_per_layer,wall_time_s
void save_metrics_csv(const MetricsHistory& history, const std::string& path);

struct SweepRow {
  Real lambda_cs = 0.0;
  Real lambda_rm = 0.0;
  std::string policy;
  Real gamma = 0.0;
  int capacity = 0;
  bool prefetch = false;
  Real transfers_per_layer = 0.0;
  Real tokens_per_s_est = 0.0;
};

/// policy,gamma,C,prefetch,transfers_per_layer,tokens_per_s_est
void save_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path);
/// Same rows with the training-grid lambdas prepended.
void save_grid_csv(const std::vector<SweepRow>& rows, const std::string& path);

std::string format_real(Real v);

}  // namespace moecache
