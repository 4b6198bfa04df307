// SPDX-License-Identifier: Apache-2.0
#include "moecache/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace moecache {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const json* find_path(const json& root, const std::string& dotted) {
  const json* cur = &root;
  std::istringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!cur->is_object() || !cur->contains(part)) return nullptr;
    cur = &(*cur)[part];
  }
  return cur;
}

template <typename T>
T require(const json& root, const std::string& dotted) {
  const json* v = find_path(root, dotted);
  if (v == nullptr) throw ConfigError("missing config field: " + dotted);
  try {
    return v->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("malformed config field: " + dotted);
  }
}

template <typename T>
T get_or(const json& root, const std::string& dotted, T fallback) {
  const json* v = find_path(root, dotted);
  if (v == nullptr) return fallback;
  try {
    return v->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("malformed config field: " + dotted);
  }
}

std::vector<std::vector<int>> eval_prompts(const Dataset& data, int prompt_len,
                                           int num_prompts) {
  // Round-robin over topics from the validation split so both are covered.
  std::vector<std::vector<const Sequence*>> by_topic(
      static_cast<std::size_t>(std::max(1, data.topics)));
  for (const Sequence& s : data.val) {
    by_topic[static_cast<std::size_t>(std::max(0, s.topic))].push_back(&s);
  }
  std::vector<std::vector<int>> prompts;
  std::size_t idx = 0;
  while (static_cast<int>(prompts.size()) < num_prompts) {
    bool any = false;
    for (auto& bucket : by_topic) {
      if (idx < bucket.size() && static_cast<int>(prompts.size()) < num_prompts) {
        const auto& tokens = bucket[idx]->tokens;
        const int len = std::min<int>(prompt_len, static_cast<int>(tokens.size()));
        prompts.emplace_back(tokens.begin(), tokens.begin() + len);
        any = true;
      }
    }
    if (!any) break;
    ++idx;
  }
  return prompts;
}

}  // namespace

EvictionPolicy policy_from_name(const std::string& name, Real gamma) {
  if (name == "lru") return EvictionPolicy::lru();
  if (name == "lfu") return EvictionPolicy::lfu();
  if (name == "gamma") return EvictionPolicy::gamma_cache(gamma);
  throw ConfigError("unknown eviction policy: " + name);
}

int effective_capacity(int capacity, Real multiplier, int experts) {
  if (multiplier <= 0.0) throw ConfigError("capacity multiplier must be positive");
  const int c = static_cast<int>(std::lround(static_cast<Real>(capacity) * multiplier));
  return std::clamp(c, 1, experts);
}

ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  cfg.version = require<int>(j, "version");
  if (cfg.version != 1) throw ConfigError("unsupported config version");

  cfg.model.layers = require<int>(j, "model.layers");
  cfg.model.experts = require<int>(j, "model.experts");
  cfg.model.top_k = require<int>(j, "model.top_k");
  cfg.model.hidden_dim = require<int>(j, "model.hidden_dim");
  cfg.model.ff_dim = require<int>(j, "model.ff_dim");
  cfg.model.vocab = require<int>(j, "model.vocab");
  cfg.model.max_seq_len = get_or<int>(j, "model.max_seq_len", 64);
  cfg.model.activation =
      get_or<std::string>(j, "model.activation", "silu") == "relu" ? Activation::kReLU
                                                                   : Activation::kSiLU;
  cfg.model.routing = get_or<std::string>(j, "model.routing", "hard") == "soft"
                          ? RoutingMode::kSoft
                          : RoutingMode::kHard;
  cfg.model.validate();

  cfg.seed = get_or<std::uint64_t>(j, "seed", 0);
  cfg.out_dir = get_or<std::string>(j, "out", "out");

  cfg.data.topics = require<int>(j, "data.topics");
  cfg.data.vocab = get_or<int>(j, "data.vocab", cfg.model.vocab);
  cfg.data.sequences_per_topic = require<int>(j, "data.sequences_per_topic");
  cfg.data.length = require<int>(j, "data.length");
  cfg.data.concentration = get_or<Real>(j, "data.concentration", 8.0);
  cfg.data.val_fraction = get_or<Real>(j, "data.val_fraction", 0.2);
  cfg.data.seed = get_or<std::uint64_t>(j, "data.seed", cfg.seed);
  if (cfg.data.vocab != cfg.model.vocab) {
    throw ConfigError("data.vocab must match model.vocab");
  }
  if (cfg.data.length > cfg.model.max_seq_len) {
    throw ConfigError("data.length exceeds model.max_seq_len");
  }

  cfg.train.epochs = require<int>(j, "train.epochs");
  cfg.train.learning_rate = require<Real>(j, "train.learning_rate");
  cfg.train.batch_size = get_or<int>(j, "train.batch_size", 8);
  cfg.train.weights.lambda_cs = get_or<Real>(j, "train.lambda_cs", 0.5);
  cfg.train.weights.lambda_rm = get_or<Real>(j, "train.lambda_rm", 0.1);
  cfg.train.weights.rho = get_or<Real>(j, "train.rho", 0.1);
  cfg.train.weights.gamma = get_or<Real>(j, "train.gamma", 0.9);
  cfg.train.weights.cache_capacity =
      get_or<int>(j, "train.cache_capacity", std::max(1, cfg.model.experts / 4));
  cfg.train.grad_mode = get_or<std::string>(j, "train.grad_mode", "soft_route") ==
                                "straight_through"
                            ? GradMode::kStraightThrough
                            : GradMode::kSoftRoute;
  cfg.train.lora_rank = get_or<int>(j, "train.lora_rank", 0);
  cfg.train.lambda_balance = get_or<Real>(j, "train.lambda_balance", 0.0);
  cfg.train.warmup_ratio = get_or<Real>(j, "train.warmup_ratio", 0.03);
  cfg.train.weight_decay = get_or<Real>(j, "train.weight_decay", 0.0);
  cfg.train.bptt_window = get_or<int>(j, "train.bptt_window", 64);
  cfg.train.seed = get_or<std::uint64_t>(j, "train.seed", cfg.seed);
  cfg.train.validate();

  cfg.embedding.dim = get_or<int>(j, "predictor.embed_dim", 64);
  cfg.embedding.damping = get_or<Real>(j, "predictor.damping", 0.125);
  cfg.predictor.input_dim = cfg.embedding.dim;
  cfg.predictor.hidden_dim = get_or<int>(j, "predictor.hidden_dim", 128);
  cfg.predictor.learning_rate = get_or<Real>(j, "predictor.learning_rate", 2e-4);
  cfg.predictor.epochs = get_or<int>(j, "predictor.epochs", 10);
  cfg.predictor.batch_size = get_or<int>(j, "predictor.batch_size", 16);
  cfg.predictor.momentum = get_or<Real>(j, "predictor.momentum", 0.9);
  cfg.predictor.seed = get_or<std::uint64_t>(j, "predictor.seed", cfg.seed);

  cfg.simulate.policy = get_or<std::string>(j, "simulate.policy", "lfu");
  cfg.simulate.gamma = get_or<Real>(j, "simulate.gamma", 0.9);
  cfg.simulate.capacity =
      get_or<int>(j, "simulate.capacity", std::max(1, cfg.model.experts / 4));
  cfg.simulate.capacity_multiplier = get_or<Real>(j, "simulate.capacity_multiplier", 1.0);
  cfg.simulate.prefetch = get_or<bool>(j, "simulate.prefetch", true);
  cfg.simulate.prompt_len = get_or<int>(j, "simulate.prompt_len", 6);
  cfg.simulate.max_tokens = get_or<int>(j, "simulate.max_tokens", 24);
  cfg.simulate.gen_len = get_or<int>(j, "simulate.gen_len", cfg.simulate.max_tokens);
  cfg.simulate.num_prompts = get_or<int>(j, "simulate.num_prompts", 50);
  policy_from_name(cfg.simulate.policy, cfg.simulate.gamma);

  cfg.sweep.lambda_cs = get_or<std::vector<Real>>(j, "sweep.lambda_cs", {});
  cfg.sweep.lambda_rm = get_or<std::vector<Real>>(j, "sweep.lambda_rm", {});
  cfg.sweep.policies = get_or<std::vector<std::string>>(j, "sweep.policies", {});
  cfg.sweep.gammas = get_or<std::vector<Real>>(j, "sweep.gammas", {});
  cfg.sweep.capacities = get_or<std::vector<int>>(j, "sweep.capacities", {});
  cfg.sweep.prefetch = get_or<std::vector<int>>(j, "sweep.prefetch", {1});

  cfg.latency.compute_per_token_s = get_or<Real>(j, "latency.compute_per_token_s", 2e-3);
  cfg.latency.transfer_per_expert_s =
      get_or<Real>(j, "latency.transfer_per_expert_s", 5.5e-3);
  cfg.latency.prefetch_s = get_or<Real>(j, "latency.prefetch_s", 0.05);
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

SimulationArtifacts run_simulation(const MoEModel& model, const Dataset& data,
                                   const ExperimentConfig& cfg, const std::string& policy_name,
                                   Real policy_gamma, int capacity, bool prefetch) {
  const EvictionPolicy policy = policy_from_name(policy_name, policy_gamma);
  const int cap = effective_capacity(capacity, cfg.simulate.capacity_multiplier,
                                     model.config.experts);

  std::vector<std::vector<int>> prompts =
      eval_prompts(data, cfg.simulate.prompt_len, cfg.simulate.num_prompts);
  if (prompts.empty()) throw std::runtime_error("run_simulation: no evaluation prompts");

  PredictorMLP mlp;
  if (prefetch) {
    std::vector<std::vector<int>> train_prompts;
    for (const Sequence& s : data.train) {
      const int len = std::min<int>(cfg.simulate.prompt_len, static_cast<int>(s.tokens.size()));
      train_prompts.emplace_back(s.tokens.begin(), s.tokens.begin() + len);
    }
    const auto examples = build_targets(model, train_prompts, cfg.simulate.gen_len,
                                        cfg.embedding);
    mlp = train_predictor(examples, cfg.predictor, model.config.layers, model.config.experts);
  }

  SimulationArtifacts arts;
  Real transfers = 0.0, tps = 0.0, hit = 0.0;
  for (const auto& prompt : prompts) {
    PrefetchPlan plan;
    const PrefetchPlan* plan_ptr = nullptr;
    if (prefetch) {
      plan = predict_prefetch(mlp, embed_prompt(prompt, cfg.embedding), cap);
      plan_ptr = &plan;
    }
    DecodeReport report = simulate_decode(model, prompt, policy, cap, plan_ptr, cfg.latency,
                                          cfg.simulate.max_tokens);
    transfers += report.transfers_per_layer();
    tps += report.tokens_per_s;
    hit += report.hit_rate;
    arts.reports.push_back(std::move(report));
  }
  const Real inv = 1.0 / static_cast<Real>(prompts.size());
  arts.row = SweepRow{cfg.train.weights.lambda_cs,
                      cfg.train.weights.lambda_rm,
                      policy_name,
                      policy_gamma,
                      cap,
                      prefetch,
                      transfers * inv,
                      tps * inv};
  arts.mean_hit_rate = hit * inv;
  return arts;
}

int cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const Dataset data = generate_dataset(cfg.data);
  save_dataset_jsonl(data, out_dir + "/dataset.jsonl");
  std::cout << "wrote " << data.train.size() << " train / " << data.val.size()
            << " val sequences to " << out_dir << "/dataset.jsonl\n";
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& out_dir,
              const std::string& init_checkpoint) {
  fs::create_directories(out_dir);
  const Dataset data = generate_dataset(cfg.data);
  MoEModel model = init_checkpoint.empty()
                       ? MoEModel::random_init(cfg.model, SeedStream(cfg.seed, "model-init"))
                       : load_checkpoint(init_checkpoint);
  TrainResult result = train(model, data, cfg.train);
  const MoEModel final_model =
      result.lora.enabled() ? merge_lora(result.model, result.lora) : result.model;
  save_checkpoint(final_model, out_dir + "/checkpoint.json");
  save_metrics_csv(result.history, out_dir + "/metrics.csv");
  if (result.history.diverged) {
    std::cerr << "training diverged; checkpoint holds the last finished epoch\n";
    return 3;
  }
  if (!result.history.epochs.empty()) {
    const EpochMetrics& last = result.history.epochs.back();
    std::cout << "epoch " << last.epoch << ": l_nll=" << format_real(last.l_nll)
              << " l_cs=" << format_real(last.l_cs) << " l_rm=" << format_real(last.l_rm)
              << " transfers/layer=" << format_real(last.transfers_per_layer) << "\n";
  }
  return 0;
}

int cmd_simulate(const ExperimentConfig& cfg, const std::string& out_dir,
                 const std::string& checkpoint) {
  fs::create_directories(out_dir);
  const MoEModel model = load_checkpoint(checkpoint);
  const Dataset data = generate_dataset(cfg.data);
  SimulationArtifacts arts =
      run_simulation(model, data, cfg, cfg.simulate.policy, cfg.simulate.gamma,
                     cfg.simulate.capacity, cfg.simulate.prefetch);

  const std::string traces_path = out_dir + "/traces.jsonl";
  std::ofstream(traces_path, std::ios::trunc).close();
  json decode_list = json::array();
  for (const DecodeReport& r : arts.reports) {
    append_trace_jsonl(r.trace, traces_path);
    decode_list.push_back({{"generated", r.generated},
                           {"misses_per_layer", r.misses_per_layer},
                           {"evictions_per_layer", r.evictions_per_layer},
                           {"total_transfers", r.total_transfers},
                           {"decode_seconds", r.decode_seconds},
                           {"tokens_per_s", r.tokens_per_s},
                           {"hit_rate", r.hit_rate}});
  }
  json report;
  report["policy"] = arts.row.policy;
  report["gamma"] = arts.row.gamma;
  report["capacity"] = arts.row.capacity;
  report["prefetch"] = arts.row.prefetch;
  report["transfers_per_layer"] = arts.row.transfers_per_layer;
  report["tokens_per_s_est"] = arts.row.tokens_per_s_est;
  report["mean_hit_rate"] = arts.mean_hit_rate;
  report["decodes"] = decode_list;
  std::ofstream out(out_dir + "/report.json", std::ios::trunc);
  out << report.dump(2) << "\n";
  save_sweep_csv({arts.row}, out_dir + "/sweep.csv");
  std::cout << "policy=" << arts.row.policy
            << " transfers/layer=" << format_real(arts.row.transfers_per_layer)
            << " tokens/s=" << format_real(arts.row.tokens_per_s_est)
            << " hit_rate=" << format_real(arts.mean_hit_rate) << "\n";
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, const std::string& out_dir,
              const std::string& init_checkpoint, int workers) {
  if (cfg.sweep.lambda_cs.empty() || cfg.sweep.lambda_rm.empty()) {
    throw ConfigError("empty sweep grid: sweep.lambda_cs / sweep.lambda_rm");
  }
  if (cfg.sweep.policies.empty() || cfg.sweep.gammas.empty() || cfg.sweep.capacities.empty()) {
    throw ConfigError("empty sweep grid: sweep.policies / sweep.gammas / sweep.capacities");
  }
  fs::create_directories(out_dir);
  const Dataset data = generate_dataset(cfg.data);
  const MoEModel base =
      init_checkpoint.empty()
          ? MoEModel::random_init(cfg.model, SeedStream(cfg.seed, "model-init"))
          : load_checkpoint(init_checkpoint);

  // Training grid, with the lambda=0 baseline always present.
  std::vector<std::pair<Real, Real>> points;
  for (Real lcs : cfg.sweep.lambda_cs) {
    for (Real lrm : cfg.sweep.lambda_rm) points.emplace_back(lcs, lrm);
  }
  if (std::find(points.begin(), points.end(), std::make_pair(0.0, 0.0)) == points.end()) {
    points.emplace_back(0.0, 0.0);
  }

  std::vector<std::vector<SweepRow>> rows_per_point(points.size());
  std::vector<std::string> errors(points.size());
  auto run_point = [&](std::size_t idx) {
    try {
      const auto [lcs, lrm] = points[idx];
      ExperimentConfig point_cfg = cfg;
      point_cfg.train.weights.lambda_cs = lcs;
      point_cfg.train.weights.lambda_rm = lrm;
      TrainResult result = train(base, data, point_cfg.train);
      const MoEModel tuned =
          result.lora.enabled() ? merge_lora(result.model, result.lora) : result.model;
      for (const std::string& pol : cfg.sweep.policies) {
        for (Real g : cfg.sweep.gammas) {
          for (int c : cfg.sweep.capacities) {
            for (int pf : cfg.sweep.prefetch) {
              SimulationArtifacts arts =
                  run_simulation(tuned, data, point_cfg, pol, g, c, pf != 0);
              rows_per_point[idx].push_back(arts.row);
            }
          }
        }
      }
      std::ostringstream dir;
      dir << out_dir << "/sweep_lcs" << format_real(lcs) << "_lrm" << format_real(lrm);
      fs::create_directories(dir.str());
      save_sweep_csv(rows_per_point[idx], dir.str() + "/sweep.csv");
      save_checkpoint(tuned, dir.str() + "/checkpoint.json");
      save_metrics_csv(result.history, dir.str() + "/metrics.csv");
    } catch (const std::exception& e) {
      errors[idx] = e.what();
    }
  };

  workers = std::max(1, workers);
  std::size_t next = 0;
  while (next < points.size()) {
    std::vector<std::thread> pool;
    const std::size_t stop = std::min(points.size(), next + static_cast<std::size_t>(workers));
    for (std::size_t i = next; i < stop; ++i) pool.emplace_back(run_point, i);
    for (auto& th : pool) th.join();
    next = stop;
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!errors[i].empty()) {
      std::cerr << "sweep point failed: " << errors[i] << "\n";
      return 4;
    }
  }

  std::vector<SweepRow> all;
  for (const auto& rows : rows_per_point) all.insert(all.end(), rows.begin(), rows.end());
  save_grid_csv(all, out_dir + "/grid.csv");
  std::cout << "wrote " << all.size() << " grid rows to " << out_dir << "/grid.csv\n";
  return 0;
}

int cmd_report(const std::string& dir) {
  bool found = false;
  if (fs::exists(dir + "/grid.csv")) {
    std::ifstream in(dir + "/grid.csv");
    std::cout << in.rdbuf();
    found = true;
  }
  if (fs::exists(dir + "/report.json")) {
    const json j = json::parse(std::ifstream(dir + "/report.json"));
    std::cout << "policy=" << j.at("policy").get<std::string>()
              << " transfers_per_layer=" << j.at("transfers_per_layer").get<Real>()
              << " tokens_per_s_est=" << j.at("tokens_per_s_est").get<Real>()
              << " mean_hit_rate=" << j.at("mean_hit_rate").get<Real>() << "\n";
    found = true;
  }
  if (fs::exists(dir + "/metrics.csv")) {
    std::ifstream in(dir + "/metrics.csv");
    std::string line, last, header;
    std::getline(in, header);
    while (std::getline(in, line)) {
      if (!line.empty()) last = line;
    }
    std::cout << header << "\n" << last << "\n";
    found = true;
  }
  if (!found) {
    std::cerr << "no run outputs found in " << dir << "\n";
    return 2;
  }
  return 0;
}

}  // namespace moecache
