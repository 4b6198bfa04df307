// SPDX-License-Identifier: Apache-2.0
//
// moecache: fine-tune a toy MoE for per-sequence routing locality and
// measure expert-cache transfers under trace-driven offloaded decoding.
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "moecache/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"MoE routing-locality fine-tuning and expert-cache offload simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string init_checkpoint;
  long long seed = -1;
  int workers = 1;

  auto add_common = [&](CLI::App* sub, bool needs_init) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory (overrides config)");
    sub->add_option("--seed", seed, "master seed (overrides config)");
    if (needs_init) sub->add_option("--init", init_checkpoint, "initial model checkpoint");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, false);
  CLI::App* trn = app.add_subcommand("train", "train or fine-tune a model");
  add_common(trn, true);
  CLI::App* sim = app.add_subcommand("simulate", "offloaded decode over held-out prompts");
  add_common(sim, true);
  CLI::App* swp = app.add_subcommand("sweep", "cross-product of training and cache grids");
  add_common(swp, true);
  swp->add_option("--workers", workers, "parallel sweep points");
  CLI::App* rep = app.add_subcommand("report", "summarize a run directory");
  std::string report_dir;
  rep->add_option("--out", report_dir, "run directory to summarize")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (rep->parsed()) return moecache::cmd_report(report_dir);

    moecache::ExperimentConfig cfg = moecache::parse_config_file(config_path);
    if (seed >= 0) {
      cfg.seed = static_cast<std::uint64_t>(seed);
      cfg.data.seed = cfg.seed;
      cfg.train.seed = cfg.seed;
      cfg.predictor.seed = cfg.seed;
    }
    const std::string out = out_dir.empty() ? cfg.out_dir : out_dir;

    if (gen->parsed()) return moecache::cmd_gen_data(cfg, out);
    if (trn->parsed()) return moecache::cmd_train(cfg, out, init_checkpoint);
    if (sim->parsed()) {
      if (init_checkpoint.empty()) {
        std::cerr << "simulate: --init checkpoint is required\n";
        return 2;
      }
      return moecache::cmd_simulate(cfg, out, init_checkpoint);
    }
    if (swp->parsed()) return moecache::cmd_sweep(cfg, out, init_checkpoint, workers);
  } catch (const moecache::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
