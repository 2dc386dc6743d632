#pragma once

// End-to-end driver: meta-train -> collect -> train drift nets -> tune ->
// evaluate -> profile -> ablate -> frontier, with content-addressed caching.
//
// Every stage has a key hashed from its own config section and the keys of
// the stages it reads. Artifacts live in cache_dir under that key, so a rerun
// with an unchanged config loads everything, and a changed seed only rebuilds
// the stages downstream of it.
//
// Reports written to out_dir (CSV for plotting, JSON Lines with the config
// fingerprint on every record, summary.txt for reading):
//
//   eval.csv           variant, group, domain, protocol, n, mean_acc, ci95
//   eval_episodes.csv  variant, group, domain, protocol, index, accuracy, final_rel_loss, diverged
//   loss_curves.csv    variant, group, index, step, rel_loss
//   loss_summary.csv   variant, group, n, frac_below_one, mean_final
//   tuning.csv         group, variant, value, mean_accuracy, chosen
//   drift_training.csv objective, step, train_loss, val_loss
//   cost.csv           variant, steps, adapt_ms, infer_ms, forward, backward, encode, graph_nodes, peak_bytes
//   ablation.csv       axis, level, group, n, mean_acc, ci95, eta
//   frontier.csv       variant, steps, mean_acc, ci95, adapt_ms
//
// Wall-clock columns (adapt_ms, infer_ms) are the only run-dependent values.

#include <iosfwd>
#include <string>
#include <vector>

#include "gflow/harness/config.hpp"
#include "gflow/harness/evaluate.hpp"

namespace gflow::harness {

struct StageLog {
  std::string name;
  std::string key;
  bool cache_hit = false;
  double seconds = 0;
};

struct PipelineResult {
  std::string fingerprint;
  std::string out_dir;
  std::vector<StageLog> stages;
};

/// Throws std::runtime_error "stage '<name>' failed: <cause>" on failure.
PipelineResult run_pipeline(const PipelineConfig& cfg, std::ostream* log = nullptr);

struct AblationRow {
  std::string axis;
  int level = 0;
  std::string group;
  MeanCI acc;
  double eta = 0;
};

/// Retrains the cubic drift net on the subset of `train` selected by each
/// level of `axis` ("domains": first k base domains, "tasks": k episodes per
/// domain, "inits": k starts per episode), re-tunes its step size on `val`
/// and evaluates it on `test`. `full_net`, when given, is reused for a level
/// that selects the whole store.
std::vector<AblationRow> ablation_sweep(const std::string& axis, const std::vector<int>& levels, const Artifacts& art,
                                        const TrajectoryStore& train, const TrajectoryStore& val_store,
                                        const PipelineConfig& cfg, const std::vector<EvalEpisode>& val,
                                        const std::vector<EvalEpisode>& test, const DriftNet* full_net = nullptr,
                                        std::ostream* log = nullptr);

struct FrontierRow {
  std::string variant;
  int steps = 0;
  MeanCI acc;
  double adapt_ms = 0;  // mean per episode
};

/// Accuracy versus adaptation time at each step count; step sizes and the
/// fine-tuning learning rate are re-tuned per level.
std::vector<FrontierRow> steps_frontier(const std::vector<Variant>& variants, const std::vector<int>& levels,
                                        const Artifacts& art, const PipelineConfig& cfg,
                                        const std::vector<EvalEpisode>& val, const std::vector<EvalEpisode>& test);

std::string frontier_csv(const std::vector<FrontierRow>& rows);

/// Reads a CSV written by the pipeline into header-keyed rows.
std::vector<std::map<std::string, std::string>> read_csv(const std::string& path);

}  // namespace gflow::harness
