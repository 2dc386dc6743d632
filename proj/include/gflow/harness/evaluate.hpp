#pragma once

// Evaluation of adaptation variants on labelled episode sets, plus the
// report types built from per-episode results.

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gflow/adapt.hpp"
#include "gflow/drift_net.hpp"
#include "gflow/episodes.hpp"
#include "gflow/target_model.hpp"

namespace gflow::harness {

enum class Variant { kDirect, kLinear, kCubic, kHypernet, kBiasTune };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
const std::vector<Variant>& all_variants();
/// Drift objective a variant's network is trained with; throws for direct
/// and bias-tune.
FlowObjective objective_of(Variant v);
bool uses_drift_net(Variant v);

struct MeanCI {
  double mean = 0;
  double ci95 = 0;  // half-width, normal approximation over items
  int n = 0;
};
MeanCI mean_ci(std::span<const double> xs);

/// Runs fn(i) for i in [0, n) on `threads` workers (0: hardware concurrency).
/// Results must be written to per-index slots; the first exception is
/// rethrown after all workers stop.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

struct EvalEpisode {
  Episode episode;
  std::string group;     // "base" or "ood"
  std::string protocol;  // protocol name
};

/// `per_domain` episodes of every protocol for every domain; protocol j uses
/// stream derive_seed(seed, {j}).
std::vector<EvalEpisode> make_eval_set(const std::vector<DomainSpec>& domains, const std::vector<Protocol>& protocols,
                                       Split split, int per_domain, std::uint64_t seed);
std::vector<Episode> episodes_of(const std::vector<EvalEpisode>& set);
std::string group_of(const DomainSpec& d);

struct Artifacts {
  Backbone backbone;
  BiasSelection selection;
  std::map<Variant, DriftNet> nets;

  /// Throws ConfigError naming the variant if its network is missing.
  const DriftNet& net(Variant v) const;
};

struct GroupTuning {
  std::map<Variant, double> eta;  // Euler step per drift variant
  double lr = 0;                  // bias-tune learning rate
};

struct AdaptSettings {
  int solver_steps = 10;
  int finetune_steps = 50;
  std::map<std::string, GroupTuning> tuning;  // by group
  bool record_loss = true;
};

struct EpisodeResult {
  int domain = 0;
  std::string group;
  std::string protocol;
  double accuracy = 0;
  std::vector<double> losses;  // support loss per step, NaN when not recorded
  double adapt_ms = 0;
  bool diverged = false;
};

/// Adapts one episode with `variant` and scores its query set.
EpisodeResult run_episode(Variant variant, const EvalEpisode& ep, const Artifacts& art, const AdaptSettings& s);

std::vector<EpisodeResult> evaluate(Variant variant, const std::vector<EvalEpisode>& episodes, const Artifacts& art,
                                    const AdaptSettings& s, int threads = 0);

struct EvalRow {
  std::string variant;
  std::string group;     // "base", "ood" or "all"
  int domain = -1;       // -1 for pooled rows
  std::string protocol;  // protocol name or "all"
  MeanCI acc;
};

struct EvalReport {
  std::string fingerprint;
  std::vector<EvalRow> rows;

  /// Row for (variant, group) pooled over domains and protocols.
  const EvalRow& pooled(const std::string& variant, const std::string& group) const;
};

/// Per-domain rows, per-group rows and per-group-per-protocol rows.
EvalReport summarize(const std::map<Variant, std::vector<EpisodeResult>>& results, const std::string& fingerprint);

struct LossSummary {
  std::string variant;
  std::string group;
  int n = 0;
  double frac_below_one = 0;  // final L / L0 < 1
  double mean_final = 0;
};

/// Relative curve L_k / L_0; a diverged run ends at 1 (its reset value).
std::vector<double> relative_curve(const EpisodeResult& r);
std::vector<LossSummary> loss_summary(const std::map<Variant, std::vector<EpisodeResult>>& results);

struct CostRow {
  std::string variant;
  int steps = 0;
  double adapt_ms = 0;  // median over repeats of the per-episode mean
  double infer_ms = 0;
  double forward = 0;   // per episode
  double backward = 0;
  double encode = 0;
  double graph_nodes = 0;
  double peak_bytes = 0;
};

/// Times adaptation and query inference separately; one warm-up pass is
/// discarded before `repeats` timed passes. Single-threaded.
std::vector<CostRow> profile_cost(const std::vector<Variant>& variants, const std::vector<EvalEpisode>& episodes,
                                  const Artifacts& art, const AdaptSettings& s, int repeats);

struct TuningTables {
  std::map<std::string, std::map<Variant, SearchResult>> eta;  // by group
  std::map<std::string, SearchResult> lr;                       // by group
};

/// Step size per drift variant and learning rate for bias-tune, chosen per
/// group on validation episodes.
AdaptSettings tune(const Artifacts& art, const std::vector<EvalEpisode>& val, int solver_steps, int finetune_steps,
                   const std::vector<double>& eta_multipliers, const std::vector<double>& lr_grid,
                   const std::vector<Variant>& variants, TuningTables* tables = nullptr);

}  // namespace gflow::harness
