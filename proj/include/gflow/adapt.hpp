#pragma once

// Test-time adaptation engines. The Euler and one-shot engines only run
// forward passes of the drift network; fine-tuning backpropagates through the
// target model.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "gflow/drift_net.hpp"
#include "gflow/target_model.hpp"

namespace gflow {

struct SolveConfig {
  int steps = 10;
  double eta = 1.0;
  bool record_loss = true;

  void validate() const;
};

/// Euler step length that integrates the net's full horizon in `steps`
/// steps: T / steps for per-knot drift, 1 / steps for per-normalized-time.
double natural_step(FlowObjective objective, int horizon, int steps);

struct StepDiag {
  double t = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();
};

struct AdaptResult {
  Vector theta;
  std::vector<StepDiag> diagnostics;  // steps + 1 entries
  double wall_ms = 0;
  std::size_t peak_bytes = 0;
  std::int64_t forward_count = 0;   // drift or target-model forward passes
  std::int64_t encode_count = 0;    // task encodings
  std::int64_t backward_count = 0;  // reverse sweeps of any graph
  std::int64_t graph_nodes = 0;     // autodiff nodes built during adaptation
  bool diverged = false;
  double chosen_lr = 0;             // fine-tuning only
};

/// Drift field in the solver's own coordinates.
using DriftField = std::function<Vector(const Vector& theta, double t)>;
using LossFn = std::function<double(const Vector& theta)>;

/// theta <- theta + eta * f(theta, t_k), t_k = k * horizon / steps. Aborts
/// with diverged = true (theta reset to theta_init) when ||theta|| exceeds
/// 1e3 times its initial norm (floored at 1); throws NumericError on non-finite values.
AdaptResult euler_solve(const DriftField& f, const Vector& theta_init, double horizon, const SolveConfig& cfg,
                        const LossFn& loss = {});

AdaptResult euler_adapt(const DriftNet& net, const Backbone& backbone, const Examples& support, int way,
                        const Vector& theta_init, const SolveConfig& cfg);

/// theta_init + v(theta_init, 0): one Euler step of unit length.
AdaptResult hypernet_adapt(const DriftNet& net, const Backbone& backbone, const Examples& support, int way,
                           const Vector& theta_init, bool record_loss = true);

/// Adam on the support loss for each learning rate; keeps the run with the
/// lowest final support loss. Throws NumericError if every run diverges.
AdaptResult finetune_adapt(const Backbone& backbone, const BiasLayout& layout, const Examples& support, int way,
                           const Vector& theta_init, int steps, const std::vector<double>& lr_grid,
                           bool record_loss = true);

struct SearchRow {
  double value = 0;
  double mean_accuracy = 0;
};
struct SearchResult {
  double best = 0;
  double best_accuracy = 0;
  std::vector<SearchRow> table;
};

/// Default multipliers of the natural step.
std::vector<double> default_eta_multipliers();

/// Best eta by mean query accuracy of Euler-adapted validation episodes.
SearchResult step_size_search(const DriftNet& net, const Backbone& backbone, const std::vector<Episode>& val_episodes,
                              const std::vector<double>& eta_grid, int steps);

/// Best single fine-tuning learning rate by mean validation query accuracy.
SearchResult lr_search(const Backbone& backbone, const BiasLayout& layout, const Vector& theta_init,
                       const std::vector<Episode>& val_episodes, const std::vector<double>& lr_grid, int steps);

}  // namespace gflow
