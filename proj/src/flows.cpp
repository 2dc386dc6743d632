#include "gflow/flows.hpp"

#include "gflow/rng.hpp"

namespace gflow {

std::string to_string(FlowObjective o) {
  switch (o) {
    case FlowObjective::kLinear: return "linear";
    case FlowObjective::kCubic: return "cubic";
    case FlowObjective::kHypernet: return "hypernet";
  }
  return "?";
}

FlowObjective objective_from_string(const std::string& s) {
  if (s == "linear" || s == "L") return FlowObjective::kLinear;
  if (s == "cubic" || s == "C") return FlowObjective::kCubic;
  if (s == "hypernet") return FlowObjective::kHypernet;
  throw ConfigError("unknown flow objective '" + s + "'");
}

namespace {

FlowSample from_point(const FlowPoint<double>& p, double t, const Trajectory& traj) {
  return {p.theta.transpose(), t, p.v.transpose(), traj.episode};
}

}  // namespace

FlowSample linear_sample(const Trajectory& traj, double t) { return from_point(linear_sample(traj.points, t), t, traj); }

FlowSample cubic_sample(const Trajectory& traj, double t) { return from_point(cubic_sample(traj.points, t), t, traj); }

FlowSample hypernet_sample(const Trajectory& traj) {
  const auto T = traj.points.rows() - 1;
  return {traj.point(0), 0.0, (traj.points.row(T) - traj.points.row(0)).transpose(), traj.episode};
}

FlowSample flow_sample(FlowObjective objective, const Trajectory& traj, double t) {
  switch (objective) {
    case FlowObjective::kLinear: return linear_sample(traj, t);
    case FlowObjective::kCubic: return cubic_sample(traj, t);
    case FlowObjective::kHypernet: return hypernet_sample(traj);
  }
  throw ConfigError("unknown flow objective");
}

void standardize(FlowSample& s, const NormStats& stats) {
  if (stats.empty()) throw ConfigError("standardize: store has no normalization statistics");
  s.theta = ((s.theta - stats.mean).array() / stats.std.array()).matrix();
  s.v = (s.v.array() / stats.std.array()).matrix();
}

std::vector<FlowSample> sample_batch(const TrajectoryStore& store, FlowObjective objective, const BatchConfig& cfg,
                                     std::uint64_t seed) {
  if (store.trajectories.empty()) throw ConfigError("sample_batch: empty store");
  if (cfg.batch < 1 || cfg.per_trajectory < 1) throw ConfigError("sample_batch: batch sizes must be positive");
  Rng rng(seed);
  const int n = static_cast<int>(store.trajectories.size());
  const double T = store.steps;
  std::vector<FlowSample> out;
  out.reserve(static_cast<std::size_t>(cfg.batch));
  while (static_cast<int>(out.size()) < cfg.batch) {
    const Trajectory& traj = store.trajectories[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
    for (int j = 0; j < cfg.per_trajectory && static_cast<int>(out.size()) < cfg.batch; ++j) {
      FlowSample s = flow_sample(objective, traj, rng.uniform(0.0, T));
      standardize(s, store.stats);
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace gflow
