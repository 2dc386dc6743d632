#pragma once

// Simulated bias fine-tuning paths and their on-disk store.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gflow/episodes.hpp"
#include "gflow/target_model.hpp"

namespace gflow {

enum class OptimizerKind { kAdam, kGd };
std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct SimConfig {
  int steps = 10;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double lr = 1e-2;
  double perturb_std = 0.2;

  void validate() const;
};

/// theta_init plus i.i.d. N(0, std^2) noise drawn from `seed`.
Vector perturb_init(const Vector& theta_init, double std, std::uint64_t seed);

struct Trajectory {
  std::uint64_t episode = 0;         // index into the store's episode table
  std::uint64_t episode_offset = 0;  // byte offset of that entry in the store file
  std::uint32_t init_index = 0;      // rank among the episode's perturbed starts
  std::uint64_t init_seed = 0;
  double perturb_std = 0;
  Matrix points;  // (T+1) x |theta|
  Vector losses;  // T+1 support losses, one per point

  int steps() const { return static_cast<int>(points.rows()) - 1; }
  int dim() const { return static_cast<int>(points.cols()); }
  Vector point(int k) const { return points.row(k).transpose(); }
};

using LossGradFn = std::function<LossGrad(const Vector&)>;

/// Runs cfg.steps optimizer updates of theta0 against `f`; optimizer state
/// starts fresh. Throws NumericError naming the step on a non-finite loss.
Trajectory simulate(const LossGradFn& f, const Vector& theta0, const SimConfig& cfg);

Trajectory simulate_trajectory(const Backbone& backbone, const BiasLayout& layout, const Episode& episode,
                               const Vector& theta0, const SimConfig& cfg);

struct NormStats {
  Vector mean;
  Vector std;          // floored at kStdFloor
  Vector drift_scale;  // per-coordinate std of theta_T - theta_0

  static constexpr double kStdFloor = 1e-8;
  bool empty() const { return mean.size() == 0; }
};

struct TrajectoryStore {
  int dim = 0;
  int steps = 0;
  std::uint64_t layout_hash = 0;
  SimConfig sim;
  Split split = Split::kTrain;
  NormStats stats;
  std::vector<Episode> episodes;  // support sets only
  std::vector<Trajectory> trajectories;

  std::size_t size() const { return trajectories.size(); }
  const Episode& episode_of(const Trajectory& t) const { return episodes.at(t.episode); }
};

/// Mean/std over every stored point and drift scale over endpoint
/// differences. Throws if fewer than two trajectories are present.
NormStats compute_normalization_stats(const TrajectoryStore& store);

struct CollectConfig {
  int episodes_per_domain = 100;
  int inits_per_episode = 10;
  int val_trajectories = 80;
  Protocol protocol = Protocol::various();
  SimConfig sim;
  std::uint64_t seed = 0;
};

struct CollectedData {
  TrajectoryStore train;
  TrajectoryStore val;
};

/// Train store from train-split episodes of `domains`; validation store from
/// held-out val-split episodes. Both carry the train statistics.
CollectedData collect_dataset(const Backbone& backbone, const BiasSelection& selection,
                              const std::vector<DomainSpec>& domains, const CollectConfig& cfg);

/// Trajectories whose episode satisfies `keep_episode` and whose init rank
/// within its episode is below `max_inits`; statistics are recomputed when
/// the store is a train store.
TrajectoryStore subset_store(const TrajectoryStore& store, const std::function<bool(const Episode&)>& keep_episode,
                             int max_episodes_per_domain, int max_inits);

inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr char kStoreMagic[4] = {'G', 'F', 'T', 'R'};

std::vector<std::uint8_t> encode_store(TrajectoryStore& store);
TrajectoryStore decode_store(std::vector<std::uint8_t> bytes);
/// Writes the store; fills each trajectory's episode_offset.
void save_store(TrajectoryStore& store, const std::string& path);
TrajectoryStore load_store(const std::string& path);
/// As load_store, rejecting a store built for another bias layout.
TrajectoryStore load_store(const std::string& path, std::uint64_t expected_layout_hash);

}  // namespace gflow
