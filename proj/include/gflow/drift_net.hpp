#pragma once

// Task-conditioned drift network.
//
//   prototypes (way x e) -> Linear -> [token; protos] -> 2 pre-norm attention
//   blocks -> LayerNorm -> row 0 = z
//   v = MLP(z + Linear(theta') + Linear(t / T))
//
// theta' and v are in the standardized coordinates of the trajectory store.

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gflow/ad/eager.hpp"
#include "gflow/ad/graph.hpp"
#include "gflow/flows.hpp"
#include "gflow/target_model.hpp"
#include "gflow/trajectories.hpp"

namespace gflow {

struct DriftArch {
  int theta_dim = 64;
  int proto_dim = 32;
  int width = 64;
  int ff = 128;
  int blocks = 2;
  std::vector<int> hidden{128, 128, 128};
};

/// Unit of the predicted drift for a training objective: "per-normalized-time"
/// for the linear and one-shot objectives, "per-knot" for the cubic one.
std::string drift_units(FlowObjective objective);

class DriftNet {
 public:
  DriftNet() = default;
  /// Fresh parameters for the given encoder and store statistics.
  DriftNet(DriftArch arch, Backbone encoder, BiasLayout layout, int steps, FlowObjective objective, NormStats stats,
           std::uint64_t seed);

  const DriftArch& arch() const { return arch_; }
  ad::ParamStore<double>& params() { return params_; }
  const ad::ParamStore<double>& params() const { return params_; }
  const Backbone& encoder() const { return encoder_; }
  const BiasLayout& layout() const { return layout_; }
  std::uint64_t layout_hash() const { return layout_.hash(); }
  int steps() const { return steps_; }
  FlowObjective objective() const { return objective_; }
  const NormStats& stats() const { return stats_; }

  /// Class prototypes of the frozen encoder at its stored biases.
  Matrix task_prototypes(const Examples& support, int way) const;

 private:
  friend DriftNet load_drift(const std::string& path);
  DriftArch arch_;
  ad::ParamStore<double> params_;
  Backbone encoder_;
  BiasLayout layout_;
  int steps_ = 0;
  FlowObjective objective_ = FlowObjective::kCubic;
  NormStats stats_;
};

namespace drift {

inline std::string blk(int b, const char* name) { return "blk" + std::to_string(b) + "." + name; }
inline std::string dec(int l, const char* name) { return "dec" + std::to_string(l) + "." + name; }

template <class Ctx, class Store>
typename Ctx::Value affine(Ctx& ctx, Store& p, const std::string& w, const std::string& b, const typename Ctx::Value& x) {
  return matmul(x, ctx.param(p, w)) + ctx.param(p, b);
}

template <class Ctx, class Store>
typename Ctx::Value norm(Ctx& ctx, Store& p, const std::string& prefix, const typename Ctx::Value& x) {
  return layer_norm(x, ctx.param(p, prefix + ".g"), ctx.param(p, prefix + ".b"));
}

}  // namespace drift

/// Task vector (1 x w) from class prototypes (way x e).
template <class Ctx, class Store>
typename Ctx::Value encode_task(Ctx& ctx, Store& p, const DriftArch& arch, const typename Ctx::Value& protos) {
  using V = typename Ctx::Value;
  if (protos.rows() < 1) throw ShapeError("encode_task: empty support");
  const std::vector<V> seq{ctx.param(p, "token"), drift::affine(ctx, p, "proj.W", "proj.b", protos)};
  V x = concat_rows(std::span<const V>(seq));
  const double scale = 1.0 / std::sqrt(static_cast<double>(arch.width));
  for (int b = 0; b < arch.blocks; ++b) {
    const V h = drift::norm(ctx, p, drift::blk(b, "ln1"), x);
    const V q = matmul(h, ctx.param(p, drift::blk(b, "Wq")));
    const V k = matmul(h, ctx.param(p, drift::blk(b, "Wk")));
    const V v = matmul(h, ctx.param(p, drift::blk(b, "Wv")));
    const V att = softmax_rows(scale * matmul_bt(q, k));
    x = x + drift::affine(ctx, p, drift::blk(b, "Wo"), drift::blk(b, "bo"), matmul(att, v));
    const V h2 = drift::norm(ctx, p, drift::blk(b, "ln2"), x);
    const V f = relu(drift::affine(ctx, p, drift::blk(b, "W1"), drift::blk(b, "b1"), h2));
    x = x + drift::affine(ctx, p, drift::blk(b, "W2"), drift::blk(b, "b2"), f);
  }
  return gather_rows(drift::norm(ctx, p, "lnf", x), std::vector<int>{0});
}

/// Standardized drift (B x |theta|) for task rows z (B x w), standardized
/// parameters (B x |theta|) and normalized times t / T (B x 1).
template <class Ctx, class Store>
typename Ctx::Value drift_forward(Ctx& ctx, Store& p, const DriftArch& arch, const typename Ctx::Value& z,
                                  const typename Ctx::Value& theta, const typename Ctx::Value& tnorm) {
  using V = typename Ctx::Value;
  if (theta.cols() != arch.theta_dim)
    throw ShapeError("drift_forward: theta has " + std::to_string(theta.cols()) + " coordinates, net expects " +
                     std::to_string(arch.theta_dim));
  V h = z + drift::affine(ctx, p, "emb_theta.W", "emb_theta.b", theta) +
        drift::affine(ctx, p, "emb_t.W", "emb_t.b", tnorm);
  const int layers = static_cast<int>(arch.hidden.size()) + 1;
  for (int l = 0; l < layers; ++l) {
    h = drift::affine(ctx, p, drift::dec(l, "W"), drift::dec(l, "b"), h);
    if (l + 1 < layers) h = relu(h);
  }
  return h;
}

/// A batch grouped by task: row i of the batch uses task task_of[i].
struct FlowBatch {
  std::vector<const Matrix*> task_protos;
  std::vector<int> task_of;
  Matrix theta;  // B x |theta|, standardized
  Matrix tnorm;  // B x 1
  Matrix v;      // B x |theta|, standardized
};

/// Groups samples by episode; `protos[e]` holds prototypes of store episode e.
FlowBatch make_flow_batch(const std::vector<FlowSample>& samples, const std::vector<Matrix>& protos, int steps);

template <class Ctx, class Store>
typename Ctx::Value flow_matching_loss(Ctx& ctx, Store& p, const DriftArch& arch, const FlowBatch& batch) {
  using V = typename Ctx::Value;
  if (batch.task_of.empty()) throw ShapeError("flow_matching_loss: empty batch");
  std::vector<V> zs;
  zs.reserve(batch.task_protos.size());
  for (const Matrix* m : batch.task_protos) zs.push_back(encode_task(ctx, p, arch, ctx.view(*m)));
  const V z = gather_rows(concat_rows(std::span<const V>(zs)), batch.task_of);
  const V pred = drift_forward(ctx, p, arch, z, ctx.view(batch.theta), ctx.view(batch.tnorm));
  const double inv_b = 1.0 / static_cast<double>(batch.task_of.size());
  return inv_b * sum(square(pred - ctx.view(batch.v)));
}

/// Eager loss of a fixed sample set.
double flow_matching_loss(const DriftNet& net, const FlowBatch& batch);

/// Frozen-encoder prototypes for every episode of a store.
std::vector<Matrix> store_prototypes(const DriftNet& net, const TrajectoryStore& store);

struct DriftTrainConfig {
  int batch = 256;
  int per_trajectory = 8;
  double lr = 1e-3;
  int max_steps = 50000;
  int eval_every = 500;
  int patience = 10;
  int val_samples = 1024;
  std::uint64_t seed = 0;
};

struct DriftTrainReport {
  std::vector<int> eval_step;
  std::vector<double> train_loss;  // mean over the preceding window
  std::vector<double> val_loss;
  double initial_val_loss = 0;
  double best_val_loss = 0;
  int best_step = 0;
  int steps_run = 0;
  bool early_stopped = false;
};

/// Adam on the drift parameters with periodic validation; returns the best
/// validation checkpoint.
DriftNet train_drift(DriftNet net, const TrajectoryStore& train, const TrajectoryStore& val,
                     const DriftTrainConfig& cfg, DriftTrainReport* report = nullptr);

/// Fixed validation sample set drawn from `store` with the net's objective.
FlowBatch validation_batch(const DriftNet& net, const TrajectoryStore& store, const std::vector<Matrix>& protos,
                           int samples, std::uint64_t seed);

void save_drift(const DriftNet& net, const std::string& path);
DriftNet load_drift(const std::string& path);
/// As load_drift, rejecting a net built for another layout or horizon.
DriftNet load_drift_for_solve(const std::string& path, std::uint64_t layout_hash);

}  // namespace gflow
