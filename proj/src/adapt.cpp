#include "gflow/adapt.hpp"

#include <chrono>
#include <cmath>

#include "gflow/ad/adam.hpp"

namespace gflow {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

struct CounterDelta {
  ad::Counters start = ad::thread_counters();
  std::int64_t backward() const {
    return static_cast<std::int64_t>(ad::thread_counters().backward_passes - start.backward_passes);
  }
  std::int64_t nodes() const { return static_cast<std::int64_t>(ad::thread_counters().graph_nodes - start.graph_nodes); }
};

void check_layout(const DriftNet& net, const Backbone& backbone, const Vector& theta_init) {
  for (const auto& s : net.layout().slots())
    if (s.layer >= backbone.depth() || backbone.dims()[s.layer + 1] != s.length)
      throw CompatibilityError("drift net layout does not fit the backbone");
  if (theta_init.size() != net.arch().theta_dim)
    throw CompatibilityError("theta has " + std::to_string(theta_init.size()) + " coordinates, drift net expects " +
                             std::to_string(net.arch().theta_dim));
}

}  // namespace

void SolveConfig::validate() const {
  if (steps < 0) throw ConfigError("solver steps must be non-negative");
  if (steps > 0 && !(eta > 0)) throw ConfigError("solver step size must be positive");
}

double natural_step(FlowObjective objective, int horizon, int steps) {
  if (steps < 1) throw ConfigError("natural_step: steps must be positive");
  return objective == FlowObjective::kCubic ? static_cast<double>(horizon) / steps : 1.0 / steps;
}

AdaptResult euler_solve(const DriftField& f, const Vector& theta_init, double horizon, const SolveConfig& cfg,
                        const LossFn& loss) {
  cfg.validate();
  AdaptResult r;
  r.theta = theta_init;
  const double limit = 1e3 * std::max(theta_init.norm(), 1.0);
  auto note = [&](double t) {
    StepDiag d;
    d.t = t;
    if (cfg.record_loss && loss) d.loss = loss(r.theta);
    r.diagnostics.push_back(d);
  };
  note(0);
  for (int k = 0; k < cfg.steps; ++k) {
    const double t = k * horizon / cfg.steps;
    const Vector v = f(r.theta, t);
    ++r.forward_count;
    r.theta += cfg.eta * v;
    if (!r.theta.allFinite()) throw NumericError("solver produced non-finite theta at step " + std::to_string(k + 1));
    if (r.theta.norm() > limit) {
      r.diverged = true;
      r.theta = theta_init;
      r.diagnostics.resize(static_cast<std::size_t>(cfg.steps) + 1, StepDiag{});
      return r;
    }
    note((k + 1) * horizon / cfg.steps);
  }
  return r;
}

AdaptResult euler_adapt(const DriftNet& net, const Backbone& backbone, const Examples& support, int way,
                        const Vector& theta_init, const SolveConfig& cfg) {
  check_layout(net, backbone, theta_init);
  cfg.validate();
  const auto start = Clock::now();
  const CounterDelta counters;
  eager::Context ctx;

  const auto& enc = net.encoder();
  const eager::Tensor<double> none = ctx.constant(Matrix(1, 0));
  const auto feats = embed(ctx, enc.params(), enc.depth(), BiasLayout{}, none, ctx.view(support.x));
  const auto z = encode_task(ctx, net.params(), net.arch(), prototypes_of(ctx, feats, support.y, way));

  const NormStats& st = net.stats();
  const double T = net.steps();
  DriftField field = [&](const Vector& theta, double t) -> Vector {
    const auto th = ctx.constant(((theta - st.mean).array() / st.std.array()).matrix().transpose());
    const auto tn = ctx.constant(Matrix::Constant(1, 1, t / T));
    const auto v = drift_forward(ctx, net.params(), net.arch(), z, th, tn);
    return (v.value().row(0).transpose().array() * st.std.array()).matrix();
  };
  LossFn loss;
  if (cfg.record_loss)
    loss = [&](const Vector& th) { return support_loss(backbone, net.layout(), th, support, way); };
  AdaptResult r = euler_solve(field, theta_init, T, cfg, loss);
  r.encode_count = 1;
  r.backward_count = counters.backward();
  r.graph_nodes = counters.nodes();
  r.peak_bytes = ctx.peak_bytes();
  r.wall_ms = ms_since(start);
  return r;
}

AdaptResult hypernet_adapt(const DriftNet& net, const Backbone& backbone, const Examples& support, int way,
                           const Vector& theta_init, bool record_loss) {
  SolveConfig cfg;
  cfg.steps = 1;
  cfg.eta = 1.0;
  cfg.record_loss = record_loss;
  return euler_adapt(net, backbone, support, way, theta_init, cfg);
}

AdaptResult finetune_adapt(const Backbone& backbone, const BiasLayout& layout, const Examples& support, int way,
                           const Vector& theta_init, int steps, const std::vector<double>& lr_grid,
                           bool record_loss) {
  if (lr_grid.empty()) throw ConfigError("fine-tuning learning-rate grid is empty");
  if (steps < 0) throw ConfigError("fine-tuning steps must be non-negative");
  const auto start = Clock::now();
  const CounterDelta counters;
  AdaptResult best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t peak = 0;
  std::int64_t forwards = 0;
  bool any = false;

  for (double lr : lr_grid) {
    ad::ParamStore<double> store;
    store.add("theta", theta_init.transpose());
    ad::Adam<double> adam({.lr = lr});
    adam.init(store);
    AdaptResult run;
    run.chosen_lr = lr;
    bool finite = true;
    for (int k = 0; k < steps; ++k) {
      store.zero_grad();
      ad::Graph<double> g;
      auto th = g.param(store, std::size_t{0});
      auto e = embed(g, backbone.params(), backbone.depth(), layout, th, g.view(support.x));
      auto p = prototypes_of(g, e, support.y, way);
      auto loss = softmax_cross_entropy(prototype_logits(e, p, backbone.temperature()), support.y);
      ++forwards;
      const double lv = loss.value()(0, 0);
      if (!std::isfinite(lv)) {
        finite = false;
        break;
      }
      run.diagnostics.push_back({static_cast<double>(k), record_loss ? lv : std::numeric_limits<double>::quiet_NaN()});
      g.backward(loss);
      peak = std::max(peak, g.retained_bytes() + 2 * sizeof(double) * static_cast<std::size_t>(theta_init.size()));
      adam.step(store);
    }
    run.theta = store.value(0).row(0).transpose();
    if (!finite || !run.theta.allFinite()) continue;
    double final_loss = 0;
    try {
      final_loss = support_loss(backbone, layout, run.theta, support, way);
    } catch (const NumericError&) {
      continue;
    }
    ++forwards;
    if (!std::isfinite(final_loss)) continue;
    run.diagnostics.push_back({static_cast<double>(steps), record_loss ? final_loss : std::numeric_limits<double>::quiet_NaN()});
    if (!any || final_loss < best_loss) {
      best = std::move(run);
      best_loss = final_loss;
      any = true;
    }
  }
  if (!any) throw NumericError("fine-tuning diverged for every learning rate in the grid");
  best.forward_count = forwards;
  best.backward_count = counters.backward();
  best.graph_nodes = counters.nodes();
  best.peak_bytes = peak;
  best.wall_ms = ms_since(start);
  return best;
}

std::vector<double> default_eta_multipliers() { return {0.1, 0.25, 0.5, 1.0, 2.0}; }

SearchResult step_size_search(const DriftNet& net, const Backbone& backbone, const std::vector<Episode>& val_episodes,
                              const std::vector<double>& eta_grid, int steps) {
  if (eta_grid.empty()) throw ConfigError("step-size grid is empty");
  if (val_episodes.empty()) throw ConfigError("step-size search needs validation episodes");
  for (const auto& ep : val_episodes)
    if (ep.split == Split::kTest) throw ConfigError("step-size search must not use test episodes");
  const Vector theta_init = gather_bias(backbone, net.layout());
  SearchResult res;
  res.best_accuracy = -1;
  for (double eta : eta_grid) {
    SolveConfig cfg{steps, eta, false};
    double acc = 0;
    for (const auto& ep : val_episodes) {
      const AdaptResult r = euler_adapt(net, backbone, ep.support, ep.way, theta_init, cfg);
      acc += query_accuracy(backbone, net.layout(), r.theta, ep);
    }
    acc /= static_cast<double>(val_episodes.size());
    res.table.push_back({eta, acc});
    if (acc > res.best_accuracy) {
      res.best_accuracy = acc;
      res.best = eta;
    }
  }
  return res;
}

SearchResult lr_search(const Backbone& backbone, const BiasLayout& layout, const Vector& theta_init,
                       const std::vector<Episode>& val_episodes, const std::vector<double>& lr_grid, int steps) {
  if (lr_grid.empty()) throw ConfigError("learning-rate grid is empty");
  if (val_episodes.empty()) throw ConfigError("learning-rate search needs validation episodes");
  SearchResult res;
  res.best_accuracy = -1;
  for (double lr : lr_grid) {
    double acc = 0;
    for (const auto& ep : val_episodes) {
      Vector theta = theta_init;
      try {
        theta = finetune_adapt(backbone, layout, ep.support, ep.way, theta_init, steps, {lr}, false).theta;
      } catch (const NumericError&) {
      }
      acc += query_accuracy(backbone, layout, theta, ep);
    }
    acc /= static_cast<double>(val_episodes.size());
    res.table.push_back({lr, acc});
    if (acc > res.best_accuracy) {
      res.best_accuracy = acc;
      res.best = lr;
    }
  }
  return res;
}

}  // namespace gflow
