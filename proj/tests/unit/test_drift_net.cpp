#include <doctest.h>

#include <filesystem>

#include "fd.hpp"
#include "gflow/drift_net.hpp"
#include "gflow/error.hpp"
#include "gflow/rng.hpp"

using namespace gflow;

namespace {

struct Fixture {
  Backbone bb = Backbone::random({8, 6, 4}, 2);
  BiasSelection sel = select_bias_params(bb, {0, 1});
  CollectedData data;
  DriftArch arch;

  Fixture() {
    const auto doms = make_domains(7, 2, 0, 8);
    CollectConfig cfg;
    cfg.episodes_per_domain = 4;
    cfg.inits_per_episode = 3;
    cfg.val_trajectories = 6;
    cfg.sim.steps = 5;
    cfg.seed = 3;
    data = collect_dataset(bb, sel, doms, cfg);
    arch.theta_dim = sel.layout.size();
    arch.proto_dim = bb.embed_dim();
    arch.width = 8;
    arch.ff = 16;
    arch.hidden = {16, 16};
  }

  DriftNet net(FlowObjective obj = FlowObjective::kCubic, std::uint64_t seed = 1) const {
    return DriftNet(arch, bb, sel.layout, 5, obj, data.train.stats, seed);
  }
};

Vector encode(const DriftNet& net, const Matrix& protos) {
  eager::Context ctx;
  return encode_task(ctx, net.params(), net.arch(), ctx.view(protos)).value().row(0).transpose();
}

Matrix predict(const DriftNet& net, const FlowBatch& b) {
  eager::Context ctx;
  std::vector<eager::Context::Value> zs;
  for (const Matrix* m : b.task_protos) zs.push_back(encode_task(ctx, net.params(), net.arch(), ctx.view(*m)));
  const auto z = gather_rows(concat_rows(std::span<const eager::Context::Value>(zs)), b.task_of);
  return drift_forward(ctx, net.params(), net.arch(), z, ctx.view(b.theta), ctx.view(b.tnorm)).value();
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("gflow_test_" + name)).string();
}

}  // namespace

TEST_CASE("task encoder is a set function") {
  const Fixture f;
  const DriftNet net = f.net();
  Rng rng(2);
  for (int way : {2, 5}) {
    const Matrix p = rng.normal_matrix(way, f.arch.proto_dim);
    const Vector z = encode(net, p);
    CHECK(z.size() == f.arch.width);
    Matrix rev = p.colwise().reverse();
    CHECK((encode(net, rev) - z).cwiseAbs().maxCoeff() < 1e-12);
  }
  // prototypes of a support set with every example doubled are unchanged
  const Episode e = f.data.train.episodes[0];
  Examples twice = e.support;
  twice.x = Matrix(2 * e.support.size(), e.dim());
  twice.x << e.support.x, e.support.x;
  twice.y.insert(twice.y.end(), e.support.y.begin(), e.support.y.end());
  const Matrix a = net.task_prototypes(e.support, e.way);
  const Matrix b = net.task_prototypes(twice, e.way);
  CHECK((encode(net, a) - encode(net, b)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(net.task_prototypes(Examples{Matrix(0, e.dim()), {}}, e.way), ShapeError);
}

TEST_CASE("drift forward shapes and conditioning") {
  const Fixture f;
  const DriftNet net = f.net();
  Rng rng(5);
  eager::Context ctx;
  const Matrix theta = rng.normal_matrix(3, f.arch.theta_dim);
  const Matrix t = Matrix::Constant(3, 1, 0.4);
  const Matrix z1 = rng.normal_matrix(3, f.arch.width), z2 = rng.normal_matrix(3, f.arch.width);
  const Matrix v1 = drift_forward(ctx, net.params(), net.arch(), ctx.view(z1), ctx.view(theta), ctx.view(t)).value();
  const Matrix v2 = drift_forward(ctx, net.params(), net.arch(), ctx.view(z2), ctx.view(theta), ctx.view(t)).value();
  const Matrix again = drift_forward(ctx, net.params(), net.arch(), ctx.view(z1), ctx.view(theta), ctx.view(t)).value();
  CHECK(v1.rows() == 3);
  CHECK(v1.cols() == f.arch.theta_dim);
  CHECK((v1 - v2).norm() > 1e-6);
  CHECK((v1 - again).cwiseAbs().maxCoeff() == 0);
  const Matrix wrong = rng.normal_matrix(3, f.arch.theta_dim + 1);
  CHECK_THROWS_AS(drift_forward(ctx, net.params(), net.arch(), ctx.view(z1), ctx.view(wrong), ctx.view(t)), ShapeError);
}

TEST_CASE("flow matching loss") {
  const Fixture f;
  DriftNet net = f.net();
  const auto protos = store_prototypes(net, f.data.train);
  const FlowBatch batch = validation_batch(net, f.data.train, protos, 32, 4);
  CHECK(batch.task_of.size() == 32);

  SUBCASE("zero when the target is the prediction") {
    FlowBatch b = batch;
    b.v = predict(net, b);
    CHECK(flow_matching_loss(net, b) < 1e-20);
  }
  SUBCASE("zero output gives the mean squared target norm") {
    const std::string last = drift::dec(static_cast<int>(f.arch.hidden.size()), "W");
    net.params().value(last).setZero();
    net.params().value(drift::dec(static_cast<int>(f.arch.hidden.size()), "b")).setZero();
    const double expect = batch.v.rowwise().squaredNorm().mean();
    CHECK(flow_matching_loss(net, batch) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("flow matching gradient matches finite differences") {
  const Fixture f;
  for (int trial = 0; trial < 20; ++trial) {
    DriftNet net = f.net(FlowObjective::kCubic, 100 + trial);
    const auto protos = store_prototypes(net, f.data.train);
    const FlowBatch batch = validation_batch(net, f.data.train, protos, 8, 50 + trial);
    auto& store = net.params();
    store.zero_grad();
    ad::Graph<double> g;
    g.backward(flow_matching_loss(g, store, net.arch(), batch));

    // a few random coordinates of every tensor
    Rng rng(derive_seed(9, {std::uint64_t(trial)}));
    std::vector<double> analytic, numeric;
    for (std::size_t i = 0; i < store.size(); ++i) {
      Matrix& w = store.value(i);
      for (int k = 0; k < 2; ++k) {
        const auto idx = static_cast<Eigen::Index>(rng.uniform_int(0, static_cast<int>(w.size()) - 1));
        const double keep = w(idx);
        const double h = 1e-5;
        w(idx) = keep + h;
        const double up = flow_matching_loss(net, batch);
        w(idx) = keep - h;
        const double down = flow_matching_loss(net, batch);
        w(idx) = keep;
        analytic.push_back(store.grad(i)(idx));
        numeric.push_back((up - down) / (2 * h));
      }
    }
    const Vector a = Eigen::Map<Vector>(analytic.data(), static_cast<Eigen::Index>(analytic.size()));
    const Vector n = Eigen::Map<Vector>(numeric.data(), static_cast<Eigen::Index>(numeric.size()));
    CHECK(testing::rel_error(a, n) < 1e-6);
  }
}

TEST_CASE("training") {
  const Fixture f;
  DriftTrainConfig cfg;
  cfg.batch = 32;
  cfg.per_trajectory = 4;
  cfg.lr = 3e-3;
  cfg.max_steps = 400;
  cfg.eval_every = 50;
  cfg.val_samples = 128;
  cfg.seed = 2;

  SUBCASE("validation loss improves and runs are reproducible") {
    DriftTrainReport rep;
    const DriftNet a = train_drift(f.net(), f.data.train, f.data.val, cfg, &rep);
    CHECK(rep.best_val_loss < rep.initial_val_loss);
    CHECK(rep.eval_step.size() == rep.val_loss.size());
    const DriftNet b = train_drift(f.net(), f.data.train, f.data.val, cfg);
    CHECK(a.params().checksum() == b.params().checksum());
  }
  SUBCASE("a single trajectory is memorized") {
    TrajectoryStore one = f.data.train;
    one.trajectories.resize(1);
    cfg.max_steps = 3000;
    cfg.eval_every = 250;
    cfg.patience = 100;
    cfg.per_trajectory = 1;
    DriftTrainReport rep;
    train_drift(f.net(), one, one, cfg, &rep);
    CHECK(rep.best_val_loss < 1e-2 * rep.initial_val_loss);
  }
  SUBCASE("bad configuration") {
    cfg.patience = 0;
    CHECK_THROWS_AS(train_drift(f.net(), f.data.train, f.data.val, cfg), ConfigError);
  }
}

TEST_CASE("checkpoint files") {
  const Fixture f;
  const DriftNet net = f.net(FlowObjective::kLinear, 8);
  const std::string path = temp_path("drift.ckpt");
  save_drift(net, path);
  const DriftNet back = load_drift(path);
  CHECK(back.params().checksum() == net.params().checksum());
  CHECK(back.objective() == FlowObjective::kLinear);
  CHECK(back.steps() == 5);
  CHECK(back.layout_hash() == net.layout_hash());
  CHECK((back.stats().std - net.stats().std).cwiseAbs().maxCoeff() == 0);
  const auto protos = store_prototypes(net, f.data.val);
  const FlowBatch batch = validation_batch(net, f.data.val, protos, 16, 1);
  CHECK(flow_matching_loss(back, batch) == flow_matching_loss(net, batch));
  CHECK_NOTHROW(load_drift_for_solve(path, net.layout_hash()));
  CHECK_THROWS_AS(load_drift_for_solve(path, net.layout_hash() ^ 1), CompatibilityError);

  TrajectoryStore other = f.data.train;
  other.layout_hash ^= 1;
  CHECK_THROWS_AS(train_drift(net, other, f.data.val, DriftTrainConfig{}), CompatibilityError);
  std::filesystem::remove(path);
}
