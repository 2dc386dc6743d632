#include <doctest.h>

#include <cmath>

#include "gflow/adapt.hpp"
#include "gflow/error.hpp"
#include "gflow/rng.hpp"

using namespace gflow;

namespace {

struct Fixture {
  std::vector<DomainSpec> doms = make_domains(7, 2, 0, 8);
  Backbone bb = Backbone::random({8, 6, 4}, 2);
  BiasSelection sel = select_bias_params(bb, {0, 1});
  NormStats stats;
  DriftArch arch;

  Fixture() {
    Rng rng(1);
    stats.mean = rng.normal_vector(sel.layout.size());
    stats.std = rng.normal_vector(sel.layout.size()).cwiseAbs().array() + 0.5;
    stats.drift_scale = stats.std;
    arch.theta_dim = sel.layout.size();
    arch.proto_dim = bb.embed_dim();
    arch.width = 8;
    arch.ff = 16;
    arch.hidden = {16, 16};
  }

  DriftNet net(FlowObjective obj = FlowObjective::kCubic) const {
    return DriftNet(arch, bb, sel.layout, 5, obj, stats, 4);
  }
  Episode episode(std::uint64_t seed, Split split = Split::kTest) const {
    return sample_episode(doms[seed % 2], Protocol::fixed(3, 5, 5), split, seed);
  }
};

}  // namespace

TEST_CASE("Euler solver on closed-form fields") {
  Vector th0(3);
  th0 << 1, -2, 0.5;
  SUBCASE("zero steps is the identity") {
    const AdaptResult r = euler_solve([](const Vector& th, double) { return Vector(th); }, th0, 1.0, {0, 0.1, true},
                                      [](const Vector& th) { return th.squaredNorm(); });
    CHECK((r.theta - th0).cwiseAbs().maxCoeff() == 0);
    REQUIRE(r.diagnostics.size() == 1);
    CHECK(r.diagnostics[0].loss == th0.squaredNorm());
    CHECK(r.forward_count == 0);
  }
  SUBCASE("constant field integrates to eta * steps * c") {
    Vector c(3);
    c << 0.3, 0.1, -1;
    const AdaptResult r = euler_solve([&](const Vector&, double) { return c; }, th0, 1.0, {10, 0.1, false});
    CHECK((r.theta - (th0 + c)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(r.diagnostics.size() == 11);
    CHECK(r.diagnostics[10].t == doctest::Approx(1.0));
  }
  SUBCASE("exponential decay") {
    const AdaptResult r = euler_solve([](const Vector& th, double) { return Vector(-th); }, th0, 1.0, {1000, 1e-3, false});
    CHECK((r.theta - std::exp(-1.0) * th0).cwiseAbs().maxCoeff() < 1e-2);
  }
  SUBCASE("time grid") {
    std::vector<double> seen;
    euler_solve([&](const Vector& th, double t) { seen.push_back(t); return Vector(0 * th); }, th0, 10.0, {4, 1, false});
    CHECK(seen == std::vector<double>{0, 2.5, 5, 7.5});
  }
  SUBCASE("divergence guard") {
    const AdaptResult r = euler_solve([](const Vector& th, double) { return Vector(10 * th); }, th0, 1.0, {10, 1, false});
    CHECK(r.diverged);
    CHECK((r.theta - th0).cwiseAbs().maxCoeff() == 0);
    CHECK(r.diagnostics.size() == 11);
  }
  SUBCASE("non-finite drift") {
    CHECK_THROWS_AS(euler_solve([](const Vector& th, double) { return Vector(th * NAN); }, th0, 1.0, {2, 1, false}),
                    NumericError);
  }
  CHECK_THROWS_AS(euler_solve([](const Vector& th, double) { return th; }, th0, 1.0, {-1, 1, false}), ConfigError);
  CHECK_THROWS_AS(euler_solve([](const Vector& th, double) { return th; }, th0, 1.0, {3, 0, false}), ConfigError);
}

TEST_CASE("natural step") {
  CHECK(natural_step(FlowObjective::kCubic, 10, 10) == 1.0);
  CHECK(natural_step(FlowObjective::kCubic, 10, 50) == 0.2);
  CHECK(natural_step(FlowObjective::kLinear, 10, 10) == 0.1);
  CHECK_THROWS_AS(natural_step(FlowObjective::kLinear, 10, 0), ConfigError);
}

TEST_CASE("drift-net adaptation") {
  const Fixture f;
  const DriftNet net = f.net();
  const Episode e = f.episode(3);
  const Vector th0 = f.sel.theta_init;

  SUBCASE("one-shot step is theta + sigma * v at t = 0") {
    const AdaptResult h = hypernet_adapt(net, f.bb, e.support, e.way, th0);
    const AdaptResult one = euler_adapt(net, f.bb, e.support, e.way, th0, {1, 1.0, true});
    CHECK((h.theta - one.theta).cwiseAbs().maxCoeff() == 0);
    CHECK(h.diagnostics.size() == 2);
    CHECK(h.diagnostics[0].loss == doctest::Approx(support_loss(f.bb, f.sel.layout, th0, e.support, e.way)));

    eager::Context ctx;
    const Matrix protos = net.task_prototypes(e.support, e.way);
    const auto z = encode_task(ctx, net.params(), net.arch(), ctx.view(protos));
    const Matrix std_theta = ((th0 - f.stats.mean).array() / f.stats.std.array()).matrix().transpose();
    const Matrix v = drift_forward(ctx, net.params(), net.arch(), z, ctx.constant(std_theta),
                                   ctx.constant(Matrix::Zero(1, 1))).value();
    const Vector expect = th0 + (v.row(0).transpose().array() * f.stats.std.array()).matrix();
    CHECK((h.theta - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("a net with zero output leaves theta in place") {
    DriftNet flat = net;
    const int last = static_cast<int>(f.arch.hidden.size());
    flat.params().value(drift::dec(last, "W")).setZero();
    flat.params().value(drift::dec(last, "b")).setZero();
    const AdaptResult r = euler_adapt(flat, f.bb, e.support, e.way, th0, {10, 0.5, false});
    CHECK((r.theta - th0).cwiseAbs().maxCoeff() == 0);
  }
  SUBCASE("counters") {
    const AdaptResult r = euler_adapt(net, f.bb, e.support, e.way, th0, {10, 0.5, false});
    CHECK(r.backward_count == 0);
    CHECK(r.graph_nodes == 0);
    CHECK(r.forward_count == 10);
    CHECK(r.encode_count == 1);
    CHECK(hypernet_adapt(net, f.bb, e.support, e.way, th0, false).backward_count == 0);
  }
  SUBCASE("incompatible inputs") {
    CHECK_THROWS_AS(euler_adapt(net, f.bb, e.support, e.way, Vector::Zero(th0.size() + 1), {}), CompatibilityError);
    const Backbone other = Backbone::random({8, 5, 4}, 1);
    CHECK_THROWS_AS(euler_adapt(net, other, e.support, e.way, th0, {}), CompatibilityError);
  }
}

TEST_CASE("fine-tuning") {
  const Fixture f;
  const Episode e = f.episode(5);
  const Vector th0 = f.sel.theta_init;
  const double start = support_loss(f.bb, f.sel.layout, th0, e.support, e.way);

  const AdaptResult none = finetune_adapt(f.bb, f.sel.layout, e.support, e.way, th0, 0, {1e-2});
  CHECK((none.theta - th0).cwiseAbs().maxCoeff() == 0);

  const AdaptResult r = finetune_adapt(f.bb, f.sel.layout, e.support, e.way, th0, 50, {1e-2});
  CHECK(r.diagnostics.back().loss < start);
  CHECK(r.backward_count == 50);
  CHECK(r.chosen_lr == 1e-2);

  const AdaptResult wide = finetune_adapt(f.bb, f.sel.layout, e.support, e.way, th0, 50, {1e-3, 1e-2, 1e-1});
  CHECK(wide.diagnostics.back().loss <= r.diagnostics.back().loss);
  CHECK(wide.backward_count == 150);

  CHECK_THROWS_AS(finetune_adapt(f.bb, f.sel.layout, e.support, e.way, th0, 5, {}), ConfigError);
  CHECK_THROWS_AS(finetune_adapt(f.bb, f.sel.layout, e.support, e.way, th0, 5, {1e300}), NumericError);
}

TEST_CASE("step-size search") {
  const Fixture f;
  const DriftNet net = f.net();
  std::vector<Episode> val;
  for (std::uint64_t i = 0; i < 4; ++i) val.push_back(f.episode(20 + i, Split::kVal));

  const SearchResult single = step_size_search(net, f.bb, val, {0.3}, 5);
  CHECK(single.best == 0.3);
  REQUIRE(single.table.size() == 1);

  std::vector<double> grid;
  for (double m : default_eta_multipliers()) grid.push_back(m * natural_step(net.objective(), net.steps(), 5));
  const SearchResult full = step_size_search(net, f.bb, val, grid, 5);
  REQUIRE(full.table.size() == grid.size());
  double best = -1;
  for (const auto& row : full.table) best = std::max(best, row.mean_accuracy);
  CHECK(full.best_accuracy == best);

  CHECK_THROWS_AS(step_size_search(net, f.bb, {f.episode(1, Split::kTest)}, grid, 5), ConfigError);
  CHECK_THROWS_AS(step_size_search(net, f.bb, val, {}, 5), ConfigError);

  const SearchResult lr = lr_search(f.bb, f.sel.layout, f.sel.theta_init, val, {1e-3, 1e-2}, 5);
  CHECK(lr.table.size() == 2);
  CHECK((lr.best == 1e-3 || lr.best == 1e-2));
}
