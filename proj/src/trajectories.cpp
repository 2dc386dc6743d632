#include "gflow/trajectories.hpp"

#include <cmath>
#include <map>
#include <optional>

#include "gflow/ad/adam.hpp"
#include "gflow/error.hpp"
#include "gflow/io/binary.hpp"
#include "gflow/rng.hpp"

namespace gflow {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "gd"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "gd" || s == "plain-gd") return OptimizerKind::kGd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

void SimConfig::validate() const {
  if (steps < 1) throw ConfigError("trajectory steps must be at least 1");
  if (lr < 0 || !std::isfinite(lr)) throw ConfigError("trajectory learning rate must be non-negative");
  if (perturb_std < 0) throw ConfigError("perturbation std must be non-negative");
}

Vector perturb_init(const Vector& theta_init, double std, std::uint64_t seed) {
  if (std < 0) throw ConfigError("perturbation std must be non-negative");
  if (std == 0) return theta_init;
  Rng rng(seed);
  return theta_init + rng.normal_vector(theta_init.size(), std);
}

Trajectory simulate(const LossGradFn& f, const Vector& theta0, const SimConfig& cfg) {
  if (cfg.steps < 1) throw ConfigError("trajectory steps must be at least 1");
  const auto p = theta0.size();
  Trajectory tr;
  tr.points.resize(cfg.steps + 1, p);
  tr.losses.resize(cfg.steps + 1);

  ad::ParamStore<double> store;
  store.add("theta", theta0.transpose());
  std::optional<ad::Adam<double>> adam;
  if (cfg.optimizer == OptimizerKind::kAdam && cfg.lr > 0) {
    adam.emplace(ad::AdamConfig{.lr = cfg.lr});
    adam->init(store);
  }

  for (int k = 0;; ++k) {
    const Vector theta = store.value(0).row(0).transpose();
    tr.points.row(k) = theta.transpose();
    LossGrad lg = f(theta);
    if (!std::isfinite(lg.loss) || !lg.grad.allFinite())
      throw NumericError("trajectory diverged at step " + std::to_string(k) + " (loss " + std::to_string(lg.loss) + ")");
    tr.losses(k) = lg.loss;
    if (k == cfg.steps) break;
    if (cfg.lr == 0) continue;
    if (adam) {
      store.grad(0) = lg.grad.transpose();
      adam->step(store);
    } else {
      store.value(0) -= cfg.lr * lg.grad.transpose();
    }
  }
  return tr;
}

Trajectory simulate_trajectory(const Backbone& backbone, const BiasLayout& layout, const Episode& episode,
                               const Vector& theta0, const SimConfig& cfg) {
  if (episode.way < 2) throw ShapeError("trajectory simulation needs at least two classes");
  return simulate(
      [&](const Vector& th) { return support_loss_grad(backbone, layout, th, episode.support, episode.way); }, theta0,
      cfg);
}

NormStats compute_normalization_stats(const TrajectoryStore& store) {
  if (store.trajectories.size() < 2) throw ConfigError("normalization needs at least two trajectories");
  const int p = store.dim;
  NormStats s;
  s.mean = Vector::Zero(p);
  Vector drift_mean = Vector::Zero(p);
  double n = 0;
  for (const auto& t : store.trajectories) {
    s.mean += t.points.colwise().sum().transpose();
    drift_mean += (t.points.bottomRows(1) - t.points.topRows(1)).transpose();
    n += static_cast<double>(t.points.rows());
  }
  s.mean /= n;
  const double m = static_cast<double>(store.trajectories.size());
  drift_mean /= m;
  Vector var = Vector::Zero(p), drift_var = Vector::Zero(p);
  for (const auto& t : store.trajectories) {
    var += (t.points.rowwise() - s.mean.transpose()).array().square().colwise().sum().matrix().transpose();
    const Vector d = (t.points.bottomRows(1) - t.points.topRows(1)).transpose() - drift_mean;
    drift_var += d.array().square().matrix();
  }
  s.std = (var / n).array().sqrt().max(NormStats::kStdFloor).matrix();
  s.drift_scale = (drift_var / m).array().sqrt().max(NormStats::kStdFloor).matrix();
  return s;
}

CollectedData collect_dataset(const Backbone& backbone, const BiasSelection& selection,
                              const std::vector<DomainSpec>& domains, const CollectConfig& cfg) {
  cfg.sim.validate();
  if (cfg.inits_per_episode < 1) throw ConfigError("inits_per_episode must be at least 1");
  if (cfg.episodes_per_domain < 1) throw ConfigError("episodes_per_domain must be at least 1");
  if (domains.empty()) throw ConfigError("trajectory collection needs at least one domain");

  const std::uint64_t stream = derive_seed(cfg.seed, {0x7472616a});
  auto blank = [&](Split split) {
    TrajectoryStore s;
    s.dim = selection.layout.size();
    s.steps = cfg.sim.steps;
    s.layout_hash = selection.layout.hash();
    s.sim = cfg.sim;
    s.split = split;
    return s;
  };
  auto run_episode = [&](TrajectoryStore& store, Episode ep, std::uint64_t index) {
    ep.query = Examples{};
    ep.query.x.resize(0, ep.dim());
    const auto ep_index = static_cast<std::uint64_t>(store.episodes.size());
    for (int j = 0; j < cfg.inits_per_episode; ++j) {
      const std::uint64_t seed =
          derive_seed(stream, {static_cast<std::uint64_t>(ep.domain), static_cast<std::uint64_t>(ep.split), index,
                               static_cast<std::uint64_t>(j)});
      const Vector theta0 = perturb_init(selection.theta_init, cfg.sim.perturb_std, seed);
      Trajectory t = simulate_trajectory(backbone, selection.layout, ep, theta0, cfg.sim);
      t.episode = ep_index;
      t.init_index = static_cast<std::uint32_t>(j);
      t.init_seed = seed;
      t.perturb_std = cfg.sim.perturb_std;
      store.trajectories.push_back(std::move(t));
    }
    store.episodes.push_back(std::move(ep));
  };

  CollectedData out{blank(Split::kTrain), blank(Split::kVal)};
  for (const auto& dom : domains)
    for (int i = 0; i < cfg.episodes_per_domain; ++i) {
      const auto idx = static_cast<std::uint64_t>(i);
      run_episode(out.train, sample_episode(dom, cfg.protocol, Split::kTrain, episode_seed(stream, dom.id, Split::kTrain, idx)),
                  idx);
    }

  const int val_episodes = (cfg.val_trajectories + cfg.inits_per_episode - 1) / cfg.inits_per_episode;
  for (int i = 0; i < val_episodes; ++i) {
    const DomainSpec& dom = domains[static_cast<std::size_t>(i) % domains.size()];
    const auto idx = static_cast<std::uint64_t>(i);
    run_episode(out.val, sample_episode(dom, cfg.protocol, Split::kVal, episode_seed(stream, dom.id, Split::kVal, idx)),
                idx);
  }
  if (static_cast<int>(out.val.trajectories.size()) > cfg.val_trajectories)
    out.val.trajectories.resize(static_cast<std::size_t>(cfg.val_trajectories));

  out.train.stats = compute_normalization_stats(out.train);
  out.val.stats = out.train.stats;
  return out;
}

TrajectoryStore subset_store(const TrajectoryStore& store, const std::function<bool(const Episode&)>& keep_episode,
                             int max_episodes_per_domain, int max_inits) {
  TrajectoryStore out = store;
  out.episodes.clear();
  out.trajectories.clear();
  std::map<int, int> per_domain;
  std::vector<std::int64_t> remap(store.episodes.size(), -1);
  for (std::size_t e = 0; e < store.episodes.size(); ++e) {
    const Episode& ep = store.episodes[e];
    if (!keep_episode(ep)) continue;
    if (per_domain[ep.domain] >= max_episodes_per_domain) continue;
    ++per_domain[ep.domain];
    remap[e] = static_cast<std::int64_t>(out.episodes.size());
    out.episodes.push_back(ep);
  }
  for (const auto& t : store.trajectories) {
    if (remap[t.episode] < 0 || static_cast<int>(t.init_index) >= max_inits) continue;
    Trajectory c = t;
    c.episode = static_cast<std::uint64_t>(remap[t.episode]);
    c.episode_offset = 0;
    out.trajectories.push_back(std::move(c));
  }
  if (out.trajectories.empty()) throw ConfigError("subset selects no trajectories");
  if (out.split == Split::kTrain) out.stats = compute_normalization_stats(out);
  return out;
}

// ---------------------------------------------------------------------------
// Binary format

namespace {

void put_vector(io::ByteWriter& w, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) w.f64(v(i));
}

Vector get_vector(io::ByteReader& r, int n) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v(i) = r.f64();
  return v;
}

void put_episode(io::ByteWriter& w, const Episode& ep) {
  w.u32(static_cast<std::uint32_t>(ep.domain));
  w.u8(static_cast<std::uint8_t>(ep.split));
  w.u32(static_cast<std::uint32_t>(ep.way));
  w.u64(ep.seed);
  for (int s : ep.shots) w.u32(static_cast<std::uint32_t>(s));
  for (auto id : ep.class_ids) w.u64(static_cast<std::uint64_t>(id));
  w.u32(static_cast<std::uint32_t>(ep.support.size()));
  w.u32(static_cast<std::uint32_t>(ep.support.x.cols()));
  for (Eigen::Index r = 0; r < ep.support.x.rows(); ++r)
    for (Eigen::Index c = 0; c < ep.support.x.cols(); ++c) w.f64(ep.support.x(r, c));
  for (int y : ep.support.y) w.u32(static_cast<std::uint32_t>(y));
}

Episode get_episode(io::ByteReader& r) {
  Episode ep;
  ep.domain = static_cast<int>(r.u32());
  const std::size_t split_at = r.offset();
  const std::uint8_t split = r.u8();
  if (split > 2) throw FormatError("trajectory store: bad split tag", split_at);
  ep.split = static_cast<Split>(split);
  ep.way = static_cast<int>(r.u32());
  ep.seed = r.u64();
  for (int c = 0; c < ep.way; ++c) ep.shots.push_back(static_cast<int>(r.u32()));
  for (int c = 0; c < ep.way; ++c) ep.class_ids.push_back(static_cast<std::int64_t>(r.u64()));
  const std::uint32_t n = r.u32(), d = r.u32();
  if (static_cast<std::uint64_t>(n) * d * 8 > r.size() - r.offset())
    throw FormatError("trajectory store: truncated episode table", r.offset());
  ep.support.x.resize(n, d);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t c = 0; c < d; ++c) ep.support.x(i, c) = r.f64();
  for (std::uint32_t i = 0; i < n; ++i) ep.support.y.push_back(static_cast<int>(r.u32()));
  ep.query.x.resize(0, d);
  return ep;
}

}  // namespace

std::vector<std::uint8_t> encode_store(TrajectoryStore& store) {
  io::ByteWriter w;
  w.bytes(std::string_view(kStoreMagic, 4));
  w.u32(kStoreVersion);
  w.u32(static_cast<std::uint32_t>(store.dim));
  w.u32(static_cast<std::uint32_t>(store.steps));
  w.u64(store.layout_hash);
  w.u8(static_cast<std::uint8_t>(store.sim.optimizer));
  w.f64(store.sim.lr);
  w.f64(store.sim.perturb_std);
  w.u8(static_cast<std::uint8_t>(store.split));
  w.u8(store.stats.empty() ? 0 : 1);
  if (!store.stats.empty()) {
    put_vector(w, store.stats.mean);
    put_vector(w, store.stats.std);
    put_vector(w, store.stats.drift_scale);
  }
  w.u64(store.episodes.size());
  w.u64(store.trajectories.size());
  std::vector<std::uint64_t> offsets;
  for (const auto& ep : store.episodes) {
    offsets.push_back(w.size());
    put_episode(w, ep);
  }
  for (auto& t : store.trajectories) {
    if (t.points.rows() != store.steps + 1 || t.points.cols() != store.dim || t.losses.size() != store.steps + 1)
      throw ShapeError("trajectory store: record shape does not match header");
    t.episode_offset = offsets.at(t.episode);
    w.u64(t.episode);
    w.u64(t.episode_offset);
    w.u32(t.init_index);
    w.u64(t.init_seed);
    w.f64(t.perturb_std);
    for (Eigen::Index k = 0; k < t.points.rows(); ++k)
      for (Eigen::Index j = 0; j < t.points.cols(); ++j) w.f64(t.points(k, j));
    put_vector(w, t.losses);
  }
  return w.buffer();
}

TrajectoryStore decode_store(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.size() < 4 || r.bytes(4) != std::string_view(kStoreMagic, 4))
    throw FormatError("trajectory store: bad magic bytes", 0);
  const std::uint32_t version = r.u32();
  if (version != kStoreVersion) throw FormatError("trajectory store: unsupported version " + std::to_string(version), 4);
  TrajectoryStore s;
  s.dim = static_cast<int>(r.u32());
  s.steps = static_cast<int>(r.u32());
  s.layout_hash = r.u64();
  const std::size_t opt_at = r.offset();
  const std::uint8_t opt = r.u8();
  if (opt > 1) throw FormatError("trajectory store: bad optimizer tag", opt_at);
  s.sim.optimizer = static_cast<OptimizerKind>(opt);
  s.sim.steps = s.steps;
  s.sim.lr = r.f64();
  s.sim.perturb_std = r.f64();
  const std::size_t split_at = r.offset();
  const std::uint8_t split = r.u8();
  if (split > 2) throw FormatError("trajectory store: bad split tag", split_at);
  s.split = static_cast<Split>(split);
  if (r.u8() != 0) {
    s.stats.mean = get_vector(r, s.dim);
    s.stats.std = get_vector(r, s.dim);
    s.stats.drift_scale = get_vector(r, s.dim);
  }
  const std::uint64_t n_ep = r.u64(), n_tr = r.u64();
  std::vector<std::uint64_t> offsets;
  for (std::uint64_t e = 0; e < n_ep; ++e) {
    offsets.push_back(r.offset());
    s.episodes.push_back(get_episode(r));
  }
  const std::uint64_t stride = 8 + 8 + 4 + 8 + 8 + 8ull * static_cast<std::uint64_t>(s.steps + 1) * (s.dim + 1);
  if (n_tr * stride != r.size() - r.offset())
    throw FormatError("trajectory store: record section has " + std::to_string(r.size() - r.offset()) +
                          " bytes, expected " + std::to_string(n_tr * stride),
                      r.offset());
  s.trajectories.reserve(n_tr);
  for (std::uint64_t i = 0; i < n_tr; ++i) {
    const std::size_t at = r.offset();
    Trajectory t;
    t.episode = r.u64();
    t.episode_offset = r.u64();
    if (t.episode >= n_ep || t.episode_offset != offsets[t.episode])
      throw FormatError("trajectory store: record references unknown episode", at);
    t.init_index = r.u32();
    t.init_seed = r.u64();
    t.perturb_std = r.f64();
    t.points.resize(s.steps + 1, s.dim);
    for (int k = 0; k <= s.steps; ++k)
      for (int j = 0; j < s.dim; ++j) t.points(k, j) = r.f64();
    t.losses = get_vector(r, s.steps + 1);
    s.trajectories.push_back(std::move(t));
  }
  return s;
}

void save_store(TrajectoryStore& store, const std::string& path) { io::write_file(path, encode_store(store)); }

TrajectoryStore load_store(const std::string& path) { return decode_store(io::read_file(path)); }

TrajectoryStore load_store(const std::string& path, std::uint64_t expected_layout_hash) {
  TrajectoryStore s = load_store(path);
  if (s.layout_hash != expected_layout_hash)
    throw CompatibilityError("trajectory store '" + path + "' was built for a different bias layout");
  return s;
}

}  // namespace gflow
