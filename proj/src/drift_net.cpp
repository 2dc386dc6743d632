#include "gflow/drift_net.hpp"

#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "gflow/ad/adam.hpp"
#include "gflow/ad/checkpoint.hpp"
#include "gflow/rng.hpp"

namespace gflow {

std::string drift_units(FlowObjective objective) {
  return objective == FlowObjective::kCubic ? "per-knot" : "per-normalized-time";
}

DriftNet::DriftNet(DriftArch arch, Backbone encoder, BiasLayout layout, int steps, FlowObjective objective,
                   NormStats stats, std::uint64_t seed)
    : arch_(std::move(arch)),
      encoder_(std::move(encoder)),
      layout_(std::move(layout)),
      steps_(steps),
      objective_(objective),
      stats_(std::move(stats)) {
  if (steps_ < 1) throw ConfigError("drift net: horizon T must be at least 1");
  if (arch_.theta_dim != layout_.size()) throw ShapeError("drift net: theta width does not match layout");
  if (arch_.proto_dim != encoder_.embed_dim()) throw ShapeError("drift net: prototype width does not match encoder");
  if (stats_.mean.size() != arch_.theta_dim) throw ShapeError("drift net: normalization statistics have wrong length");
  encoder_.params().freeze_all();

  Rng rng(derive_seed(seed, {0x64726966}));
  const int w = arch_.width;
  auto dense = [&](const std::string& wn, const std::string& bn, int in, int out) {
    params_.add(wn, rng.normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in))));
    params_.add(bn, Matrix::Zero(1, out));
  };
  auto norm = [&](const std::string& prefix) {
    params_.add(prefix + ".g", Matrix::Ones(1, w));
    params_.add(prefix + ".b", Matrix::Zero(1, w));
  };
  params_.add("token", rng.normal_matrix(1, w, 1.0));
  dense("proj.W", "proj.b", arch_.proto_dim, w);
  for (int b = 0; b < arch_.blocks; ++b) {
    norm(drift::blk(b, "ln1"));
    for (const char* m : {"Wq", "Wk", "Wv"})
      params_.add(drift::blk(b, m), rng.normal_matrix(w, w, 1.0 / std::sqrt(static_cast<double>(w))));
    dense(drift::blk(b, "Wo"), drift::blk(b, "bo"), w, w);
    norm(drift::blk(b, "ln2"));
    dense(drift::blk(b, "W1"), drift::blk(b, "b1"), w, arch_.ff);
    dense(drift::blk(b, "W2"), drift::blk(b, "b2"), arch_.ff, w);
  }
  norm("lnf");
  dense("emb_theta.W", "emb_theta.b", arch_.theta_dim, w);
  dense("emb_t.W", "emb_t.b", 1, w);
  int in = w;
  for (std::size_t l = 0; l < arch_.hidden.size(); ++l) {
    dense(drift::dec(static_cast<int>(l), "W"), drift::dec(static_cast<int>(l), "b"), in, arch_.hidden[l]);
    in = arch_.hidden[l];
  }
  const int last = static_cast<int>(arch_.hidden.size());
  dense(drift::dec(last, "W"), drift::dec(last, "b"), in, arch_.theta_dim);
}

Matrix DriftNet::task_prototypes(const Examples& support, int way) const {
  if (support.size() == 0) throw ShapeError("encode_task: empty support");
  return prototypes(encoder_, BiasLayout{}, Vector(0), support, way);
}

FlowBatch make_flow_batch(const std::vector<FlowSample>& samples, const std::vector<Matrix>& protos, int steps) {
  if (samples.empty()) throw ShapeError("flow batch: no samples");
  FlowBatch b;
  const auto n = static_cast<Eigen::Index>(samples.size());
  const auto p = samples.front().theta.size();
  b.theta.resize(n, p);
  b.v.resize(n, p);
  b.tnorm.resize(n, 1);
  std::map<std::uint64_t, int> slot;
  for (Eigen::Index i = 0; i < n; ++i) {
    const FlowSample& s = samples[static_cast<std::size_t>(i)];
    auto [it, fresh] = slot.try_emplace(s.episode, static_cast<int>(b.task_protos.size()));
    if (fresh) b.task_protos.push_back(&protos.at(s.episode));
    b.task_of.push_back(it->second);
    b.theta.row(i) = s.theta.transpose();
    b.v.row(i) = s.v.transpose();
    b.tnorm(i, 0) = s.t / static_cast<double>(steps);
  }
  return b;
}

double flow_matching_loss(const DriftNet& net, const FlowBatch& batch) {
  eager::Context ctx;
  return flow_matching_loss(ctx, net.params(), net.arch(), batch).value()(0, 0);
}

std::vector<Matrix> store_prototypes(const DriftNet& net, const TrajectoryStore& store) {
  std::vector<Matrix> out;
  out.reserve(store.episodes.size());
  for (const auto& ep : store.episodes) out.push_back(net.task_prototypes(ep.support, ep.way));
  return out;
}

FlowBatch validation_batch(const DriftNet& net, const TrajectoryStore& store, const std::vector<Matrix>& protos,
                           int samples, std::uint64_t seed) {
  TrajectoryStore view = store;
  view.stats = net.stats();
  return make_flow_batch(sample_batch(view, net.objective(), {samples, 1}, seed), protos, net.steps());
}

namespace {

void check_compatible(const DriftNet& net, const TrajectoryStore& s, const char* which) {
  if (s.layout_hash != net.layout_hash() || s.dim != net.arch().theta_dim)
    throw CompatibilityError(std::string(which) + " store was built for a different bias layout");
  if (s.steps != net.steps()) throw CompatibilityError(std::string(which) + " store has a different horizon T");
}

}  // namespace

DriftNet train_drift(DriftNet net, const TrajectoryStore& train, const TrajectoryStore& val,
                     const DriftTrainConfig& cfg, DriftTrainReport* report) {
  if (cfg.patience < 1) throw ConfigError("drift training: patience must be at least 1");
  if (cfg.eval_every < 1 || cfg.batch < 1) throw ConfigError("drift training: eval_every and batch must be positive");
  check_compatible(net, train, "train");
  check_compatible(net, val, "validation");
  TrajectoryStore train_view = train;
  train_view.stats = net.stats();

  const auto train_protos = store_prototypes(net, train);
  const auto val_protos = store_prototypes(net, val);
  const FlowBatch val_batch = validation_batch(net, val, val_protos, cfg.val_samples, derive_seed(cfg.seed, {0x76616c}));

  auto& store = net.params();
  ad::Adam<double> adam({.lr = cfg.lr});
  adam.init(store);
  DriftTrainReport rep;
  rep.initial_val_loss = flow_matching_loss(net, val_batch);
  rep.best_val_loss = rep.initial_val_loss;
  ad::ParamStore<double> best = store;
  int stale = 0;
  double window = 0;
  int window_n = 0;
  const std::uint64_t stream = derive_seed(cfg.seed, {0x747261696e});

  for (int step = 1; step <= cfg.max_steps; ++step) {
    const auto samples = sample_batch(train_view, net.objective(), {cfg.batch, cfg.per_trajectory},
                                      derive_seed(stream, {static_cast<std::uint64_t>(step)}));
    const FlowBatch batch = make_flow_batch(samples, train_protos, net.steps());
    store.zero_grad();
    ad::Graph<double> g;
    auto loss = flow_matching_loss(g, store, net.arch(), batch);
    const double lv = loss.value()(0, 0);
    if (!std::isfinite(lv)) throw NumericError("drift training diverged at step " + std::to_string(step));
    g.backward(loss);
    adam.step(store);
    window += lv;
    ++window_n;
    rep.steps_run = step;

    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double vl = flow_matching_loss(net, val_batch);
      rep.eval_step.push_back(step);
      rep.train_loss.push_back(window / window_n);
      rep.val_loss.push_back(vl);
      window = 0;
      window_n = 0;
      if (vl < rep.best_val_loss) {
        rep.best_val_loss = vl;
        rep.best_step = step;
        best = store;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        rep.early_stopped = true;
        break;
      }
    }
  }
  store = std::move(best);
  if (report != nullptr) *report = std::move(rep);
  return net;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kEncoderPrefix = "encoder.";

Matrix row(const Vector& v) { return v.transpose(); }

std::string exact(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string arch_hidden(const DriftArch& a) {
  std::string s;
  for (std::size_t i = 0; i < a.hidden.size(); ++i) s += (i ? "," : "") + std::to_string(a.hidden[i]);
  return s;
}

int meta_int(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("drift checkpoint: missing field '" + key + "'");
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw FormatError("drift checkpoint: bad value for '" + key + "'");
  }
}

const std::string& meta_str(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("drift checkpoint: missing field '" + key + "'");
  return it->second;
}

}  // namespace

void save_drift(const DriftNet& net, const std::string& path) {
  ad::ParamStore<double> all = net.params();
  const auto& enc = net.encoder().params();
  for (std::size_t i = 0; i < enc.size(); ++i) all.add(kEncoderPrefix + enc.name(i), enc.value(i), false);
  all.add("norm.mean", row(net.stats().mean), false);
  all.add("norm.std", row(net.stats().std), false);
  all.add("norm.drift_scale", row(net.stats().drift_scale), false);
  std::string slots;
  for (const auto& s : net.layout().slots())
    slots += (slots.empty() ? "" : ";") + std::to_string(s.layer) + ":" + std::to_string(s.offset) + ":" +
             std::to_string(s.length);
  std::map<std::string, std::string> meta{
      {"kind", "drift"},
      {"layout_hash", std::to_string(net.layout_hash())},
      {"layout", slots},
      {"steps", std::to_string(net.steps())},
      {"objective", to_string(net.objective())},
      {"drift_units", drift_units(net.objective())},
      {"temperature", exact(net.encoder().temperature())},
      {"arch.theta_dim", std::to_string(net.arch().theta_dim)},
      {"arch.proto_dim", std::to_string(net.arch().proto_dim)},
      {"arch.width", std::to_string(net.arch().width)},
      {"arch.ff", std::to_string(net.arch().ff)},
      {"arch.blocks", std::to_string(net.arch().blocks)},
      {"arch.hidden", arch_hidden(net.arch())},
  };
  ad::save_checkpoint(path, all, meta);
}

DriftNet load_drift(const std::string& path) {
  ad::Checkpoint ck = ad::load_checkpoint(path);
  const auto& meta = ck.meta;
  if (meta_str(meta, "kind") != "drift") throw FormatError("checkpoint '" + path + "' is not a drift network");
  DriftNet net;
  net.arch_.theta_dim = meta_int(meta, "arch.theta_dim");
  net.arch_.proto_dim = meta_int(meta, "arch.proto_dim");
  net.arch_.width = meta_int(meta, "arch.width");
  net.arch_.ff = meta_int(meta, "arch.ff");
  net.arch_.blocks = meta_int(meta, "arch.blocks");
  net.arch_.hidden.clear();
  {
    std::stringstream ss(meta_str(meta, "arch.hidden"));
    std::string tok;
    while (std::getline(ss, tok, ',')) net.arch_.hidden.push_back(std::stoi(tok));
  }
  net.steps_ = meta_int(meta, "steps");
  net.objective_ = objective_from_string(meta_str(meta, "objective"));
  if (meta_str(meta, "drift_units") != drift_units(net.objective_))
    throw CompatibilityError("drift checkpoint: drift units '" + meta_str(meta, "drift_units") +
                             "' do not match objective " + to_string(net.objective_));

  std::vector<BiasSlot> slots;
  {
    std::stringstream ss(meta_str(meta, "layout"));
    std::string tok;
    while (std::getline(ss, tok, ';')) {
      BiasSlot s;
      if (std::sscanf(tok.c_str(), "%d:%d:%d", &s.layer, &s.offset, &s.length) != 3)
        throw FormatError("drift checkpoint: bad layout entry '" + tok + "'");
      slots.push_back(s);
    }
  }
  net.layout_ = BiasLayout(std::move(slots));
  if (std::to_string(net.layout_.hash()) != meta_str(meta, "layout_hash"))
    throw FormatError("drift checkpoint: layout does not match its recorded hash");

  ad::ParamStore<double> enc;
  const std::string prefix = kEncoderPrefix;
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    const std::string& name = ck.tensors.name(i);
    if (name.rfind(prefix, 0) == 0)
      enc.add(name.substr(prefix.size()), ck.tensors.value(i), false);
    else if (name.rfind("norm.", 0) != 0)
      net.params_.add(name, ck.tensors.value(i), true);
  }
  net.encoder_ = Backbone::from_store(std::move(enc), std::stod(meta_str(meta, "temperature")));
  net.stats_.mean = ck.tensors.value("norm.mean").row(0).transpose();
  net.stats_.std = ck.tensors.value("norm.std").row(0).transpose();
  net.stats_.drift_scale = ck.tensors.value("norm.drift_scale").row(0).transpose();
  if (net.stats_.mean.size() != net.arch_.theta_dim || net.layout_.size() != net.arch_.theta_dim)
    throw FormatError("drift checkpoint: statistics or layout disagree with theta width");
  return net;
}

DriftNet load_drift_for_solve(const std::string& path, std::uint64_t layout_hash) {
  DriftNet net = load_drift(path);
  if (net.layout_hash() != layout_hash)
    throw CompatibilityError("drift checkpoint '" + path + "' was trained for a different bias layout");
  return net;
}

}  // namespace gflow
