#include "gflow/target_model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gflow/ad/adam.hpp"
#include "gflow/ad/checkpoint.hpp"
#include "gflow/error.hpp"
#include "gflow/rng.hpp"

namespace gflow {

BiasLayout::BiasLayout(std::vector<BiasSlot> slots) : slots_(std::move(slots)) {
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].offset != total_) throw ShapeError("BiasLayout: slots must be contiguous");
    if (slots_[i].length <= 0) throw ShapeError("BiasLayout: empty slot");
    if (i > 0 && slots_[i].layer <= slots_[i - 1].layer) throw ShapeError("BiasLayout: slots must be ordered by layer");
    total_ += slots_[i].length;
  }
}

const BiasSlot* BiasLayout::find(int layer) const {
  for (const auto& s : slots_)
    if (s.layer == layer) return &s;
  return nullptr;
}

std::uint64_t BiasLayout::hash() const {
  std::uint64_t h = splitmix64(0x6c61796f7574ull);
  for (const auto& s : slots_) {
    h = splitmix64(h ^ static_cast<std::uint64_t>(s.layer));
    h = splitmix64(h ^ static_cast<std::uint64_t>(s.offset));
    h = splitmix64(h ^ static_cast<std::uint64_t>(s.length));
  }
  return h;
}

Backbone Backbone::random(std::vector<int> dims, std::uint64_t seed) {
  if (dims.size() < 2) throw ShapeError("Backbone: need at least one layer");
  Backbone b;
  b.dims_ = std::move(dims);
  Rng rng(derive_seed(seed, {0x6262}));
  for (int l = 0; l < b.depth(); ++l) {
    const int in = b.dims_[l], out = b.dims_[l + 1];
    b.params_.add(weight_name(l), rng.normal_matrix(in, out, std::sqrt(2.0 / in)));
    b.params_.add(bias_name(l), Matrix::Zero(1, out));
  }
  return b;
}

Backbone Backbone::from_store(ad::ParamStore<double> store, double temperature) {
  Backbone b;
  int l = 0;
  while (store.contains(weight_name(l))) {
    const Matrix& w = store.value(weight_name(l));
    if (!store.contains(bias_name(l))) throw ShapeError("Backbone: missing " + bias_name(l));
    const Matrix& bias = store.value(bias_name(l));
    if (l == 0) b.dims_.push_back(static_cast<int>(w.rows()));
    if (w.rows() != b.dims_.back() || bias.rows() != 1 || bias.cols() != w.cols())
      throw ShapeError("Backbone: inconsistent shapes at layer " + std::to_string(l));
    b.dims_.push_back(static_cast<int>(w.cols()));
    ++l;
  }
  if (l == 0) throw ShapeError("Backbone: store holds no layers");
  b.params_ = std::move(store);
  b.set_temperature(temperature);
  return b;
}

void Backbone::set_temperature(double tau) {
  if (!(tau > 0) || !std::isfinite(tau)) throw ConfigError("temperature must be positive");
  temperature_ = tau;
}

BiasLayout make_bias_layout(const Backbone& backbone, const std::vector<int>& layers) {
  if (layers.empty()) throw ConfigError("bias selection is empty");
  std::vector<int> sorted = layers;
  std::sort(sorted.begin(), sorted.end());
  std::vector<BiasSlot> slots;
  int offset = 0;
  for (int l : sorted) {
    if (l < 0 || l >= backbone.depth()) throw ConfigError("bias selection: no layer " + std::to_string(l));
    if (!slots.empty() && slots.back().layer == l) continue;
    const int len = backbone.dims()[l + 1];
    slots.push_back({l, offset, len});
    offset += len;
  }
  return BiasLayout(std::move(slots));
}

BiasLayout all_bias_layout(const Backbone& backbone) {
  std::vector<int> layers(backbone.depth());
  for (int l = 0; l < backbone.depth(); ++l) layers[l] = l;
  return make_bias_layout(backbone, layers);
}

Vector gather_bias(const Backbone& backbone, const BiasLayout& layout) {
  Vector theta(layout.size());
  for (const auto& s : layout.slots())
    theta.segment(s.offset, s.length) = backbone.params().value(Backbone::bias_name(s.layer)).row(0).transpose();
  return theta;
}

Backbone scatter_bias(const Backbone& backbone, const BiasLayout& layout, const Vector& theta) {
  if (theta.size() != layout.size()) throw ShapeError("scatter_bias: theta length does not match layout");
  Backbone out = backbone;
  for (const auto& s : layout.slots())
    out.params().value(Backbone::bias_name(s.layer)).row(0) = theta.segment(s.offset, s.length).transpose();
  return out;
}

BiasSelection select_bias_params(const Backbone& backbone, const std::vector<int>& layers) {
  BiasSelection sel;
  sel.layout = make_bias_layout(backbone, layers);
  sel.theta_init = gather_bias(backbone, sel.layout);
  return sel;
}

Matrix class_average_matrix(std::span<const int> labels, int way) {
  if (way < 1) throw ShapeError("class_average_matrix: way must be positive");
  std::vector<int> count(way, 0);
  for (int y : labels) {
    if (y < 0 || y >= way) throw ShapeError("class_average_matrix: label out of range");
    ++count[y];
  }
  for (int c = 0; c < way; ++c)
    if (count[c] == 0) throw ShapeError("class " + std::to_string(c) + " has no support examples");
  Matrix a = Matrix::Zero(way, static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) a(labels[i], static_cast<Eigen::Index>(i)) = 1.0 / count[labels[i]];
  return a;
}

namespace {

void require_multi_class(int way) {
  if (way < 2) throw ShapeError("support loss needs at least two classes");
}

Matrix row_of(const Vector& theta) { return theta.transpose(); }

}  // namespace

Matrix embed(const Backbone& backbone, const BiasLayout& layout, const Vector& theta, const Matrix& x) {
  eager::Context ctx;
  const Matrix th = row_of(theta);
  return embed(ctx, backbone.params(), backbone.depth(), layout, ctx.view(th), ctx.view(x)).value();
}

Matrix prototypes(const Backbone& backbone, const BiasLayout& layout, const Vector& theta, const Examples& support,
                  int way) {
  return class_average_matrix(support.y, way) * embed(backbone, layout, theta, support.x);
}

double support_loss(const Backbone& backbone, const BiasLayout& layout, const Vector& theta, const Examples& support,
                    int way) {
  require_multi_class(way);
  eager::Context ctx;
  const Matrix th = row_of(theta);
  auto e = embed(ctx, backbone.params(), backbone.depth(), layout, ctx.view(th), ctx.view(support.x));
  auto p = prototypes_of(ctx, e, support.y, way);
  auto logits = prototype_logits(e, p, backbone.temperature());
  return softmax_cross_entropy(logits, support.y).value()(0, 0);
}

LossGrad support_loss_grad(const Backbone& backbone, const BiasLayout& layout, const Vector& theta,
                           const Examples& support, int way) {
  require_multi_class(way);
  ad::Graph<double> g;
  auto th = g.variable(row_of(theta));
  auto e = embed(g, backbone.params(), backbone.depth(), layout, th, g.view(support.x));
  auto p = prototypes_of(g, e, support.y, way);
  auto loss = softmax_cross_entropy(prototype_logits(e, p, backbone.temperature()), support.y);
  g.backward(loss);
  return {loss.value()(0, 0), g.grad(th).row(0).transpose()};
}

std::vector<int> classify(const Backbone& backbone, const BiasLayout& layout, const Vector& theta,
                          const Examples& support, int way, const Matrix& queries) {
  const Matrix protos = prototypes(backbone, layout, theta, support, way);
  const Matrix q = embed(backbone, layout, theta, queries);
  const Matrix d = ad::kernels::sq_dist<double>(q, protos);
  std::vector<int> out(static_cast<std::size_t>(q.rows()));
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    Eigen::Index arg = 0;
    d.row(i).minCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

double query_accuracy(const Backbone& backbone, const BiasLayout& layout, const Vector& theta, const Episode& episode) {
  if (episode.query.size() == 0) throw ShapeError("query_accuracy: episode has no queries");
  const auto pred = classify(backbone, layout, theta, episode.support, episode.way, episode.query.x);
  int hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == episode.query.y[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

Backbone meta_train_backbone(const std::vector<DomainSpec>& base_domains, const MetaTrainConfig& cfg,
                             MetaTrainReport* report) {
  if (base_domains.empty()) throw ConfigError("meta-training needs at least one base domain");
  for (const auto& d : base_domains)
    if (d.severity != Severity::kBase) throw ConfigError("meta-training accepts base domains only");
  if (cfg.dims.empty() || cfg.dims.front() != base_domains.front().dim)
    throw ConfigError("backbone input width does not match domain dimension");

  Backbone net = Backbone::random(cfg.dims, derive_seed(cfg.seed, {1}));
  auto& store = net.params();
  ad::Adam<double> adam({.lr = cfg.lr});
  adam.init(store);
  const BiasLayout none;
  const Matrix no_theta(1, 0);
  const std::uint64_t stream = derive_seed(cfg.seed, {2});
  const auto n_dom = static_cast<std::uint64_t>(base_domains.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0, acc_sum = 0;
    for (int i = 0; i < cfg.episodes_per_epoch; ++i) {
      const auto index = static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(cfg.episodes_per_epoch) +
                         static_cast<std::uint64_t>(i);
      const DomainSpec& dom = base_domains[index % n_dom];
      const Episode ep = sample_episode(dom, cfg.protocol, Split::kTrain, episode_seed(stream, dom.id, Split::kTrain, index));

      store.zero_grad();
      ad::Graph<double> g;
      auto th = g.constant(no_theta);
      auto es = embed(g, store, net.depth(), none, th, g.view(ep.support.x));
      auto eq = embed(g, store, net.depth(), none, th, g.view(ep.query.x));
      auto p = prototypes_of(g, es, ep.support.y, ep.way);
      auto logits = prototype_logits(eq, p, net.temperature());
      auto loss = softmax_cross_entropy(logits, ep.query.y, ad::Reduction::kMean);
      const double lv = loss.value()(0, 0);
      if (!std::isfinite(lv)) {
        std::ostringstream msg;
        msg << "meta-training diverged at epoch " << epoch << " episode " << i << " (loss " << lv << ")";
        throw NumericError(msg.str());
      }
      g.backward(loss);
      adam.step(store);

      int hits = 0;
      const Matrix& lg = logits.value();
      for (Eigen::Index r = 0; r < lg.rows(); ++r) {
        Eigen::Index arg = 0;
        lg.row(r).maxCoeff(&arg);
        hits += arg == ep.query.y[static_cast<std::size_t>(r)] ? 1 : 0;
      }
      loss_sum += lv;
      acc_sum += static_cast<double>(hits) / static_cast<double>(lg.rows());
    }
    if (report != nullptr) {
      report->epoch_loss.push_back(loss_sum / cfg.episodes_per_epoch);
      report->epoch_accuracy.push_back(acc_sum / cfg.episodes_per_epoch);
    }
  }
  store.freeze_all();
  return net;
}

void save_backbone(const Backbone& backbone, const std::string& path) {
  char tau[32];
  std::snprintf(tau, sizeof tau, "%.17g", backbone.temperature());
  ad::save_checkpoint(path, backbone.params(), {{"kind", "backbone"}, {"temperature", tau}});
}

Backbone load_backbone(const std::string& path) {
  ad::Checkpoint ck = ad::load_checkpoint(path);
  auto kind = ck.meta.find("kind");
  if (kind == ck.meta.end() || kind->second != "backbone")
    throw FormatError("checkpoint '" + path + "' is not a backbone");
  auto tau = ck.meta.find("temperature");
  if (tau == ck.meta.end()) throw FormatError("backbone checkpoint: missing temperature");
  return Backbone::from_store(std::move(ck.tensors), std::stod(tau->second));
}

}  // namespace gflow
