#pragma once

// Frozen-backbone prototype classifier whose bias vector is the adaptation
// target.
//
// The backbone is a stack of dense layers d -> h -> ... -> e with relu between
// layers (not after the last). Biases selected by a BiasLayout are read from
// an explicit parameter vector theta instead of the stored values, so
// adaptation never mutates the backbone.

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gflow/ad/eager.hpp"
#include "gflow/ad/graph.hpp"
#include "gflow/episodes.hpp"

namespace gflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct BiasSlot {
  int layer = 0;
  int offset = 0;
  int length = 0;
};

/// Map from theta coordinates to bias slots of the backbone. Slots are
/// contiguous and ordered by layer.
class BiasLayout {
 public:
  BiasLayout() = default;
  explicit BiasLayout(std::vector<BiasSlot> slots);

  const std::vector<BiasSlot>& slots() const { return slots_; }
  int size() const { return total_; }
  /// Slot for `layer`, or nullptr if that layer's bias is not adapted.
  const BiasSlot* find(int layer) const;
  std::uint64_t hash() const;

 private:
  std::vector<BiasSlot> slots_;
  int total_ = 0;
};

class Backbone {
 public:
  Backbone() = default;
  /// He-initialised weights, zero biases. dims = {d, h, ..., e}.
  static Backbone random(std::vector<int> dims, std::uint64_t seed);
  static Backbone from_store(ad::ParamStore<double> store, double temperature = 1.0);

  const std::vector<int>& dims() const { return dims_; }
  int depth() const { return static_cast<int>(dims_.size()) - 1; }
  int input_dim() const { return dims_.front(); }
  int embed_dim() const { return dims_.back(); }

  static std::string weight_name(int layer) { return "W" + std::to_string(layer); }
  static std::string bias_name(int layer) { return "b" + std::to_string(layer); }

  ad::ParamStore<double>& params() { return params_; }
  const ad::ParamStore<double>& params() const { return params_; }
  std::uint64_t checksum() const { return params_.checksum(); }

  /// Prototype-head temperature tau; logits are -tau * squared distance.
  double temperature() const { return temperature_; }
  void set_temperature(double tau);

 private:
  std::vector<int> dims_;
  ad::ParamStore<double> params_;
  double temperature_ = 1.0;
};

/// Checkpoint with meta kind=backbone and the temperature.
void save_backbone(const Backbone& backbone, const std::string& path);
Backbone load_backbone(const std::string& path);

/// Layout over the biases of `layers` (0-based); throws on empty selection.
BiasLayout make_bias_layout(const Backbone& backbone, const std::vector<int>& layers);
BiasLayout all_bias_layout(const Backbone& backbone);

/// Current backbone biases gathered into a theta vector.
Vector gather_bias(const Backbone& backbone, const BiasLayout& layout);
/// Copy of the backbone with theta written into its bias slots.
Backbone scatter_bias(const Backbone& backbone, const BiasLayout& layout, const Vector& theta);

struct BiasSelection {
  BiasLayout layout;
  Vector theta_init;
};
BiasSelection select_bias_params(const Backbone& backbone, const std::vector<int>& layers);

/// Averaging matrix (way x n) with entries 1/n_c on the examples of class c.
Matrix class_average_matrix(std::span<const int> labels, int way);

// ---------------------------------------------------------------------------
// Context-generic model expressions (Graph or eager::Context).

template <class Ctx, class Store>
typename Ctx::Value embed(Ctx& ctx, Store& params, int depth, const BiasLayout& layout,
                          const typename Ctx::Value& theta, typename Ctx::Value x) {
  using V = typename Ctx::Value;
  if (theta.rows() != 1 || theta.cols() != layout.size())
    throw ShapeError("embed: theta length " + std::to_string(theta.cols()) + " does not match layout " +
                     std::to_string(layout.size()));
  for (int l = 0; l < depth; ++l) {
    V w = ctx.param(params, Backbone::weight_name(l));
    const BiasSlot* slot = layout.find(l);
    V b = slot != nullptr ? slice_cols(theta, slot->offset, slot->length) : ctx.param(params, Backbone::bias_name(l));
    x = matmul(x, w) + b;
    if (l + 1 < depth) x = relu(x);
  }
  return x;
}

/// Class prototypes (way x e) of an embedded support set.
template <class Ctx>
typename Ctx::Value prototypes_of(Ctx& ctx, const typename Ctx::Value& support_embeddings, std::span<const int> labels,
                                  int way) {
  return matmul(ctx.constant(class_average_matrix(labels, way)), support_embeddings);
}

template <class V>
V prototype_logits(const V& embeddings, const V& prototypes, double temperature) {
  return (-temperature) * sq_dist(embeddings, prototypes);
}

// ---------------------------------------------------------------------------
// Eager conveniences.

Matrix embed(const Backbone& backbone, const BiasLayout& layout, const Vector& theta, const Matrix& x);
Matrix prototypes(const Backbone& backbone, const BiasLayout& layout, const Vector& theta, const Examples& support,
                  int way);

/// Summed cross-entropy of the support set against prototypes built from the
/// same support set.
double support_loss(const Backbone& backbone, const BiasLayout& layout, const Vector& theta, const Examples& support,
                    int way);

struct LossGrad {
  double loss = 0;
  Vector grad;
};
LossGrad support_loss_grad(const Backbone& backbone, const BiasLayout& layout, const Vector& theta,
                           const Examples& support, int way);

std::vector<int> classify(const Backbone& backbone, const BiasLayout& layout, const Vector& theta,
                          const Examples& support, int way, const Matrix& queries);
double query_accuracy(const Backbone& backbone, const BiasLayout& layout, const Vector& theta, const Episode& episode);

// ---------------------------------------------------------------------------

struct MetaTrainConfig {
  std::vector<int> dims{16, 32, 32};
  int epochs = 30;
  int episodes_per_epoch = 200;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  Protocol protocol = Protocol::various();
};

struct MetaTrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
};

/// Episodic prototype training on base-domain train-split episodes (query
/// loss given support prototypes). All parameters are frozen on return.
Backbone meta_train_backbone(const std::vector<DomainSpec>& base_domains, const MetaTrainConfig& cfg,
                             MetaTrainReport* report = nullptr);

}  // namespace gflow
