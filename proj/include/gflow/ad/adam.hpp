#pragma once

#include <cstdint>
#include <vector>

#include "gflow/ad/param_store.hpp"

namespace gflow::ad {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias-corrected moments. The state must be bound to a store with
/// init() before the first step; frozen entries are never touched.
template <typename Scalar>
class Adam {
 public:
  using Matrix = MatrixT<Scalar>;

  explicit Adam(AdamConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr > 0)) throw std::invalid_argument("Adam: learning rate must be positive");
    if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1)
      throw std::invalid_argument("Adam: betas must lie in [0, 1)");
  }

  void init(const ParamStore<Scalar>& store) {
    m_.clear();
    v_.clear();
    for (std::size_t i = 0; i < store.size(); ++i) {
      m_.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
      v_.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
    }
    step_ = 0;
    initialized_ = true;
  }

  void step(ParamStore<Scalar>& store) {
    if (!initialized_ || m_.size() != store.size()) throw std::logic_error("Adam: state not initialized for this store");
    ++step_;
    const Scalar bc1 = Scalar(1) - std::pow(Scalar(cfg_.beta1), Scalar(step_));
    const Scalar bc2 = Scalar(1) - std::pow(Scalar(cfg_.beta2), Scalar(step_));
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (!store.trainable(i)) continue;
      const Matrix& g = store.grad(i);
      m_[i] = Scalar(cfg_.beta1) * m_[i] + Scalar(1 - cfg_.beta1) * g;
      v_[i] = Scalar(cfg_.beta2) * v_[i] + Scalar(1 - cfg_.beta2) * g.cwiseProduct(g);
      auto mhat = m_[i].array() / bc1;
      auto vhat = v_[i].array() / bc2;
      store.value(i).array() -= Scalar(cfg_.lr) * mhat / (vhat.sqrt() + Scalar(cfg_.eps));
    }
  }

  std::int64_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t step_ = 0;
  bool initialized_ = false;
};

}  // namespace gflow::ad
