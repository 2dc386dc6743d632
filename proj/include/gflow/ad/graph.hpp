#pragma once

// Tape-based reverse-mode differentiation over dense Eigen matrices.
//
// A Graph owns every intermediate value produced while it is alive. Nodes are
// appended in evaluation order, so the tape order is already topological and
// backward() walks it in reverse exactly once.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "gflow/ad/kernels.hpp"
#include "gflow/ad/param_store.hpp"

namespace gflow::ad {

/// Per-thread operation counters, read by the adaptation engines to prove
/// which passes actually ran.
struct Counters {
  std::uint64_t graph_nodes = 0;
  std::uint64_t eager_ops = 0;
  std::uint64_t backward_passes = 0;
};

Counters& thread_counters();

template <typename Scalar>
class Graph;

template <typename Scalar>
class Var {
 public:
  using Matrix = MatrixT<Scalar>;

  Var() = default;
  Var(Graph<Scalar>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const { return graph_->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  Graph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Graph {
 public:
  using ScalarType = Scalar;
  using Matrix = MatrixT<Scalar>;
  using Value = Var<Scalar>;
  using BackwardFn = std::function<void(Graph&, const Matrix& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Value constant(Matrix m) { return push(std::move(m), false, {}); }
  Value view(const Matrix& m) { return push(m, false, {}); }

  /// Leaf whose gradient is read back with grad().
  Value variable(Matrix m) { return push(std::move(m), true, {}); }

  /// Leaf bound to a ParamStore slot. Frozen parameters enter as constants.
  Value param(ParamStore<Scalar>& store, std::size_t i) {
    const bool trainable = store.trainable(i);
    Value v = push(store.value(i), trainable, {});
    if (trainable) bindings_.push_back({v.id(), &store, i});
    return v;
  }
  Value param(ParamStore<Scalar>& store, std::string_view name) { return param(store, store.index(name)); }
  /// Read-only stores always enter as constants.
  Value param(const ParamStore<Scalar>& store, std::size_t i) { return view(store.value(i)); }
  Value param(const ParamStore<Scalar>& store, std::string_view name) { return view(store.value(name)); }

  /// Appends an op result. backward receives the output gradient and must
  /// call accumulate() on each differentiable input.
  Value record(Matrix value, const char* op, std::initializer_list<Value> inputs, BackwardFn backward) {
    kernels::require_finite(value, op);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }
  Value record(Matrix value, const char* op, std::span<const Value> inputs, BackwardFn backward) {
    kernels::require_finite(value, op);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  bool requires_grad(const Value& v) const { return nodes_[v.id()].requires_grad; }
  const Matrix& value(const Value& v) const { return nodes_[v.id()].value; }

  void accumulate(const Value& v, const Matrix& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Reverse sweep from a 1 x 1 loss. Trainable parameter gradients are added
  /// into their ParamStore slots. A graph supports a single sweep.
  void backward(const Value& loss) {
    if (backward_done_) throw std::logic_error("Graph::backward called twice on the same graph");
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1)
      throw ShapeError("backward: loss must be scalar, got " + kernels::shape_str(lv.rows(), lv.cols()));
    backward_done_ = true;
    ++thread_counters().backward_passes;
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      // The closure may append into other nodes' grads but never into this one.
      const Matrix g = n.grad;
      n.backward(*this, g);
    }
    for (const auto& b : bindings_) {
      const Matrix& g = nodes_[b.node].grad;
      if (g.size() != 0) b.store->grad(b.index) += g;
    }
  }

  /// Gradient of the last backward() target with respect to v (zeros if v
  /// did not influence it).
  Matrix grad(const Value& v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Bytes held by node values and gradients, i.e. the retained graph.
  std::size_t retained_bytes() const {
    std::size_t total = 0;
    for (const auto& n : nodes_) total += sizeof(Scalar) * static_cast<std::size_t>(n.value.size() + n.grad.size());
    return total;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  struct Binding {
    std::size_t node;
    ParamStore<Scalar>* store;
    std::size_t index;
  };

  Value push(Matrix m, bool requires_grad, BackwardFn fn) {
    nodes_.push_back({std::move(m), Matrix(), std::move(fn), requires_grad});
    ++thread_counters().graph_nodes;
    return Value(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<Binding> bindings_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Each mirrors a forward kernel.

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& g = a.graph();
  return g.record(kernels::matmul<Scalar>(a.value(), b.value()), "matmul", {a, b},
                  [a, b](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    if (g.requires_grad(a)) g.accumulate(a, G * b.value().transpose());
                    if (g.requires_grad(b)) g.accumulate(b, a.value().transpose() * G);
                  });
}

template <typename Scalar>
Var<Scalar> matmul_bt(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& g = a.graph();
  return g.record(kernels::matmul_bt<Scalar>(a.value(), b.value()), "matmul_bt", {a, b},
                  [a, b](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    if (g.requires_grad(a)) g.accumulate(a, G * b.value());
                    if (g.requires_grad(b)) g.accumulate(b, G.transpose() * a.value());
                  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& g = a.graph();
  const bool broadcast = b.rows() == 1 && a.rows() != 1;
  return g.record(kernels::add<Scalar>(a.value(), b.value()), "add", {a, b},
                  [a, b, broadcast](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    g.accumulate(a, G);
                    if (broadcast)
                      g.accumulate(b, G.colwise().sum());
                    else
                      g.accumulate(b, G);
                  });
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& g = a.graph();
  return g.record(kernels::sub<Scalar>(a.value(), b.value()), "sub", {a, b},
                  [a, b](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    g.accumulate(a, G);
                    g.accumulate(b, -G);
                  });
}

template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) {
  auto& g = a.graph();
  return g.record(MatrixT<Scalar>(s * a.value()), "scale", {a},
                  [a, s](Graph<Scalar>& g, const MatrixT<Scalar>& G) { g.accumulate(a, s * G); });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  auto& g = a.graph();
  return g.record(kernels::relu<Scalar>(a.value()), "relu", {a}, [a](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
    g.accumulate(a, MatrixT<Scalar>(G.array() * (a.value().array() > Scalar(0)).template cast<Scalar>()));
  });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  auto& g = a.graph();
  return g.record(MatrixT<Scalar>(a.value().array().square()), "square", {a},
                  [a](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    g.accumulate(a, MatrixT<Scalar>(Scalar(2) * a.value().array() * G.array()));
                  });
}

template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  auto& g = a.graph();
  MatrixT<Scalar> y = kernels::softmax_rows<Scalar>(a.value());
  return g.record(y, "softmax", {a}, [a, y](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
    MatrixT<Scalar> dot = (G.array() * y.array()).rowwise().sum();
    MatrixT<Scalar> dx = (y.array() * (G.colwise() - dot.col(0)).array()).matrix();
    g.accumulate(a, dx);
  });
}

/// Cross-entropy of softmax(logits) against integer labels, as a 1 x 1 value.
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::vector<int> labels,
                                  Reduction red = Reduction::kSum) {
  auto& g = logits.graph();
  const Scalar loss = kernels::softmax_cross_entropy<Scalar>(logits.value(), labels, red);
  MatrixT<Scalar> out(1, 1);
  out(0, 0) = loss;
  return g.record(std::move(out), "softmax_cross_entropy", {logits},
                  [logits, labels = std::move(labels), red](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    MatrixT<Scalar> p = kernels::softmax_rows<Scalar>(logits.value());
                    for (std::size_t i = 0; i < labels.size(); ++i) p(static_cast<Eigen::Index>(i), labels[i]) -= 1;
                    Scalar s = G(0, 0);
                    if (red == Reduction::kMean) s /= static_cast<Scalar>(labels.size());
                    g.accumulate(logits, MatrixT<Scalar>(s * p));
                  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  auto& g = a.graph();
  MatrixT<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record(std::move(out), "sum", {a}, [a](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
    g.accumulate(a, MatrixT<Scalar>::Constant(a.rows(), a.cols(), G(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  const Scalar n = static_cast<Scalar>(a.value().size());
  return (Scalar(1) / n) * sum(a);
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps = 1e-5) {
  auto& g = x.graph();
  kernels::LayerNormCache<Scalar> cache;
  MatrixT<Scalar> y = kernels::layer_norm<Scalar>(x.value(), gamma.value(), beta.value(), eps, &cache);
  return g.record(std::move(y), "layer_norm", {x, gamma, beta},
                  [x, gamma, beta, cache = std::move(cache)](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    const auto& xhat = cache.xhat;
                    if (g.requires_grad(gamma))
                      g.accumulate(gamma, MatrixT<Scalar>((G.array() * xhat.array()).colwise().sum()));
                    if (g.requires_grad(beta)) g.accumulate(beta, MatrixT<Scalar>(G.colwise().sum()));
                    if (g.requires_grad(x)) {
                      MatrixT<Scalar> dxhat = (G.array().rowwise() * gamma.value().row(0).array()).matrix();
                      const Scalar n = static_cast<Scalar>(xhat.cols());
                      MatrixT<Scalar> dx(xhat.rows(), xhat.cols());
                      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                        const Scalar m1 = dxhat.row(i).sum() / n;
                        const Scalar m2 = dxhat.row(i).dot(xhat.row(i)) / n;
                        dx.row(i) = cache.inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
                      }
                      g.accumulate(x, dx);
                    }
                  });
}

/// out(i, j) = ||a_i - b_j||^2
template <typename Scalar>
Var<Scalar> sq_dist(const Var<Scalar>& a, const Var<Scalar>& b) {
  auto& g = a.graph();
  return g.record(kernels::sq_dist<Scalar>(a.value(), b.value()), "sq_dist", {a, b},
                  [a, b](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    const auto& A = a.value();
                    const auto& B = b.value();
                    if (g.requires_grad(a)) {
                      MatrixT<Scalar> da = Scalar(2) * (A.array().colwise() * G.rowwise().sum().array()).matrix() -
                                           Scalar(2) * G * B;
                      g.accumulate(a, da);
                    }
                    if (g.requires_grad(b)) {
                      MatrixT<Scalar> db = Scalar(2) * (B.array().colwise() * G.colwise().sum().transpose().array()).matrix() -
                                           Scalar(2) * G.transpose() * A;
                      g.accumulate(b, db);
                    }
                  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  auto& g = parts.front().graph();
  std::vector<const MatrixT<Scalar>*> ptrs;
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    ptrs.push_back(&p.value());
    offsets.push_back(r);
    r += p.rows();
  }
  std::vector<Var<Scalar>> keep(parts.begin(), parts.end());
  return g.record(kernels::concat_rows<Scalar>(ptrs), "concat_rows", parts,
                  [keep, offsets](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    for (std::size_t k = 0; k < keep.size(); ++k)
                      if (g.requires_grad(keep[k])) g.accumulate(keep[k], G.middleRows(offsets[k], keep[k].rows()));
                  });
}

template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& a, std::vector<int> idx) {
  auto& g = a.graph();
  MatrixT<Scalar> out = kernels::gather_rows<Scalar>(a.value(), idx);
  return g.record(std::move(out), "gather_rows", {a},
                  [a, idx = std::move(idx)](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    MatrixT<Scalar> da = MatrixT<Scalar>::Zero(a.rows(), a.cols());
                    for (std::size_t k = 0; k < idx.size(); ++k) da.row(idx[k]) += G.row(static_cast<Eigen::Index>(k));
                    g.accumulate(a, da);
                  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Eigen::Index offset, Eigen::Index length) {
  auto& g = a.graph();
  return g.record(kernels::slice_cols<Scalar>(a.value(), offset, length), "slice_cols", {a},
                  [a, offset, length](Graph<Scalar>& g, const MatrixT<Scalar>& G) {
                    MatrixT<Scalar> da = MatrixT<Scalar>::Zero(a.rows(), a.cols());
                    da.middleCols(offset, length) = G;
                    g.accumulate(a, da);
                  });
}

extern template class Graph<double>;
extern template class ParamStore<double>;

}  // namespace gflow::ad
