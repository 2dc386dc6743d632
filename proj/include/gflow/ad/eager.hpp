#pragma once

// No-grad evaluation with the same op vocabulary as the taped Graph.
//
// Model code is written once against a context type (Graph or eager::Context)
// and the ops resolve by argument-dependent lookup. Eager tensors release
// their storage as soon as they go out of scope, and the context records the
// peak number of bytes alive at once: the transient allocation of a forward
// pass with no retained computation graph.

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "gflow/ad/graph.hpp"

namespace gflow::eager {

using ad::MatrixT;
using ad::Reduction;

class Context;

namespace detail {
inline void note_alloc(Context* ctx, std::size_t bytes);
inline void note_free(Context* ctx, std::size_t bytes);
}  // namespace detail

/// Either owns its matrix (counted against the context) or borrows a
/// parameter/constant that outlives it (not counted).
template <typename Scalar>
class Tensor {
 public:
  using Matrix = MatrixT<Scalar>;

  Tensor() = default;
  Tensor(Context* ctx, Matrix owned) : ctx_(ctx), owned_(std::move(owned)), ptr_(&owned_) {
    ++ad::thread_counters().eager_ops;
    bytes_ = sizeof(Scalar) * static_cast<std::size_t>(owned_.size());
    detail::note_alloc(ctx_, bytes_);
  }
  static Tensor borrow(Context* ctx, const Matrix& m) {
    Tensor t;
    t.ctx_ = ctx;
    t.ptr_ = &m;
    return t;
  }

  Tensor(const Tensor& o) : ctx_(o.ctx_) {
    if (o.ptr_ == &o.owned_) {
      owned_ = o.owned_;
      ptr_ = &owned_;
      bytes_ = o.bytes_;
      detail::note_alloc(ctx_, bytes_);
    } else {
      ptr_ = o.ptr_;
    }
  }
  Tensor(Tensor&& o) noexcept { steal(std::move(o)); }
  Tensor& operator=(Tensor o) noexcept {
    release();
    steal(std::move(o));
    return *this;
  }
  ~Tensor() { release(); }

  Context* context() const { return ctx_; }
  const Matrix& value() const { return *ptr_; }
  Eigen::Index rows() const { return ptr_->rows(); }
  Eigen::Index cols() const { return ptr_->cols(); }

 private:
  void release() {
    if (bytes_ > 0) detail::note_free(ctx_, bytes_);
    bytes_ = 0;
  }
  void steal(Tensor&& o) {
    ctx_ = o.ctx_;
    if (o.ptr_ == &o.owned_) {
      owned_ = std::move(o.owned_);
      ptr_ = &owned_;
    } else {
      ptr_ = o.ptr_;
    }
    bytes_ = o.bytes_;
    o.bytes_ = 0;
    o.ptr_ = nullptr;
  }

  Context* ctx_ = nullptr;
  Matrix owned_;
  const Matrix* ptr_ = nullptr;
  std::size_t bytes_ = 0;
};

/// Eager evaluation context. Not thread-safe; use one per thread.
class Context {
 public:
  using ScalarType = double;
  using Matrix = MatrixT<double>;
  using Value = Tensor<double>;

  Value constant(Matrix m) { return Value(this, std::move(m)); }
  Value param(const ad::ParamStore<double>& store, std::size_t i) { return Value::borrow(this, store.value(i)); }
  Value param(const ad::ParamStore<double>& store, std::string_view name) {
    return Value::borrow(this, store.value(name));
  }
  /// Wraps a matrix the caller keeps alive.
  Value view(const Matrix& m) { return Value::borrow(this, m); }

  std::size_t live_bytes() const { return live_; }
  std::size_t peak_bytes() const { return peak_; }
  void reset_peak() { peak_ = live_; }

  void acquire(std::size_t bytes) {
    live_ += bytes;
    if (live_ > peak_) peak_ = live_;
  }
  void release(std::size_t bytes) { live_ -= bytes; }

 private:
  std::size_t live_ = 0;
  std::size_t peak_ = 0;
};

namespace detail {
inline void note_alloc(Context* ctx, std::size_t bytes) {
  if (ctx != nullptr) ctx->acquire(bytes);
}
inline void note_free(Context* ctx, std::size_t bytes) {
  if (ctx != nullptr) ctx->release(bytes);
}
template <typename Scalar>
Tensor<Scalar> make(Context* ctx, MatrixT<Scalar> m, const char* op) {
  ad::kernels::require_finite(m, op);
  return Tensor<Scalar>(ctx, std::move(m));
}
}  // namespace detail

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::make(a.context(), ad::kernels::matmul<Scalar>(a.value(), b.value()), "matmul");
}
template <typename Scalar>
Tensor<Scalar> matmul_bt(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::make(a.context(), ad::kernels::matmul_bt<Scalar>(a.value(), b.value()), "matmul_bt");
}
template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::make(a.context(), ad::kernels::add<Scalar>(a.value(), b.value()), "add");
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::make(a.context(), ad::kernels::sub<Scalar>(a.value(), b.value()), "sub");
}
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) {
  return detail::make(a.context(), MatrixT<Scalar>(s * a.value()), "scale");
}
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  return detail::make(a.context(), ad::kernels::relu<Scalar>(a.value()), "relu");
}
template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a) {
  return detail::make(a.context(), MatrixT<Scalar>(a.value().array().square()), "square");
}
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& a) {
  return detail::make(a.context(), ad::kernels::softmax_rows<Scalar>(a.value()), "softmax");
}
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& labels,
                                     Reduction red = Reduction::kSum) {
  MatrixT<Scalar> out(1, 1);
  out(0, 0) = ad::kernels::softmax_cross_entropy<Scalar>(logits.value(), labels, red);
  return detail::make(logits.context(), std::move(out), "softmax_cross_entropy");
}
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  MatrixT<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::make(a.context(), std::move(out), "sum");
}
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  MatrixT<Scalar> out(1, 1);
  out(0, 0) = a.value().mean();
  return detail::make(a.context(), std::move(out), "mean");
}
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = 1e-5) {
  return detail::make(x.context(), ad::kernels::layer_norm<Scalar>(x.value(), gamma.value(), beta.value(), eps),
                      "layer_norm");
}
template <typename Scalar>
Tensor<Scalar> sq_dist(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::make(a.context(), ad::kernels::sq_dist<Scalar>(a.value(), b.value()), "sq_dist");
}
template <typename Scalar>
Tensor<Scalar> concat_rows(std::span<const Tensor<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  std::vector<const MatrixT<Scalar>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p.value());
  return detail::make(parts.front().context(), ad::kernels::concat_rows<Scalar>(ptrs), "concat_rows");
}
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& a, const std::vector<int>& idx) {
  return detail::make(a.context(), ad::kernels::gather_rows<Scalar>(a.value(), idx), "gather_rows");
}
template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& a, Eigen::Index offset, Eigen::Index length) {
  return detail::make(a.context(), ad::kernels::slice_cols<Scalar>(a.value(), offset, length), "slice_cols");
}

}  // namespace gflow::eager
