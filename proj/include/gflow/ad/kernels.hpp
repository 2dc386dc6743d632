#pragma once

// Forward math shared by the taped graph and the eager (no-grad) evaluator.
// Every kernel works on dense column-major Eigen matrices; a "row vector" is
// a 1 x n matrix and a scalar is 1 x 1.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "gflow/error.hpp"

namespace gflow::ad {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

enum class Reduction { kSum, kMean };

namespace kernels {

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <typename Scalar>
void require_finite(const MatrixT<Scalar>& m, const char* op) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite output in ") + op);
}

template <typename Scalar>
MatrixT<Scalar> matmul(const MatrixT<Scalar>& a, const MatrixT<Scalar>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " x " + shape_str(b.rows(), b.cols()));
  return a * b;
}

/// a * b^T
template <typename Scalar>
MatrixT<Scalar> matmul_bt(const MatrixT<Scalar>& a, const MatrixT<Scalar>& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_bt: " + shape_str(a.rows(), a.cols()) + " x " + shape_str(b.rows(), b.cols()) + "^T");
  return a * b.transpose();
}

/// Same-shape add, or add a 1 x c row to every row of a.
template <typename Scalar>
MatrixT<Scalar> add(const MatrixT<Scalar>& a, const MatrixT<Scalar>& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return a + b;
  if (b.rows() == 1 && b.cols() == a.cols()) return a.rowwise() + b.row(0);
  throw ShapeError("add: " + shape_str(a.rows(), a.cols()) + " + " + shape_str(b.rows(), b.cols()));
}

template <typename Scalar>
MatrixT<Scalar> sub(const MatrixT<Scalar>& a, const MatrixT<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("sub: " + shape_str(a.rows(), a.cols()) + " - " + shape_str(b.rows(), b.cols()));
  return a - b;
}

template <typename Scalar>
MatrixT<Scalar> relu(const MatrixT<Scalar>& a) {
  return a.cwiseMax(Scalar(0));
}

template <typename Scalar>
MatrixT<Scalar> softmax_rows(const MatrixT<Scalar>& a) {
  MatrixT<Scalar> out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const Scalar mx = a.row(i).maxCoeff();
    out.row(i) = (a.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Row-wise log-sum-exp minus the label logit, reduced over rows.
template <typename Scalar>
Scalar softmax_cross_entropy(const MatrixT<Scalar>& logits, std::span<const int> labels, Reduction red) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size() || logits.rows() == 0)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(logits.rows()) + " rows vs " +
                     std::to_string(labels.size()) + " labels");
  Scalar total = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw ShapeError("softmax_cross_entropy: label out of range");
    const Scalar mx = logits.row(i).maxCoeff();
    const Scalar lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += lse - logits(i, y);
  }
  return red == Reduction::kMean ? total / static_cast<Scalar>(logits.rows()) : total;
}

template <typename Scalar>
struct LayerNormCache {
  MatrixT<Scalar> xhat;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std;
};

/// Row-wise layer normalisation; gamma and beta are 1 x c.
template <typename Scalar>
MatrixT<Scalar> layer_norm(const MatrixT<Scalar>& x, const MatrixT<Scalar>& gamma, const MatrixT<Scalar>& beta,
                           Scalar eps, LayerNormCache<Scalar>* cache = nullptr) {
  if (gamma.rows() != 1 || beta.rows() != 1 || gamma.cols() != x.cols() || beta.cols() != x.cols())
    throw ShapeError("layer_norm: gain/shift must be 1 x " + std::to_string(x.cols()));
  const Scalar n = static_cast<Scalar>(x.cols());
  MatrixT<Scalar> xhat(x.rows(), x.cols());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar mu = x.row(i).sum() / n;
    const Scalar var = (x.row(i).array() - mu).square().sum() / n;
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = ((x.row(i).array() - mu) * inv_std(i)).matrix();
  }
  MatrixT<Scalar> out = (xhat.array().rowwise() * gamma.row(0).array()).matrix();
  out.rowwise() += beta.row(0);
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

/// out(i, j) = || a_i - b_j ||^2
template <typename Scalar>
MatrixT<Scalar> sq_dist(const MatrixT<Scalar>& a, const MatrixT<Scalar>& b) {
  if (a.cols() != b.cols())
    throw ShapeError("sq_dist: " + shape_str(a.rows(), a.cols()) + " vs " + shape_str(b.rows(), b.cols()));
  MatrixT<Scalar> out(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j)
    out.col(j) = (a.rowwise() - b.row(j)).rowwise().squaredNorm();
  return out;
}

template <typename Scalar>
MatrixT<Scalar> concat_rows(std::span<const MatrixT<Scalar>* const> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index cols = parts.front()->cols();
  Eigen::Index rows = 0;
  for (const auto* p : parts) {
    if (p->cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p->rows();
  }
  MatrixT<Scalar> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto* p : parts) {
    out.middleRows(r, p->rows()) = *p;
    r += p->rows();
  }
  return out;
}

template <typename Scalar>
MatrixT<Scalar> gather_rows(const MatrixT<Scalar>& a, std::span<const int> idx) {
  MatrixT<Scalar> out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(k)) = a.row(idx[k]);
  }
  return out;
}

template <typename Scalar>
MatrixT<Scalar> slice_cols(const MatrixT<Scalar>& a, Eigen::Index offset, Eigen::Index length) {
  if (offset < 0 || length < 0 || offset + length > a.cols()) throw ShapeError("slice_cols: range out of bounds");
  return a.middleCols(offset, length);
}

}  // namespace kernels
}  // namespace gflow::ad
