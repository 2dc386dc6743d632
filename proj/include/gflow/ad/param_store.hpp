#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "gflow/ad/kernels.hpp"

namespace gflow::ad {

/// Named parameter tensors with gradient slots and trainable flags.
///
/// Gradient slots always have the shape of their parameter. Frozen entries
/// keep a zero gradient: the graph never accumulates into them and the
/// optimizer skips them.
template <typename Scalar>
class ParamStore {
 public:
  using Matrix = MatrixT<Scalar>;

  std::size_t add(std::string name, Matrix value, bool trainable = true) {
    for (const auto& e : entries_)
      if (e.name == name) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    Matrix grad = Matrix::Zero(value.rows(), value.cols());
    entries_.push_back({std::move(name), std::move(value), std::move(grad), trainable});
    return entries_.size() - 1;
  }

  std::size_t size() const { return entries_.size(); }

  bool contains(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return true;
    return false;
  }

  std::size_t index(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    throw std::out_of_range("ParamStore: no parameter '" + std::string(name) + "'");
  }

  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  Matrix& value(std::size_t i) { return entries_.at(i).value; }
  const Matrix& value(std::size_t i) const { return entries_.at(i).value; }
  Matrix& value(std::string_view n) { return entries_[index(n)].value; }
  const Matrix& value(std::string_view n) const { return entries_[index(n)].value; }
  Matrix& grad(std::size_t i) { return entries_.at(i).grad; }
  const Matrix& grad(std::size_t i) const { return entries_.at(i).grad; }
  const Matrix& grad(std::string_view n) const { return entries_[index(n)].grad; }

  bool trainable(std::size_t i) const { return entries_.at(i).trainable; }
  void set_trainable(std::size_t i, bool on) { entries_.at(i).trainable = on; }
  void freeze_all() {
    for (auto& e : entries_) e.trainable = false;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.setZero();
  }

  /// Total number of scalar entries (trainable or not).
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& e : entries_) {
      mix(e.name.data(), e.name.size());
      const Eigen::Index shape[2] = {e.value.rows(), e.value.cols()};
      mix(shape, sizeof(shape));
      mix(e.value.data(), sizeof(Scalar) * static_cast<std::size_t>(e.value.size()));
    }
    return h;
  }

 private:
  struct Entry {
    std::string name;
    Matrix value;
    Matrix grad;
    bool trainable;
  };
  std::vector<Entry> entries_;
};

}  // namespace gflow::ad
