#pragma once

// Continuous supervision from discrete trajectories.
//
// Knots are the rows of a (T+1) x P matrix. The linear flow joins the two
// endpoints and has constant drift theta_T - theta_0 per unit of t/T. The
// cubic flow is a uniform Catmull-Rom spline through every knot, evaluated on
// segment k in local coordinate u = t - (k-1); its drift is per unit knot
// index.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gflow/error.hpp"
#include "gflow/trajectories.hpp"

namespace gflow {

enum class FlowObjective { kLinear, kCubic, kHypernet };
std::string to_string(FlowObjective o);
FlowObjective objective_from_string(const std::string& s);

template <typename Scalar>
using RowVectorT = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
struct SplineSegment {
  int k = 1;
  RowVectorT<Scalar> a, b, c, d;

  RowVectorT<Scalar> position(Scalar u) const { return ((a * u + b) * u + c) * u + d; }
  RowVectorT<Scalar> velocity(Scalar u) const { return (Scalar(3) * a * u + Scalar(2) * b) * u + c; }
};

template <typename Scalar>
struct FlowPoint {
  RowVectorT<Scalar> theta;
  RowVectorT<Scalar> v;
};

namespace detail {

template <typename Derived>
void check_time(const Eigen::MatrixBase<Derived>& knots, typename Derived::Scalar t) {
  const auto T = static_cast<typename Derived::Scalar>(knots.rows() - 1);
  if (knots.rows() < 2) throw ShapeError("flow: trajectory needs at least two knots");
  if (!(t >= 0 && t <= T)) throw std::out_of_range("flow: t outside [0, T]");
}

}  // namespace detail

template <typename Derived>
FlowPoint<typename Derived::Scalar> linear_sample(const Eigen::MatrixBase<Derived>& knots,
                                                  typename Derived::Scalar t) {
  using Scalar = typename Derived::Scalar;
  detail::check_time(knots, t);
  const auto T = knots.rows() - 1;
  const Scalar s = t / static_cast<Scalar>(T);
  FlowPoint<Scalar> p;
  p.theta = (Scalar(1) - s) * knots.row(0) + s * knots.row(T);
  p.v = knots.row(T) - knots.row(0);
  return p;
}

/// Coefficients of segment k in 1..T with sentinels theta_{-1} = theta_0 and
/// theta_{T+1} = theta_T.
template <typename Derived>
SplineSegment<typename Derived::Scalar> catmull_rom_coeffs(const Eigen::MatrixBase<Derived>& knots, int k) {
  using Scalar = typename Derived::Scalar;
  const int T = static_cast<int>(knots.rows()) - 1;
  if (T < 1) throw ShapeError("flow: trajectory needs at least two knots");
  if (k < 1 || k > T) throw std::out_of_range("catmull_rom_coeffs: segment " + std::to_string(k) + " outside [1, T]");
  auto knot = [&](int j) { return knots.row(std::clamp(j, 0, T)); };
  const RowVectorT<Scalar> p0 = knot(k - 2), p1 = knot(k - 1), p2 = knot(k), p3 = knot(k + 1);
  SplineSegment<Scalar> s;
  s.k = k;
  s.a = Scalar(-0.5) * p0 + Scalar(1.5) * p1 - Scalar(1.5) * p2 + Scalar(0.5) * p3;
  s.b = p0 - Scalar(2.5) * p1 + Scalar(2) * p2 - Scalar(0.5) * p3;
  s.c = Scalar(-0.5) * p0 + Scalar(0.5) * p2;
  s.d = p1;
  return s;
}

/// Segment index min(ceil(t), T), clamped to at least 1, and its local u.
template <typename Scalar>
std::pair<int, Scalar> cubic_segment(Scalar t, int T) {
  const int k = std::clamp(static_cast<int>(std::ceil(t)), 1, T);
  return {k, t - static_cast<Scalar>(k - 1)};
}

template <typename Derived>
FlowPoint<typename Derived::Scalar> cubic_sample(const Eigen::MatrixBase<Derived>& knots, typename Derived::Scalar t) {
  detail::check_time(knots, t);
  const auto [k, u] = cubic_segment(t, static_cast<int>(knots.rows()) - 1);
  const auto seg = catmull_rom_coeffs(knots, k);
  return {seg.position(u), seg.velocity(u)};
}

struct FlowSample {
  Vector theta;
  double t = 0;
  Vector v;
  std::uint64_t episode = 0;
};

FlowSample linear_sample(const Trajectory& traj, double t);
FlowSample cubic_sample(const Trajectory& traj, double t);
/// t = 0 and v = theta_T - theta_0: the single query of the one-shot variant.
FlowSample hypernet_sample(const Trajectory& traj);
FlowSample flow_sample(FlowObjective objective, const Trajectory& traj, double t);

/// theta' = (theta - mu) / sigma and v' = v / sigma.
void standardize(FlowSample& s, const NormStats& stats);

struct BatchConfig {
  int batch = 256;
  /// Samples drawn per chosen trajectory; a value above one shares task
  /// encodings across a batch without changing the marginal distribution.
  int per_trajectory = 1;
};

/// Trajectories uniform over the store, t uniform over [0, T], standardized
/// with the store statistics.
std::vector<FlowSample> sample_batch(const TrajectoryStore& store, FlowObjective objective, const BatchConfig& cfg,
                                     std::uint64_t seed);

}  // namespace gflow
