#pragma once

#include "knotcast/common.hpp"

namespace knotcast {

/// Shape-preserving piecewise cubic Hermite interpolant. Knot derivatives are
/// the weighted harmonic mean of adjacent secant slopes, zeroed where the
/// slopes change sign, so monotone data yields a monotone interpolant with no
/// overshoot. Immutable after construction; evaluation is thread-safe.
class MonotoneSpline {
 public:
  MonotoneSpline() = default;

  const Vec& knots_x() const { return x_; }
  const Vec& knots_y() const { return y_; }
  const Vec& derivs() const { return d_; }

  double x_min() const { return x_(0); }
  double x_max() const { return x_(x_.size() - 1); }

  /// Cubic Hermite evaluation inside the domain; outside, the nearest
  /// endpoint value (no extrapolation).
  double operator()(double q) const;
  Vec operator()(const Vec& q) const;

  friend MonotoneSpline fit_pchip(const Vec& x, const Vec& y);

 private:
  Vec x_, y_, d_;   // knot abscissae, ordinates, derivatives
  Vec c2_, c3_;     // per-interval quadratic/cubic coefficients
};

/// Fits the interpolant through (x, y). x must be strictly increasing with at
/// least two points.
MonotoneSpline fit_pchip(const Vec& x, const Vec& y);

}  // namespace knotcast
