#pragma once

#include "knotcast/data.hpp"
#include "knotcast/spline.hpp"

namespace knotcast {

/// Ordered SOH levels (percent) that the trajectory is pinned at. Levels are
/// strictly decreasing and always end at the end-of-life level.
struct KnotSpec {
  Vec soh_levels;           // percent, high to low, last == eol_level
  double eol_level = 80.0;  // percent
  double top_level = 98.0;  // percent, reference ceiling; never itself a level

  Eigen::Index count() const { return soh_levels.size(); }
};

/// Validates and builds a spec from explicit levels.
KnotSpec make_knot_spec(const Vec& levels, double eol_level = 80.0, double top_level = 98.0);

/// K equal SOH steps of (top - eol)/k upward from eol, excluding top itself.
KnotSpec uniform_levels(int k, double eol_level = 80.0, double top_level = 98.0);

/// Knot cycle numbers for a spec: cycles ascend while levels descend, and the
/// positive inter-knot intervals cumulate back to the cycles.
struct KnotPoints {
  KnotSpec spec;
  Vec cycles;     // ascending, parallel to spec.soh_levels
  Vec intervals;  // intervals(0) == cycles(0); partial sums reproduce cycles

  Eigen::Index count() const { return cycles.size(); }
  double eol_cycle() const { return cycles(cycles.size() - 1); }
};

/// Builds KnotPoints from cycle numbers, checking order and positivity.
KnotPoints points_from_cycles(const KnotSpec& spec, const Vec& cycles);

/// Left boundary of a reconstruction: an early cycle and its measured SOH.
struct Anchor {
  double cycle = 1.0;
  double soh_percent = 98.0;
};

/// Monotone map cycle -> SOH percent, observed or reconstructed. Evaluation
/// clamps to the endpoint values outside the covered cycle range.
class Trajectory {
 public:
  Trajectory() = default;
  explicit Trajectory(MonotoneSpline spline) : spline_(std::move(spline)) {}

  /// Shape-preserving interpolant through every (cycle, SOH percent) sample.
  static Trajectory from_series(const CellSeries& series);

  double operator()(double cycle) const { return spline_(cycle); }
  double cycle_min() const { return spline_.x_min(); }
  double cycle_max() const { return spline_.x_max(); }
  const MonotoneSpline& spline() const { return spline_; }

 private:
  MonotoneSpline spline_;
};

/// Centered moving-average smoothing of the SOH sequence, in percent. The
/// window shrinks symmetrically near the ends.
Vec smoothed_soh_percent(const CellSeries& series, int window = 5);

/// First crossing cycle of each spec level in the smoothed SOH sequence,
/// located by linear interpolation between the bracketing cycles.
KnotPoints extract_knots(const CellSeries& series, const KnotSpec& spec, int smooth_window = 5);

/// PCHIP through the anchor followed by every knot.
Trajectory reconstruct(const KnotPoints& points, const Anchor& anchor);

/// Mean absolute deviation, in SOH fraction, between the truth and the
/// reconstruction over the integer cycles both cover.
double interp_error(const Trajectory& truth, const KnotPoints& points, const Anchor& anchor);

}  // namespace knotcast
