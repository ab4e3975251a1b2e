#include "knotcast/knots.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace knotcast {

KnotSpec make_knot_spec(const Vec& levels, double eol_level, double top_level) {
  if (levels.size() < 2) {
    throw Error("knot spec needs at least 2 levels, got " + std::to_string(levels.size()));
  }
  if (!(top_level > eol_level)) {
    throw Error("knot spec: top level must exceed the end-of-life level");
  }
  for (Eigen::Index k = 0; k + 1 < levels.size(); ++k) {
    if (!(levels(k) > levels(k + 1))) {
      std::ostringstream msg;
      msg << "knot spec levels must be strictly decreasing, violated at index " << k + 1 << " ("
          << levels(k) << " -> " << levels(k + 1) << ")";
      throw Error(msg.str());
    }
  }
  if (levels(levels.size() - 1) != eol_level) {
    std::ostringstream msg;
    msg << "knot spec must end at the end-of-life level " << eol_level << ", got "
        << levels(levels.size() - 1);
    throw Error(msg.str());
  }
  if (levels(0) >= top_level) {
    throw Error("knot spec levels must lie below the top reference level");
  }
  KnotSpec spec;
  spec.soh_levels = levels;
  spec.eol_level = eol_level;
  spec.top_level = top_level;
  return spec;
}

KnotSpec uniform_levels(int k, double eol_level, double top_level) {
  if (k < 2) throw Error("uniform_levels: need at least 2 knots, got " + std::to_string(k));
  if (!(top_level > eol_level)) {
    throw Error("uniform_levels: top level must exceed the end-of-life level");
  }
  Vec levels(k);
  for (int j = 0; j < k; ++j) {
    // high to low; integer numerator first so Table-style levels are exact
    levels(j) = eol_level + (top_level - eol_level) * static_cast<double>(k - 1 - j) / k;
  }
  return make_knot_spec(levels, eol_level, top_level);
}

KnotPoints points_from_cycles(const KnotSpec& spec, const Vec& cycles) {
  if (cycles.size() != spec.count()) {
    std::ostringstream msg;
    msg << "knot points: got " << cycles.size() << " cycles for " << spec.count() << " levels";
    throw Error(msg.str());
  }
  if (!(cycles(0) > 0.0)) throw Error("knot points: cycles must be positive");
  for (Eigen::Index k = 0; k + 1 < cycles.size(); ++k) {
    if (!(cycles(k + 1) > cycles(k))) {
      std::ostringstream msg;
      msg << "knot points: cycles must be strictly increasing, violated at index " << k + 1
          << " (" << cycles(k) << " -> " << cycles(k + 1) << ")";
      throw Error(msg.str());
    }
  }
  KnotPoints points;
  points.spec = spec;
  points.cycles = cycles;
  points.intervals.resize(cycles.size());
  points.intervals(0) = cycles(0);
  for (Eigen::Index k = 1; k < cycles.size(); ++k) {
    points.intervals(k) = cycles(k) - cycles(k - 1);
  }
  return points;
}

Trajectory Trajectory::from_series(const CellSeries& series) {
  const Eigen::Index n = series.size();
  if (n < 2) throw Error("trajectory: series '" + series.cell_id + "' has fewer than 2 cycles");
  Vec x(n), y(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    x(k) = series.cycles[static_cast<std::size_t>(k)];
    y(k) = 100.0 * series.soh(k);
  }
  return Trajectory(fit_pchip(x, y));
}

Vec smoothed_soh_percent(const CellSeries& series, int window) {
  if (window < 1) throw Error("smoothed_soh_percent: window must be >= 1");
  const Eigen::Index n = series.size();
  const Eigen::Index half = (window - 1) / 2;
  Vec out(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index reach = std::min({half, k, n - 1 - k});
    double acc = 0.0;
    for (Eigen::Index j = k - reach; j <= k + reach; ++j) acc += series.soh(j);
    out(k) = 100.0 * acc / static_cast<double>(2 * reach + 1);
  }
  return out;
}

KnotPoints extract_knots(const CellSeries& series, const KnotSpec& spec, int smooth_window) {
  const Vec soh = smoothed_soh_percent(series, smooth_window);
  const Eigen::Index n = soh.size();

  Vec cycles(spec.count());
  for (Eigen::Index j = 0; j < spec.count(); ++j) {
    const double level = spec.soh_levels(j);
    if (!(soh(0) > level)) {
      std::ostringstream msg;
      msg << "extract_knots: cell '" << series.cell_id << "' starts at " << soh(0)
          << "% SOH, not above the " << level << "% level";
      throw Error(msg.str());
    }
    bool found = false;
    for (Eigen::Index k = 0; k < n && !found; ++k) {
      if (soh(k) == level) {  // exact touch counts as the crossing
        cycles(j) = series.cycles[static_cast<std::size_t>(k)];
        found = true;
      } else if (k + 1 < n && soh(k) > level && soh(k + 1) < level) {
        const double c0 = series.cycles[static_cast<std::size_t>(k)];
        const double c1 = series.cycles[static_cast<std::size_t>(k + 1)];
        cycles(j) = c0 + (soh(k) - level) / (soh(k) - soh(k + 1)) * (c1 - c0);
        found = true;
      }
    }
    if (!found) {
      std::ostringstream msg;
      msg << "extract_knots: cell '" << series.cell_id << "' never falls below the " << level
          << "% level";
      throw Error(msg.str());
    }
  }
  return points_from_cycles(spec, cycles);
}

Trajectory reconstruct(const KnotPoints& points, const Anchor& anchor) {
  if (!(anchor.cycle < points.cycles(0))) {
    std::ostringstream msg;
    msg << "reconstruct: anchor cycle " << anchor.cycle << " must precede the first knot at "
        << points.cycles(0);
    throw Error(msg.str());
  }
  const Eigen::Index k = points.count();
  Vec x(k + 1), y(k + 1);
  x(0) = anchor.cycle;
  y(0) = anchor.soh_percent;
  x.tail(k) = points.cycles;
  y.tail(k) = points.spec.soh_levels;
  return Trajectory(fit_pchip(x, y));
}

double interp_error(const Trajectory& truth, const KnotPoints& points, const Anchor& anchor) {
  const Trajectory recon = reconstruct(points, anchor);
  const double lo = std::max(anchor.cycle, truth.cycle_min());
  const double hi = std::min(points.eol_cycle(), truth.cycle_max());
  const auto first = static_cast<long>(std::ceil(lo));
  const auto last = static_cast<long>(std::floor(hi));
  if (first > last) {
    std::ostringstream msg;
    msg << "interp_error: no integer cycles in the overlap [" << lo << ", " << hi << "]";
    throw Error(msg.str());
  }
  double acc = 0.0;
  for (long c = first; c <= last; ++c) {
    const auto cycle = static_cast<double>(c);
    acc += std::abs(truth(cycle) - recon(cycle));
  }
  return acc / (100.0 * static_cast<double>(last - first + 1));  // percent -> fraction
}

}  // namespace knotcast
