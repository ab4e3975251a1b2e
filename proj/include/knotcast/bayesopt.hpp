#pragma once

#include "knotcast/gp.hpp"
#include "knotcast/knots.hpp"

namespace knotcast {

/// Fleet-mean interpolation error of reconstructing each cell's observed
/// trajectory through knots extracted at the given levels. The anchor is each
/// cell's first recorded cycle and its measured SOH.
double objective(const KnotSpec& spec, const std::vector<CellSeries>& cells,
                 int smooth_window = 5);

/// Expected improvement acquisition at a free-level vector (the K-1 levels
/// above the fixed end-of-life level). Zero when the posterior sd is zero.
double expected_improvement(const GpSurrogate& gp, const Vec& free_levels, double margin = 0.0);

struct BoConfig {
  int knots = 3;
  double eol_level = 80.0;
  double top_level = 98.0;
  double margin = 0.0;        // EI exploration margin (zeta)
  double min_gap = 1.0;       // SOH percent between adjacent levels
  int budget = 60;            // total objective evaluations
  int initial_design = 0;     // 0 -> 5 * (K - 1) latin-hypercube points
  int smooth_window = 5;
  std::uint64_t seed = 0;
};

struct BoResult {
  KnotSpec best_levels;
  double best_objective = 0.0;
  std::vector<std::pair<Vec, double>> history;  // free levels, objective, in order
};

/// Feasible box for free levels: [eol + min_gap, top - min_gap], strictly
/// decreasing with at least min_gap between neighbours. repair_levels projects
/// an arbitrary vector onto that set.
Vec repair_levels(Vec free_levels, const BoConfig& cfg);

/// Builds the full spec (eol appended) from a feasible free-level vector.
KnotSpec spec_from_free_levels(const Vec& free_levels, const BoConfig& cfg);

/// GP-driven minimization of the knot objective: latin-hypercube design, then
/// EI-maximizing evaluations until the budget is spent. Deterministic per seed.
BoResult optimize_knots(const std::vector<CellSeries>& cells, const BoConfig& cfg);

}  // namespace knotcast
