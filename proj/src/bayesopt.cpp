#include "knotcast/bayesopt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "knotcast/optim.hpp"

namespace knotcast {

double objective(const KnotSpec& spec, const std::vector<CellSeries>& cells, int smooth_window) {
  if (cells.empty()) throw Error("objective: empty fleet");
  Vec errors(static_cast<Eigen::Index>(cells.size()));
  parallel_for(cells.size(), [&](std::size_t k) {
    const CellSeries& series = cells[k];
    const Trajectory truth = Trajectory::from_series(series);
    const Anchor anchor{static_cast<double>(series.cycles.front()), 100.0 * series.soh(0)};
    const KnotPoints points = extract_knots(series, spec, smooth_window);
    errors(static_cast<Eigen::Index>(k)) = interp_error(truth, points, anchor);
  });
  return errors.mean();
}

double expected_improvement(const GpSurrogate& gp, const Vec& free_levels, double margin) {
  if (gp.size() < 1) throw Error("expected_improvement: surrogate has no observations");
  const auto post = gp.predict(free_levels);
  if (post.sd <= 0.0) return 0.0;
  const double gain = gp.best_observed() - post.mean - margin;
  const double z = gain / post.sd;
  return gain * normal_cdf(z) + post.sd * normal_pdf(z);
}

Vec repair_levels(Vec v, const BoConfig& cfg) {
  const double lo = cfg.eol_level + cfg.min_gap;
  const double hi = cfg.top_level - cfg.min_gap;
  std::sort(v.data(), v.data() + v.size(), std::greater<double>());
  v(0) = std::min(v(0), hi);
  for (Eigen::Index k = 1; k < v.size(); ++k) {
    v(k) = std::min(v(k), v(k - 1) - cfg.min_gap);
  }
  v(v.size() - 1) = std::max(v(v.size() - 1), lo);
  for (Eigen::Index k = v.size() - 2; k >= 0; --k) {
    v(k) = std::max(v(k), v(k + 1) + cfg.min_gap);
  }
  return v;
}

KnotSpec spec_from_free_levels(const Vec& free_levels, const BoConfig& cfg) {
  Vec levels(free_levels.size() + 1);
  levels.head(free_levels.size()) = free_levels;
  levels(free_levels.size()) = cfg.eol_level;
  return make_knot_spec(levels, cfg.eol_level, cfg.top_level);
}

namespace {

void check_config(const BoConfig& cfg) {
  if (cfg.knots < 2) throw Error("optimize_knots: need at least 2 knots");
  if (!(cfg.top_level - cfg.eol_level > cfg.min_gap * cfg.knots)) {
    throw Error("optimize_knots: level box cannot hold the requested knots");
  }
  if (cfg.margin < 0.0) throw Error("optimize_knots: margin must be >= 0");
}

// One latin-hypercube sample per stratum and dimension, then projected onto
// the ordered-gap feasible set.
std::vector<Vec> latin_hypercube(int n, int dims, const BoConfig& cfg, Rng& rng) {
  const double lo = cfg.eol_level + cfg.min_gap;
  const double hi = cfg.top_level - cfg.min_gap;
  std::vector<std::vector<int>> strata(dims);
  for (int d = 0; d < dims; ++d) {
    strata[d].resize(n);
    for (int k = 0; k < n; ++k) strata[d][k] = k;
    rng.shuffle(strata[d]);
  }
  std::vector<Vec> points(n, Vec(dims));
  for (int k = 0; k < n; ++k) {
    for (int d = 0; d < dims; ++d) {
      const double u = (strata[d][k] + rng.uniform()) / n;
      points[k](d) = lo + (hi - lo) * u;
    }
    points[k] = repair_levels(points[k], cfg);
  }
  return points;
}

bool near_duplicate(const Vec& v, const std::vector<std::pair<Vec, double>>& history) {
  for (const auto& [seen, value] : history) {
    if ((seen - v).cwiseAbs().maxCoeff() < 1e-6) return true;
  }
  return false;
}

}  // namespace

BoResult optimize_knots(const std::vector<CellSeries>& cells, const BoConfig& cfg) {
  check_config(cfg);
  const int dims = cfg.knots - 1;
  const int design = cfg.initial_design > 0 ? cfg.initial_design : 5 * dims;
  if (cfg.budget < design) {
    throw Error("optimize_knots: budget must cover the initial design of " +
                std::to_string(design) + " evaluations");
  }
  Rng rng(cfg.seed ^ 0xb0ull);

  BoResult result;
  auto evaluate = [&](const Vec& free_levels) {
    const double d = objective(spec_from_free_levels(free_levels, cfg), cells, cfg.smooth_window);
    result.history.emplace_back(free_levels, d);
    return d;
  };

  for (const Vec& p : latin_hypercube(design, dims, cfg, rng)) {
    if (!near_duplicate(p, result.history)) evaluate(p);
  }

  const double lo = cfg.eol_level + cfg.min_gap;
  const double hi = cfg.top_level - cfg.min_gap;
  auto random_feasible = [&] {
    Vec v(dims);
    for (int d = 0; d < dims; ++d) v(d) = rng.uniform(lo, hi);
    return repair_levels(v, cfg);
  };

  while (static_cast<int>(result.history.size()) < cfg.budget) {
    Mat xs(static_cast<Eigen::Index>(result.history.size()), dims);
    Vec ys(static_cast<Eigen::Index>(result.history.size()));
    Eigen::Index best_row = 0;
    for (std::size_t k = 0; k < result.history.size(); ++k) {
      xs.row(static_cast<Eigen::Index>(k)) = result.history[k].first.transpose();
      ys(static_cast<Eigen::Index>(k)) = result.history[k].second;
      if (ys(static_cast<Eigen::Index>(k)) < ys(best_row)) {
        best_row = static_cast<Eigen::Index>(k);
      }
    }
    const GpSurrogate gp =
        GpSurrogate::fit(xs, ys, cfg.seed + 0x9e37 * result.history.size());

    // candidate pool: random sweep plus perturbations of the incumbent
    std::vector<std::pair<double, Vec>> pool;
    auto add_candidate = [&](Vec v) {
      const double ei = expected_improvement(gp, v, cfg.margin);
      pool.emplace_back(-ei, std::move(v));
    };
    for (int k = 0; k < 192; ++k) add_candidate(random_feasible());
    for (int k = 0; k < 24; ++k) {
      Vec v = xs.row(best_row).transpose();
      for (int d = 0; d < dims; ++d) v(d) += rng.normal(0.0, 1.5);
      add_candidate(repair_levels(v, cfg));
    }
    std::sort(pool.begin(), pool.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    auto negative_ei = [&](const Vec& v) {
      return -expected_improvement(gp, repair_levels(v, cfg), cfg.margin);
    };
    Vec best_candidate = pool.front().second;
    double best_ei = -pool.front().first;
    for (int k = 0; k < std::min<int>(6, static_cast<int>(pool.size())); ++k) {
      const auto polished =
          nelder_mead(negative_ei, pool[static_cast<std::size_t>(k)].second, 0.8, 60);
      const Vec repaired = repair_levels(polished.x, cfg);
      const double ei = expected_improvement(gp, repaired, cfg.margin);
      if (ei > best_ei) {
        best_ei = ei;
        best_candidate = repaired;
      }
    }
    if (near_duplicate(best_candidate, result.history)) {
      // already evaluated: fall back to exploration
      Vec v = random_feasible();
      for (int guard = 0; guard < 64 && near_duplicate(v, result.history); ++guard) {
        v = random_feasible();
      }
      best_candidate = v;
    }
    evaluate(best_candidate);
  }

  std::size_t best = 0;
  for (std::size_t k = 1; k < result.history.size(); ++k) {
    if (result.history[k].second < result.history[best].second) best = k;
  }
  result.best_levels = spec_from_free_levels(result.history[best].first, cfg);
  result.best_objective = result.history[best].second;
  return result;
}

}  // namespace knotcast
