#include "knotcast/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "knotcast/knee.hpp"

namespace knotcast {

Metrics metrics(const Vec& observed, const Vec& predicted) {
  if (observed.size() == 0 || observed.size() != predicted.size()) {
    throw Error("metrics: need equal nonempty observation and prediction vectors");
  }
  Metrics m;
  for (Eigen::Index k = 0; k < observed.size(); ++k) {
    const double err = std::abs(observed(k) - predicted(k));
    m.mae += err;
    if (observed(k) == 0.0) {
      throw Error("metrics: zero observation at index " + std::to_string(k) +
                  " makes MAPE undefined");
    }
    m.mape += err / std::abs(observed(k));
  }
  const auto n = static_cast<double>(observed.size());
  m.mae /= n;
  m.mape *= 100.0 / n;
  return m;
}

std::vector<std::size_t> FoldPlan::test_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < fold_of.size(); ++k) {
    if (fold_of[k] == fold) out.push_back(k);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::train_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < fold_of.size(); ++k) {
    if (fold_of[k] != fold) out.push_back(k);
  }
  return out;
}

FoldPlan stratified_folds(const Fleet& fleet, int n_folds, std::uint64_t seed) {
  if (fleet.empty()) throw Error("stratified_folds: empty fleet");
  if (n_folds < 2) throw Error("stratified_folds: need at least 2 folds");

  // stratum key per cell: knee class x group label
  std::map<std::string, std::vector<std::size_t>> strata;
  for (std::size_t k = 0; k < fleet.size(); ++k) {
    const CellData& cell = fleet[k];
    double knee;
    std::string group;
    if (cell.truth) {
      knee = cell.truth->knee_cycle;
      group = cell.truth->pattern;
    } else {
      Vec x(cell.series.size()), y(cell.series.size());
      for (Eigen::Index j = 0; j < cell.series.size(); ++j) {
        x(j) = cell.series.cycles[static_cast<std::size_t>(j)];
        y(j) = cell.series.soh(j);
      }
      knee = std::max(fit_bacon_watts(x, y).knee_cycle, 0.0);
      group = "all";
    }
    strata[std::string(knee_class_name(knee_class(knee))) + ":" + group].push_back(k);
  }

  FoldPlan plan;
  plan.n_folds = n_folds;
  plan.fold_of.assign(fleet.size(), -1);
  std::vector<int> fold_sizes(static_cast<std::size_t>(n_folds), 0);

  Rng rng(seed ^ 0xf01d);
  for (auto& [key, members] : strata) {
    if (static_cast<int>(members.size()) < n_folds) {
      std::cerr << "stratified_folds: stratum '" << key << "' has " << members.size()
                << " cell(s) for " << n_folds << " folds; filling smallest folds instead\n";
    }
    rng.shuffle(members);
    const int per_fold = static_cast<int>(members.size()) / n_folds;
    std::size_t next = 0;
    for (int f = 0; f < n_folds; ++f) {
      for (int j = 0; j < per_fold; ++j) {
        plan.fold_of[members[next++]] = f;
        ++fold_sizes[static_cast<std::size_t>(f)];
      }
    }
    // leftovers go to the currently smallest folds, keeping global balance
    while (next < members.size()) {
      int target = 0;
      for (int f = 1; f < n_folds; ++f) {
        if (fold_sizes[static_cast<std::size_t>(f)] < fold_sizes[static_cast<std::size_t>(target)]) {
          target = f;
        }
      }
      plan.fold_of[members[next++]] = target;
      ++fold_sizes[static_cast<std::size_t>(target)];
    }
  }
  for (std::size_t k = 0; k < fleet.size(); ++k) {
    plan.assignments[fleet[k].series.cell_id] = plan.fold_of[k];
  }
  return plan;
}

InputMatrix cell_input(const CellData& cell, int input_cycles, int n_points) {
  if (static_cast<int>(cell.cycles.size()) < input_cycles) {
    throw Error("cell " + cell.series.cell_id + ": has " +
                std::to_string(cell.cycles.size()) + " recorded cycles, needs " +
                std::to_string(input_cycles));
  }
  const std::vector<CycleRecord> head(cell.cycles.begin(), cell.cycles.begin() + input_cycles);
  return stack_cycles(head, n_points);
}

Anchor cell_anchor(const CellData& cell, const PipelineConfig& cfg) {
  Anchor anchor;
  anchor.cycle = cell.series.cycles[static_cast<std::size_t>(
      std::min<Eigen::Index>(cfg.input_cycles - 1, cell.series.size() - 1))];
  if (cfg.anchor_mode == "top") {
    anchor.soh_percent = 100.0;
  } else {
    const auto idx = static_cast<Eigen::Index>(
        std::min<Eigen::Index>(cfg.input_cycles - 1, cell.series.size() - 1));
    anchor.soh_percent = 100.0 * cell.series.soh(idx);
  }
  return anchor;
}

Vec cell_labels(const CellData& cell, const KnotSpec& spec, int smooth_window) {
  return extract_knots(cell.series, spec, smooth_window).cycles;
}

TrainedPredictor fit_pipeline(const Fleet& fleet, const std::vector<std::size_t>& train_idx,
                              const KnotSpec& spec, const PipelineConfig& cfg,
                              std::uint64_t seed) {
  std::vector<InputMatrix> inputs;
  Mat labels(spec.count(), static_cast<Eigen::Index>(train_idx.size()));
  Eigen::Index col = 0;
  for (const std::size_t idx : train_idx) {
    const CellData& cell = fleet[idx];
    inputs.push_back(cell_input(cell, cfg.input_cycles, cfg.n_points));
    labels.col(col++) = cell_labels(cell, spec, cfg.smooth_window);
  }

  TrainedPredictor predictor;
  predictor.spec = spec;
  predictor.net = ConvNet(cfg.n_points * cfg.input_cycles, static_cast<int>(spec.count()),
                          HeadType::kIntervals, 0.2, seed);
  predictor.net.n_points = cfg.n_points;
  predictor.net.input_cycles = cfg.input_cycles;
  TrainConfig train_cfg = cfg.train;
  train_cfg.seed = seed;
  predictor.training = train_intervals(predictor.net, inputs, labels, train_cfg);
  return predictor;
}

CellScore score_cell(const CellData& cell, const KnotSpec& spec, const Vec& predicted_cycles,
                     double eol_lo, double eol_hi, const PipelineConfig& cfg) {
  CellScore score;
  score.cell_id = cell.series.cell_id;
  try {
    const Vec true_cycles = cell_labels(cell, spec, cfg.smooth_window);
    score.knot = metrics(true_cycles, predicted_cycles);
    score.eol_true = true_cycles(true_cycles.size() - 1);
    score.eol_pred = predicted_cycles(predicted_cycles.size() - 1);
    score.eol_lo = eol_lo;
    score.eol_hi = eol_hi;
    score.eol_covered = score.eol_true >= eol_lo && score.eol_true <= eol_hi;

    const Anchor anchor = cell_anchor(cell, cfg);
    const Trajectory recon = reconstruct(points_from_cycles(spec, predicted_cycles), anchor);

    // integer-cycle grid from the anchor to the observed end of life
    int eol_cycle = -1;
    for (Eigen::Index k = 0; k < cell.series.size(); ++k) {
      if (cell.series.soh(k) < cfg.eol_level / 100.0) {
        eol_cycle = cell.series.cycles[static_cast<std::size_t>(k)];
        break;
      }
    }
    if (eol_cycle < 0) throw Error("cell never reaches the end-of-life level");
    std::vector<double> truth_frac, pred_frac;
    for (Eigen::Index k = 0; k < cell.series.size(); ++k) {
      const int cycle = cell.series.cycles[static_cast<std::size_t>(k)];
      if (cycle < anchor.cycle || cycle > eol_cycle) continue;
      truth_frac.push_back(cell.series.soh(k));
      pred_frac.push_back(recon(cycle) / 100.0);
    }
    if (truth_frac.empty()) throw Error("no cycles between the anchor and end of life");
    const Eigen::Index n = static_cast<Eigen::Index>(truth_frac.size());
    score.trajectory = metrics(Eigen::Map<Vec>(truth_frac.data(), n),
                               Eigen::Map<Vec>(pred_frac.data(), n));
    score.trajectory_mae_ah = score.trajectory.mae * cell.series.nominal_capacity_ah;
  } catch (const Error& e) {
    score.failed = true;
    score.error = e.what();
  }
  return score;
}

namespace {

void aggregate_report(EvalReport& report) {
  double knot_mae = 0, knot_mape = 0;
  double traj_mae = 0, traj_mape = 0, traj_ah = 0, width = 0;
  int ok = 0, covered = 0;
  for (const auto& cell : report.cells) {
    if (cell.failed) {
      ++report.failed_cells;
      continue;
    }
    ++ok;
    knot_mae += cell.knot.mae;
    knot_mape += cell.knot.mape;
    traj_mae += cell.trajectory.mae;
    traj_mape += cell.trajectory.mape;
    traj_ah += cell.trajectory_mae_ah;
    width += cell.eol_hi - cell.eol_lo;
    if (cell.eol_covered) ++covered;
  }
  if (ok > 0) {
    report.knot_aggregate = {knot_mae / ok, knot_mape / ok};
    report.trajectory_aggregate = {traj_mae / ok, traj_mape / ok};
    report.trajectory_mae_ah = traj_ah / ok;
    report.ci_coverage = static_cast<double>(covered) / ok;
    report.mean_ci_width_eol = width / ok;
  }
}

}  // namespace

EvalReport run_cv(const Fleet& fleet, const PipelineConfig& cfg) {
  const FoldPlan plan = stratified_folds(fleet, cfg.folds, cfg.seed);
  EvalReport report;
  report.cells.resize(fleet.size());

  for (int fold = 0; fold < cfg.folds; ++fold) {
    const auto train_idx = plan.train_indices(fold);
    const auto test_idx = plan.test_indices(fold);
    if (train_idx.empty() || test_idx.empty()) continue;

    KnotSpec spec;
    if (cfg.knot_mode == "optimized") {
      std::vector<CellSeries> train_series;
      train_series.reserve(train_idx.size());
      for (const std::size_t idx : train_idx) train_series.push_back(fleet[idx].series);
      BoConfig bo;
      bo.knots = cfg.knots;
      bo.eol_level = cfg.eol_level;
      bo.top_level = cfg.top_level;
      bo.budget = cfg.bo_budget;
      bo.smooth_window = cfg.smooth_window;
      bo.seed = cfg.seed + 1000 * static_cast<std::uint64_t>(fold);
      spec = optimize_knots(train_series, bo).best_levels;
    } else if (cfg.knot_mode == "uniform") {
      spec = uniform_levels(cfg.knots, cfg.eol_level, cfg.top_level);
    } else {
      throw Error("run_cv: unknown knot mode '" + cfg.knot_mode + "'");
    }

    const TrainedPredictor predictor =
        fit_pipeline(fleet, train_idx, spec, cfg, cfg.seed + 7919 * static_cast<std::uint64_t>(fold));

    std::vector<CellScore> scores(test_idx.size());
    parallel_for(test_idx.size(), [&](std::size_t k) {
      const CellData& cell = fleet[test_idx[k]];
      try {
        const InputMatrix input = cell_input(cell, cfg.input_cycles, cfg.n_points);
        const McPrediction mc = predict_mc(predictor.net, input, cfg.train.mc_samples,
                                           cfg.seed + 13 * test_idx[k]);
        scores[k] = score_cell(cell, spec, mc.mean_cycles, mc.lo95(mc.lo95.size() - 1),
                               mc.hi95(mc.hi95.size() - 1), cfg);
      } catch (const Error& e) {
        scores[k].cell_id = cell.series.cell_id;
        scores[k].failed = true;
        scores[k].error = e.what();
      }
      scores[k].fold = fold;
    });

    FoldSummary summary;
    summary.fold = fold;
    summary.spec = spec;
    summary.train_cells = static_cast<int>(train_idx.size());
    summary.test_cells = static_cast<int>(test_idx.size());
    int ok = 0;
    for (std::size_t k = 0; k < scores.size(); ++k) {
      report.cells[test_idx[k]] = scores[k];
      if (!scores[k].failed) {
        summary.knot.mae += scores[k].knot.mae;
        summary.knot.mape += scores[k].knot.mape;
        summary.trajectory.mae += scores[k].trajectory.mae;
        summary.trajectory.mape += scores[k].trajectory.mape;
        ++ok;
      }
    }
    if (ok > 0) {
      summary.knot.mae /= ok;
      summary.knot.mape /= ok;
      summary.trajectory.mae /= ok;
      summary.trajectory.mape /= ok;
    }
    report.folds.push_back(summary);
  }

  aggregate_report(report);
  return report;
}

std::string report_to_text(const EvalReport& report) {
  std::ostringstream out;
  char line[160];
  out << "fold  cells  knot MAE (cyc)  knot MAPE (%)  traj MAE (SOH)  traj MAPE (%)\n";
  for (const auto& f : report.folds) {
    std::snprintf(line, sizeof(line), "%4d  %5d  %14.2f  %13.2f  %14.5f  %13.2f\n", f.fold,
                  f.test_cells, f.knot.mae, f.knot.mape, f.trajectory.mae, f.trajectory.mape);
    out << line;
  }
  std::snprintf(line, sizeof(line),
                "all   %5d  %14.2f  %13.2f  %14.5f  %13.2f\n",
                static_cast<int>(report.cells.size()) - report.failed_cells,
                report.knot_aggregate.mae, report.knot_aggregate.mape,
                report.trajectory_aggregate.mae, report.trajectory_aggregate.mape);
  out << line;
  std::snprintf(line, sizeof(line),
                "trajectory MAE %.4f Ah | EOL CI coverage %.3f | mean EOL CI width %.1f cycles | "
                "failed cells %d\n",
                report.trajectory_mae_ah, report.ci_coverage, report.mean_ci_width_eol,
                report.failed_cells);
  out << line;
  return out.str();
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["aggregate"] = {{"knot_mae_cycles", report.knot_aggregate.mae},
                    {"knot_mape_pct", report.knot_aggregate.mape},
                    {"trajectory_mae_soh", report.trajectory_aggregate.mae},
                    {"trajectory_mape_pct", report.trajectory_aggregate.mape},
                    {"trajectory_mae_ah", report.trajectory_mae_ah},
                    {"ci_coverage", report.ci_coverage},
                    {"mean_ci_width_eol_cycles", report.mean_ci_width_eol},
                    {"failed_cells", report.failed_cells}};
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : report.folds) {
    folds.push_back({{"fold", f.fold},
                     {"train_cells", f.train_cells},
                     {"test_cells", f.test_cells},
                     {"knot_levels", std::vector<double>(f.spec.soh_levels.data(),
                                                         f.spec.soh_levels.data() +
                                                             f.spec.soh_levels.size())},
                     {"knot_mae_cycles", f.knot.mae},
                     {"knot_mape_pct", f.knot.mape},
                     {"trajectory_mae_soh", f.trajectory.mae},
                     {"trajectory_mape_pct", f.trajectory.mape}});
  }
  j["folds"] = folds;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : report.cells) {
    nlohmann::json entry = {{"cell_id", c.cell_id}, {"fold", c.fold}, {"failed", c.failed}};
    if (c.failed) {
      entry["error"] = c.error;
    } else {
      entry["knot_mae_cycles"] = c.knot.mae;
      entry["knot_mape_pct"] = c.knot.mape;
      entry["trajectory_mae_soh"] = c.trajectory.mae;
      entry["trajectory_mape_pct"] = c.trajectory.mape;
      entry["eol_true"] = c.eol_true;
      entry["eol_pred"] = c.eol_pred;
      entry["eol_ci"] = {c.eol_lo, c.eol_hi};
      entry["eol_covered"] = c.eol_covered;
    }
    cells.push_back(entry);
  }
  j["cells"] = cells;
  return j.dump(2);
}

namespace {

double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  if (sorted.size() == 1) return sorted[0];
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

RobustnessRow box_stats(double sigma, std::vector<double> deviations) {
  RobustnessRow row;
  row.sigma = sigma;
  row.deviations = deviations;
  std::sort(deviations.begin(), deviations.end());
  row.q1 = quantile_sorted(deviations, 0.25);
  row.median = quantile_sorted(deviations, 0.5);
  row.q3 = quantile_sorted(deviations, 0.75);
  const double iqr = row.q3 - row.q1;
  const double lo_fence = row.q1 - 1.5 * iqr;
  const double hi_fence = row.q3 + 1.5 * iqr;
  row.lo_whisker = row.q3;
  row.hi_whisker = row.q1;
  for (const double d : deviations) {
    if (d < lo_fence || d > hi_fence) {
      row.outliers.push_back(d);
    } else {
      row.lo_whisker = std::min(row.lo_whisker, d);
      row.hi_whisker = std::max(row.hi_whisker, d);
    }
  }
  return row;
}

}  // namespace

std::vector<RobustnessRow> robustness_study(const Fleet& fleet,
                                            const std::vector<std::size_t>& test_idx,
                                            const TrainedPredictor& predictor,
                                            const std::vector<double>& sigmas, int n_draws,
                                            std::uint64_t seed, const PipelineConfig& cfg,
                                            int mc_passes) {
  if (n_draws < 1) throw Error("robustness_study: need at least one draw");
  if (mc_passes < 2) throw Error("robustness_study: need at least two dropout passes");

  // the per-cell dropout stream is fixed across clean and perturbed passes
  auto predict = [&](std::size_t k, const InputMatrix& input) {
    return predict_mc(predictor.net, input, mc_passes, seed ^ (0x5eedull + test_idx[k]))
        .mean_cycles;
  };

  std::vector<double> clean_mae(test_idx.size());
  std::vector<InputMatrix> inputs(test_idx.size());
  for (std::size_t k = 0; k < test_idx.size(); ++k) {
    const CellData& cell = fleet[test_idx[k]];
    inputs[k] = cell_input(cell, cfg.input_cycles, cfg.n_points);
    const Vec cycles = predict(k, inputs[k]);
    clean_mae[k] =
        score_cell(cell, predictor.spec, cycles, cycles(cycles.size() - 1),
                   cycles(cycles.size() - 1), cfg)
            .trajectory.mae;
  }

  // one deviation per draw: every cell's input re-perturbed, fleet-mean MAE
  // compared against the clean fleet-mean MAE
  const double clean_fleet_mae =
      std::accumulate(clean_mae.begin(), clean_mae.end(), 0.0) / clean_mae.size();
  std::vector<RobustnessRow> rows;
  for (std::size_t s = 0; s < sigmas.size(); ++s) {
    std::vector<double> deviations(static_cast<std::size_t>(n_draws));
    parallel_for(static_cast<std::size_t>(n_draws), [&](std::size_t d) {
      double acc = 0.0;  // same summation structure as the clean baseline
      for (std::size_t k = 0; k < test_idx.size(); ++k) {
        const CellData& cell = fleet[test_idx[k]];
        const std::uint64_t draw_seed = seed + 1009 * test_idx[k] + 9176 * d +
                                        104729 * static_cast<std::uint64_t>(s);
        const InputMatrix noisy = perturb(inputs[k], sigmas[s], draw_seed);
        const Vec cycles = predict(k, noisy);
        acc += score_cell(cell, predictor.spec, cycles, cycles(cycles.size() - 1),
                          cycles(cycles.size() - 1), cfg)
                   .trajectory.mae;
      }
      deviations[d] = acc / static_cast<double>(test_idx.size()) - clean_fleet_mae;
    });
    rows.push_back(box_stats(sigmas[s], std::move(deviations)));
  }
  return rows;
}

std::string robustness_to_csv(const std::vector<RobustnessRow>& rows) {
  std::ostringstream out;
  out << "sigma,q1,median,q3,lo_whisker,hi_whisker,outliers\n";
  char buf[160];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%g,%.8g,%.8g,%.8g,%.8g,%.8g,", row.sigma, row.q1,
                  row.median, row.q3, row.lo_whisker, row.hi_whisker);
    out << buf;
    for (std::size_t k = 0; k < row.outliers.size(); ++k) {
      std::snprintf(buf, sizeof(buf), "%s%.8g", k ? ";" : "", row.outliers[k]);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

std::vector<CycleStudyRow> input_cycle_study(const Fleet& fleet,
                                             const std::vector<int>& cycle_counts,
                                             const PipelineConfig& cfg) {
  std::vector<CycleStudyRow> rows;
  for (const int count : cycle_counts) {
    PipelineConfig run_cfg = cfg;
    run_cfg.input_cycles = count;
    const EvalReport report = run_cv(fleet, run_cfg);
    CycleStudyRow row;
    row.input_cycles = count;
    row.knot = report.knot_aggregate;
    row.trajectory = report.trajectory_aggregate;
    row.trajectory_mae_ah = report.trajectory_mae_ah;
    rows.push_back(row);
  }
  return rows;
}

std::string cycle_study_to_csv(const std::vector<CycleStudyRow>& rows) {
  std::ostringstream out;
  out << "input_cycles,knot_mae_cycles,knot_mape_pct,trajectory_mae_soh,trajectory_mape_pct,"
         "trajectory_mae_ah\n";
  char buf[200];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6g,%.6g,%.6g,%.6g\n", row.input_cycles,
                  row.knot.mae, row.knot.mape, row.trajectory.mae, row.trajectory.mape,
                  row.trajectory_mae_ah);
    out << buf;
  }
  return out.str();
}

}  // namespace knotcast
