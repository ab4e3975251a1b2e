#pragma once

#include "knotcast/bayesopt.hpp"
#include "knotcast/knots.hpp"
#include "knotcast/nn.hpp"

#include <map>

namespace knotcast {

struct Metrics {
  double mae = 0.0;
  double mape = 0.0;  // percent
};

/// MAE and MAPE between observed and predicted values. MAPE requires nonzero
/// observations.
Metrics metrics(const Vec& observed, const Vec& predicted);

/// Fold assignment stratified by (knee class, group label); sizes within each
/// stratum differ by at most one, and so do the global fold sizes.
struct FoldPlan {
  int n_folds = 5;
  std::vector<int> fold_of;                 // by fleet index
  std::map<std::string, int> assignments;   // by cell id

  std::vector<std::size_t> test_indices(int fold) const;
  std::vector<std::size_t> train_indices(int fold) const;
};

/// Knee class comes from the generator truth when present, otherwise from a
/// change-point fit to the capacity series; the group label is the truth
/// pattern when present. Strata smaller than n_folds fall back to plain
/// round-robin within the stratum.
FoldPlan stratified_folds(const Fleet& fleet, int n_folds, std::uint64_t seed);

struct PipelineConfig {
  int knots = 3;
  std::string knot_mode = "uniform";  // uniform | optimized
  double eol_level = 80.0;
  double top_level = 98.0;
  int input_cycles = 1;
  int n_points = 128;
  int smooth_window = 5;
  int bo_budget = 60;
  int folds = 5;
  std::string anchor_mode = "measured";  // measured | top
  TrainConfig train;
  std::uint64_t seed = 17;
};

/// A trained interval predictor together with the knot levels it was fit for.
struct TrainedPredictor {
  ConvNet net;
  KnotSpec spec;
  TrainResult training;
};

/// Model input for one cell: its first input_cycles cycles, stacked.
InputMatrix cell_input(const CellData& cell, int input_cycles, int n_points);

/// Anchor for reconstructing this cell's trajectory at prediction time.
Anchor cell_anchor(const CellData& cell, const PipelineConfig& cfg);

/// Knot labels for training: first-crossing cycles of the spec levels.
Vec cell_labels(const CellData& cell, const KnotSpec& spec, int smooth_window);

/// Trains the interval head on the given fleet subset.
TrainedPredictor fit_pipeline(const Fleet& fleet, const std::vector<std::size_t>& train_idx,
                              const KnotSpec& spec, const PipelineConfig& cfg,
                              std::uint64_t seed);

struct CellScore {
  std::string cell_id;
  int fold = -1;
  bool failed = false;
  std::string error;
  Metrics knot;           // cycles
  Metrics trajectory;     // MAE in SOH fraction, MAPE percent
  double trajectory_mae_ah = 0.0;
  double eol_true = 0.0;  // extracted 80% crossing
  double eol_pred = 0.0;
  double eol_lo = 0.0, eol_hi = 0.0;  // 95% CI from the dropout passes
  bool eol_covered = false;
};

/// Scores one cell against predicted knot cycles (and an optional CI on the
/// final knot). Trajectory metrics run on integer cycles from the anchor to
/// the observed end of life.
CellScore score_cell(const CellData& cell, const KnotSpec& spec, const Vec& predicted_cycles,
                     double eol_lo, double eol_hi, const PipelineConfig& cfg);

struct FoldSummary {
  int fold = 0;
  KnotSpec spec;
  int train_cells = 0;
  int test_cells = 0;
  Metrics knot;
  Metrics trajectory;
};

struct EvalReport {
  std::vector<CellScore> cells;
  std::vector<FoldSummary> folds;
  Metrics knot_aggregate;
  Metrics trajectory_aggregate;
  double trajectory_mae_ah = 0.0;
  double ci_coverage = 0.0;  // fraction of cells whose true EOL lies in the CI
  double mean_ci_width_eol = 0.0;
  int failed_cells = 0;
};

/// Five-fold (configurable) cross-validation of the full pipeline: label
/// extraction and (optionally) knot optimization on the training split only,
/// then training, prediction, reconstruction, and scoring on the held-out
/// split. A failing cell is recorded, not fatal.
EvalReport run_cv(const Fleet& fleet, const PipelineConfig& cfg);

std::string report_to_text(const EvalReport& report);
std::string report_to_json(const EvalReport& report);

struct RobustnessRow {
  double sigma = 0.0;
  double q1 = 0.0, median = 0.0, q3 = 0.0;
  double lo_whisker = 0.0, hi_whisker = 0.0;
  std::vector<double> outliers;
  std::vector<double> deviations;  // one per (cell, draw)
};

/// Perturbs each test cell's input n_draws times per sigma and records, per
/// draw, the change in fleet-mean trajectory MAE against the clean prediction.
/// Predictions are MC-dropout means with the dropout streams fixed per cell,
/// so a deviation reflects the input perturbation alone and sigma = 0 gives
/// exactly zero for every draw.
std::vector<RobustnessRow> robustness_study(const Fleet& fleet,
                                            const std::vector<std::size_t>& test_idx,
                                            const TrainedPredictor& predictor,
                                            const std::vector<double>& sigmas, int n_draws,
                                            std::uint64_t seed, const PipelineConfig& cfg,
                                            int mc_passes = 25);

std::string robustness_to_csv(const std::vector<RobustnessRow>& rows);

struct CycleStudyRow {
  int input_cycles = 0;
  Metrics knot;
  Metrics trajectory;
  double trajectory_mae_ah = 0.0;
};

/// Full cross-validation per input cycle count, same seed for every count.
std::vector<CycleStudyRow> input_cycle_study(const Fleet& fleet,
                                             const std::vector<int>& cycle_counts,
                                             const PipelineConfig& cfg);

std::string cycle_study_to_csv(const std::vector<CycleStudyRow>& rows);

}  // namespace knotcast
