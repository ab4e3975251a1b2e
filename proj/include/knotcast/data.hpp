#pragma once

#include "knotcast/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace knotcast {

/// Raw measured samples of one charge-discharge cycle. Current is signed:
/// charge positive, discharge negative.
struct CycleRecord {
  std::string cell_id;
  int cycle_index = 0;        // 1-based
  Vec t;                      // seconds, strictly increasing
  Vec v;                      // volts
  Vec i;                      // amperes
  double discharge_capacity = 0.0;  // Ah
};

/// Throws if lengths disagree, L < 2, or t is not strictly increasing.
void validate(const CycleRecord& rec);

/// Fixed-dimension model input: rows are resampled voltage, current, and the
/// uniform time grid. For stacked multi-cycle inputs the time row is uniform
/// per cycle block.
struct InputMatrix {
  Mat x;                            // 3 x N
  std::vector<int> source_cycles;   // cycle indices concatenated into x

  Eigen::Index cols() const { return x.cols(); }
};

/// Per-cell capacity history at integer cycles.
struct CellSeries {
  std::string cell_id;
  std::vector<int> cycles;    // strictly increasing
  Vec capacity_ah;            // discharge capacity per cycle
  double nominal_capacity_ah = 0.0;

  Eigen::Index size() const { return capacity_ah.size(); }
  double soh(Eigen::Index k) const { return capacity_ah(k) / nominal_capacity_ah; }
};

/// Generator-side labels for a synthetic cell. knee_cycle falls back to the
/// 80% crossing for patterns without a distinct acceleration point.
struct CellTruth {
  std::string pattern;        // sublinear | linear | knee
  int eol_cycle = 0;          // first integer cycle with SOH < 0.80
  double eol_crossing = 0.0;  // real cycle where the noise-free SOH hits 0.80
  double knee_cycle = 0.0;
  double initial_soh = 0.0;
};

struct CellData {
  CellSeries series;
  std::vector<CycleRecord> cycles;  // retained early cycles, ascending
  std::optional<CellTruth> truth;
};

using Fleet = std::vector<CellData>;

/// Resamples one cycle onto an n_points uniform time grid by linear
/// interpolation; the first and last measured samples are kept exactly.
InputMatrix resample(const CycleRecord& rec, int n_points);

/// Resamples each cycle and concatenates the blocks along the length axis.
/// All records must come from one cell with contiguous cycle indices.
InputMatrix stack_cycles(const std::vector<CycleRecord>& recs, int n_points);

/// Adds zero-mean Gaussian noise with per-row variance sigma^2 * Var(row).
InputMatrix perturb(const InputMatrix& x, double sigma, std::uint64_t seed);

enum class Pattern { kSublinear, kLinear, kKnee };

const char* pattern_name(Pattern p);
Pattern pattern_from_name(const std::string& name);

/// Latent parameters fully determining one synthetic cell's noise-free
/// degradation shape. The generator draws these; tests may pin them.
struct CellLatents {
  Pattern pattern = Pattern::kLinear;
  double initial_soh = 0.99;
  int eol_cycle = 800;           // first integer cycle where SOH drops below 0.80
  double knee_cycle = 600.0;     // knee cells only
  double knee_sharpness = 0.25;  // transition width as a fraction of (eol - knee)
  double preknee_drop = 0.35;    // fraction of total fade carried by the slow phase
  double sublinear_power = 0.7;  // exponent of the decelerating fade
};

/// Noise-free SOH of the latent shape at a (real) cycle number. Strictly
/// decreasing in cycle and equal to 0.80 at eol_cycle - 0.5 exactly.
double latent_soh(const CellLatents& latents, double cycle);

struct SynthConfig {
  int cells = 169;
  int kept_cycles = 50;   // early cycles with raw waveforms retained
  int eol_min = 450;
  int eol_max = 1400;
  double weight_sublinear = 0.15;
  double weight_linear = 0.20;
  double weight_knee = 0.65;
  double initial_soh_min = 0.98;
  double initial_soh_max = 1.0;
  double capacity_noise = 0.001;  // relative; capped so SOH stays strictly decreasing
  double feature_noise = 0.01;    // relative jitter on waveform shape parameters
  double sample_noise_v = 0.002;  // volts, per raw sample
  double sample_noise_i = 0.004;  // amperes, per raw sample
  double nominal_capacity_ah = 1.1;
  std::string cell_prefix = "synth";
};

/// One cell from pinned latents (the fleet generator calls this per cell).
CellData synth_cell(const SynthConfig& config, const CellLatents& latents,
                    const std::string& cell_id, Rng rng);

/// Deterministic synthetic fleet: pattern mix, cycle lives, and early-cycle
/// waveforms whose shapes encode each cell's latent life parameters.
Fleet synth_fleet(const SynthConfig& config, std::uint64_t seed);

/// Writes cycles.csv, capacity.csv, and (when truths are present) truth.json.
void save_dataset(const Fleet& fleet, const std::string& dir);

/// Loads a dataset written in the same two-file schema; truth.json is picked
/// up when present.
Fleet load_dataset(const std::string& dir);

}  // namespace knotcast
