#include "knotcast/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace knotcast {

namespace {

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

void validate(const CycleRecord& rec) {
  const Eigen::Index n = rec.t.size();
  if (n < 2 || rec.v.size() != n || rec.i.size() != n) {
    std::ostringstream msg;
    msg << "cycle record " << rec.cell_id << "#" << rec.cycle_index
        << ": need matching t/v/i of length >= 2, got " << n << "/" << rec.v.size() << "/"
        << rec.i.size();
    throw Error(msg.str());
  }
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    if (!(rec.t(k + 1) > rec.t(k))) {
      std::ostringstream msg;
      msg << "cycle record " << rec.cell_id << "#" << rec.cycle_index
          << ": time not strictly increasing at sample " << k + 1;
      throw Error(msg.str());
    }
  }
}

InputMatrix resample(const CycleRecord& rec, int n_points) {
  validate(rec);
  if (n_points < 2) {
    throw Error("resample: n_points must be >= 2, got " + std::to_string(n_points));
  }
  const Eigen::Index raw_n = rec.t.size();
  const double t0 = rec.t(0);
  const double t_end = rec.t(raw_n - 1);

  InputMatrix out;
  out.x.resize(3, n_points);
  out.source_cycles = {rec.cycle_index};

  Eigen::Index seg = 0;  // current raw interval, advanced monotonically
  for (int k = 0; k < n_points; ++k) {
    const double tq = t0 + (t_end - t0) * static_cast<double>(k) / (n_points - 1);
    out.x(2, k) = tq;
    while (seg + 2 < raw_n && rec.t(seg + 1) <= tq) ++seg;
    const double w = (tq - rec.t(seg)) / (rec.t(seg + 1) - rec.t(seg));
    out.x(0, k) = rec.v(seg) + w * (rec.v(seg + 1) - rec.v(seg));
    out.x(1, k) = rec.i(seg) + w * (rec.i(seg + 1) - rec.i(seg));
  }
  // the grid endpoints coincide with the raw endpoints: keep them exact
  out.x(0, 0) = rec.v(0);
  out.x(1, 0) = rec.i(0);
  out.x(0, n_points - 1) = rec.v(raw_n - 1);
  out.x(1, n_points - 1) = rec.i(raw_n - 1);
  out.x(2, n_points - 1) = t_end;
  return out;
}

InputMatrix stack_cycles(const std::vector<CycleRecord>& recs, int n_points) {
  if (recs.empty()) throw Error("stack_cycles: empty cycle list");
  for (std::size_t k = 0; k < recs.size(); ++k) {
    if (recs[k].cell_id != recs[0].cell_id) {
      throw Error("stack_cycles: mixed cell ids '" + recs[0].cell_id + "' and '" +
                  recs[k].cell_id + "'");
    }
    if (k > 0 && recs[k].cycle_index != recs[k - 1].cycle_index + 1) {
      std::ostringstream msg;
      msg << "stack_cycles: cycle indices must be contiguous, got " << recs[k - 1].cycle_index
          << " then " << recs[k].cycle_index;
      throw Error(msg.str());
    }
  }
  InputMatrix out;
  out.x.resize(3, n_points * static_cast<Eigen::Index>(recs.size()));
  out.source_cycles.reserve(recs.size());
  for (std::size_t k = 0; k < recs.size(); ++k) {
    out.x.middleCols(static_cast<Eigen::Index>(k) * n_points, n_points) =
        resample(recs[k], n_points).x;
    out.source_cycles.push_back(recs[k].cycle_index);
  }
  return out;
}

InputMatrix perturb(const InputMatrix& x, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw Error("perturb: sigma must be >= 0");
  InputMatrix out = x;
  if (sigma == 0.0) return out;
  Rng rng(seed);
  for (Eigen::Index r = 0; r < x.x.rows(); ++r) {
    const double sd = sigma * std::sqrt(variance_of(x.x.row(r).transpose()));
    for (Eigen::Index c = 0; c < x.x.cols(); ++c) {
      out.x(r, c) += rng.normal(0.0, sd);
    }
  }
  return out;
}

const char* pattern_name(Pattern p) {
  switch (p) {
    case Pattern::kSublinear: return "sublinear";
    case Pattern::kLinear: return "linear";
    case Pattern::kKnee: return "knee";
  }
  return "?";
}

Pattern pattern_from_name(const std::string& name) {
  if (name == "sublinear") return Pattern::kSublinear;
  if (name == "linear") return Pattern::kLinear;
  if (name == "knee") return Pattern::kKnee;
  throw Error("unknown degradation pattern '" + name + "'");
}

double latent_soh(const CellLatents& lat, double cycle) {
  const double crossing = lat.eol_cycle - 0.5;
  const double total_drop = lat.initial_soh - 0.80;
  const double progress = (cycle - 1.0) / (crossing - 1.0);
  switch (lat.pattern) {
    case Pattern::kLinear:
      return lat.initial_soh - total_drop * progress;
    case Pattern::kSublinear:
      return lat.initial_soh -
             total_drop * std::pow(std::max(progress, 0.0), lat.sublinear_power);
    case Pattern::kKnee: {
      const double knee = std::min(lat.knee_cycle, crossing - 10.0);
      const double width = lat.knee_sharpness * (crossing - knee);
      const double slow_slope = lat.preknee_drop * total_drop / (crossing - 1.0);
      const double fast_scale = (total_drop - slow_slope * (crossing - 1.0)) /
                                (width * softplus((crossing - knee) / width));
      return lat.initial_soh - slow_slope * (cycle - 1.0) -
             fast_scale * width * softplus((cycle - knee) / width);
    }
  }
  throw Error("latent_soh: bad pattern");
}

namespace {

// Shape parameters of one cell's charge-discharge waveform. Several of them
// are smooth functions of the latent life parameters, which is what makes the
// remaining life learnable from early cycles.
struct WaveShape {
  double cc_seconds;       // constant-current charge duration
  double cv_fraction;      // CV duration as a fraction of CC
  double cv_decay;         // CV current taper exponent
  double charge_power;     // curvature of the CC voltage rise
  double sag_volts;        // mid-discharge voltage depression
  double discharge_power;  // curvature of the discharge voltage drop
  double drift_per_cycle;  // slow growth of cv_fraction and sag with age
  double rest_seconds;
  double rest_depth;       // post-charge relaxation dip, volts
};

constexpr double kChargeVMin = 3.0;
constexpr double kChargeVMax = 3.6;
constexpr double kDischargeVStart = 3.45;
constexpr double kDischargeVEnd = 2.0;

WaveShape draw_wave_shape(const SynthConfig& cfg, const CellLatents& lat, Rng& rng) {
  const double crossing = lat.eol_cycle - 0.5;
  const double life_q = std::clamp((crossing - 400.0) / 1000.0, 0.0, 1.0);
  const double pattern_q = lat.pattern == Pattern::kSublinear ? 0.0
                           : lat.pattern == Pattern::kLinear  ? 0.5
                                                              : 1.0;
  const double knee_q =
      lat.pattern == Pattern::kKnee ? std::clamp(lat.knee_cycle / crossing, 0.0, 1.0) : 1.0;
  // latent curve-shape parameter normalized to [0, 1] per pattern
  const double shape_q = lat.pattern == Pattern::kKnee
                             ? std::clamp((lat.preknee_drop - 0.28) / 0.14, 0.0, 1.0)
                         : lat.pattern == Pattern::kSublinear
                             ? std::clamp((lat.sublinear_power - 0.62) / 0.16, 0.0, 1.0)
                             : 0.5;
  const double width_q = lat.pattern == Pattern::kKnee
                             ? std::clamp((lat.knee_sharpness - 0.15) / 0.2, 0.0, 1.0)
                             : 0.5;
  auto jitter = [&] { return 1.0 + cfg.feature_noise * rng.normal(); };

  WaveShape w;
  w.cc_seconds = 3200.0 * jitter();
  w.cv_fraction = (0.20 + 0.45 * (1.0 - life_q) + 0.06 * (1.0 - knee_q)) * jitter();
  w.cv_decay = std::log(50.0) * (0.7 + 0.6 * width_q) * jitter();
  w.charge_power = (0.55 + 0.30 * life_q - 0.15 * pattern_q) * jitter();
  w.sag_volts = (0.06 + 0.30 * (1.0 - life_q)) * (1.0 + 0.15 * pattern_q) * jitter();
  w.discharge_power = lat.pattern == Pattern::kKnee ? (0.85 + 0.40 * knee_q) * jitter()
                      : lat.pattern == Pattern::kSublinear
                          ? (0.95 + 0.50 * shape_q) * jitter()
                          : 1.10 * jitter();
  w.drift_per_cycle = 2e-4 * (1.2 - life_q) * jitter();
  w.rest_seconds = 300.0 * jitter();
  w.rest_depth = (0.04 + 0.10 * shape_q) * jitter();
  return w;
}

CycleRecord make_cycle(const SynthConfig& cfg, const WaveShape& shape, const std::string& id,
                       int cycle_index, double soh_now, Rng& rng) {
  auto cyc_jitter = [&] { return 1.0 + 2.0 * cfg.feature_noise * rng.normal(); };
  const double age = 1.0 + shape.drift_per_cycle * (cycle_index - 1);

  const double t_cc = shape.cc_seconds * cyc_jitter();
  const double t_cv = shape.cv_fraction * age * cyc_jitter() * t_cc;
  const double t_rest = shape.rest_seconds * cyc_jitter();
  const double t_dis = 900.0 * soh_now * cyc_jitter();  // full discharge at 4C
  const double t_total = t_cc + t_cv + t_rest + t_dis;

  const double i_charge = cfg.nominal_capacity_ah;  // 1C
  const double i_discharge = -4.0 * cfg.nominal_capacity_ah;
  const double sag = shape.sag_volts * age;

  const int n = static_cast<int>(rng.uniform_int(140, 200));
  Vec t(n);
  double acc = 0.0;
  t(0) = 0.0;
  for (int k = 1; k < n; ++k) {
    acc += rng.uniform(0.5, 1.5);
    t(k) = acc;
  }
  t *= t_total / acc;  // endpoints land on 0 and t_total

  CycleRecord rec;
  rec.cell_id = id;
  rec.cycle_index = cycle_index;
  rec.t = t;
  rec.v.resize(n);
  rec.i.resize(n);
  for (int k = 0; k < n; ++k) {
    double volts, amps;
    const double s = t(k);
    if (s < t_cc) {
      const double u = s / t_cc;
      const double rise = 0.25 * u + 0.75 * std::pow(u, shape.charge_power);
      volts = kChargeVMin + (kChargeVMax - kChargeVMin) * rise;
      amps = i_charge;
    } else if (s < t_cc + t_cv) {
      const double u = (s - t_cc) / t_cv;
      volts = kChargeVMax;
      amps = i_charge * std::exp(-shape.cv_decay * u);  // taper toward the cutoff
    } else if (s < t_cc + t_cv + t_rest) {
      const double u = (s - t_cc - t_cv) / t_rest;
      volts = kChargeVMax - shape.rest_depth * (1.0 - std::exp(-3.0 * u));
      amps = 0.0;
    } else {
      const double u = std::min((s - t_cc - t_cv - t_rest) / t_dis, 1.0);
      volts = kDischargeVStart -
              (kDischargeVStart - kDischargeVEnd) * std::pow(u, shape.discharge_power) -
              sag * std::sin(M_PI * u);
      amps = i_discharge;
    }
    rec.v(k) = volts + cfg.sample_noise_v * rng.normal();
    rec.i(k) = amps + cfg.sample_noise_i * rng.normal();
  }
  return rec;
}

}  // namespace

CellData synth_cell(const SynthConfig& cfg, const CellLatents& lat, const std::string& cell_id,
                    Rng rng) {
  const int n_end = lat.eol_cycle + std::max(10, lat.eol_cycle / 50);

  Vec clean(n_end);
  for (int c = 1; c <= n_end; ++c) clean(c - 1) = latent_soh(lat, c);

  // Measurement noise capped below half the local decrement and below the
  // margin to the 80% line, so monotonicity and the integer EOL survive.
  Vec measured(n_end);
  for (int c = 1; c <= n_end; ++c) {
    const double drop_prev = c > 1 ? clean(c - 2) - clean(c - 1) : clean(c - 1) - clean(c);
    const double drop_next = c < n_end ? clean(c - 1) - clean(c) : drop_prev;
    double cap = 0.45 * std::min(drop_prev, drop_next);
    cap = std::min(cap, 0.9 * std::abs(clean(c - 1) - 0.80));
    const double eps = std::clamp(rng.normal(0.0, cfg.capacity_noise * clean(c - 1)), -cap, cap);
    measured(c - 1) = clean(c - 1) + eps;
  }

  CellData cell;
  cell.series.cell_id = cell_id;
  cell.series.nominal_capacity_ah = cfg.nominal_capacity_ah;
  cell.series.cycles.resize(n_end);
  for (int c = 1; c <= n_end; ++c) cell.series.cycles[c - 1] = c;
  cell.series.capacity_ah = measured * cfg.nominal_capacity_ah;

  const WaveShape shape = draw_wave_shape(cfg, lat, rng);
  const int kept = std::min(cfg.kept_cycles, n_end);
  cell.cycles.reserve(kept);
  for (int c = 1; c <= kept; ++c) {
    CycleRecord rec = make_cycle(cfg, shape, cell_id, c, measured(c - 1), rng);
    rec.discharge_capacity = cell.series.capacity_ah(c - 1);
    cell.cycles.push_back(std::move(rec));
  }

  CellTruth truth;
  truth.pattern = pattern_name(lat.pattern);
  truth.eol_cycle = lat.eol_cycle;
  truth.eol_crossing = lat.eol_cycle - 0.5;
  truth.knee_cycle = lat.pattern == Pattern::kKnee ? lat.knee_cycle : truth.eol_crossing;
  truth.initial_soh = lat.initial_soh;
  cell.truth = truth;
  return cell;
}

Fleet synth_fleet(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.cells < 1) throw Error("synth_fleet: cell count must be positive");
  const double wsum = cfg.weight_sublinear + cfg.weight_linear + cfg.weight_knee;
  if (cfg.weight_sublinear < 0.0 || cfg.weight_linear < 0.0 || cfg.weight_knee < 0.0 ||
      wsum <= 0.0) {
    throw Error("synth_fleet: pattern weights must be nonnegative with a positive sum");
  }
  if (cfg.eol_min < 3 || cfg.eol_max < cfg.eol_min) {
    throw Error("synth_fleet: invalid EOL cycle range");
  }

  const int width = cfg.cells > 1000 ? 4 : 3;
  Rng root(seed);
  Fleet fleet(cfg.cells);
  for (int k = 0; k < cfg.cells; ++k) {
    Rng rng = root.fork(static_cast<std::uint64_t>(k));

    CellLatents lat;
    const double pick = rng.uniform() * wsum;
    lat.pattern = pick < cfg.weight_sublinear ? Pattern::kSublinear
                  : pick < cfg.weight_sublinear + cfg.weight_linear ? Pattern::kLinear
                                                                    : Pattern::kKnee;
    lat.initial_soh = rng.uniform(cfg.initial_soh_min, cfg.initial_soh_max);
    lat.eol_cycle = static_cast<int>(rng.uniform_int(cfg.eol_min, cfg.eol_max));
    const double crossing = lat.eol_cycle - 0.5;
    lat.knee_cycle = crossing * rng.uniform(0.55, 0.80);
    lat.knee_sharpness = rng.uniform(0.15, 0.35);
    lat.preknee_drop = rng.uniform(0.28, 0.42);
    lat.sublinear_power = rng.uniform(0.62, 0.78);

    char id[64];
    std::snprintf(id, sizeof(id), "%s%0*d", cfg.cell_prefix.c_str(), width, k);
    fleet[k] = synth_cell(cfg, lat, id, rng);
  }
  return fleet;
}

void save_dataset(const Fleet& fleet, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::ofstream cyc(fs::path(dir) / "cycles.csv");
  if (!cyc) throw Error("save_dataset: cannot write to " + dir);
  cyc << "cell_id,cycle,t_s,voltage_v,current_a\n";
  for (const auto& cell : fleet) {
    for (const auto& rec : cell.cycles) {
      for (Eigen::Index k = 0; k < rec.t.size(); ++k) {
        cyc << rec.cell_id << ',' << rec.cycle_index << ',' << fmt_double(rec.t(k)) << ','
            << fmt_double(rec.v(k)) << ',' << fmt_double(rec.i(k)) << '\n';
      }
    }
  }

  std::ofstream cap(fs::path(dir) / "capacity.csv");
  cap << "cell_id,cycle,discharge_capacity_ah,nominal_capacity_ah\n";
  for (const auto& cell : fleet) {
    for (Eigen::Index k = 0; k < cell.series.size(); ++k) {
      cap << cell.series.cell_id << ',' << cell.series.cycles[static_cast<std::size_t>(k)] << ','
          << fmt_double(cell.series.capacity_ah(k)) << ','
          << fmt_double(cell.series.nominal_capacity_ah) << '\n';
    }
  }

  const bool have_truth = std::all_of(fleet.begin(), fleet.end(),
                                      [](const CellData& c) { return c.truth.has_value(); });
  if (have_truth && !fleet.empty()) {
    nlohmann::json truths;
    for (const auto& cell : fleet) {
      const CellTruth& t = *cell.truth;
      truths[cell.series.cell_id] = {{"pattern", t.pattern},
                                     {"eol_cycle", t.eol_cycle},
                                     {"eol_crossing", t.eol_crossing},
                                     {"knee_cycle", t.knee_cycle},
                                     {"initial_soh", t.initial_soh}};
    }
    std::ofstream out(fs::path(dir) / "truth.json");
    out << truths.dump(2) << '\n';
  }
}

namespace {

struct CsvReader {
  std::ifstream in;
  std::string path;
  long line_no = 0;

  explicit CsvReader(const std::string& p) : in(p), path(p) {
    if (!in) throw Error("cannot open " + p);
  }

  bool next(std::vector<std::string>& fields) {
    std::string line;
    if (!std::getline(in, line)) return false;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    fields.clear();
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string::npos ? comma : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return true;
  }

  [[noreturn]] void fail(const std::string& what) const {
    std::ostringstream msg;
    msg << path << ":" << line_no << ": " << what;
    throw Error(msg.str());
  }

  double parse_double(const std::string& s, const char* col) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) fail(std::string("trailing junk in ") + col + " value '" + s + "'");
      return v;
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      fail(std::string("bad ") + col + " value '" + s + "'");
    }
  }

  int parse_int(const std::string& s, const char* col) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(s, &used);
      if (used != s.size()) fail(std::string("trailing junk in ") + col + " value '" + s + "'");
      return v;
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      fail(std::string("bad ") + col + " value '" + s + "'");
    }
  }

  void expect_header(const std::string& expected) {
    std::vector<std::string> fields;
    if (!next(fields)) fail("empty file");
    std::string joined;
    for (std::size_t k = 0; k < fields.size(); ++k) {
      if (k) joined += ',';
      joined += fields[k];
    }
    if (joined != expected) fail("expected header '" + expected + "', got '" + joined + "'");
  }
};

}  // namespace

Fleet load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;

  // capacity.csv defines the cell set and per-cycle capacities
  struct SeriesAcc {
    std::vector<int> cycles;
    std::vector<double> caps;
    double nominal = 0.0;
  };
  std::map<std::string, SeriesAcc> series;
  {
    CsvReader r((fs::path(dir) / "capacity.csv").string());
    r.expect_header("cell_id,cycle,discharge_capacity_ah,nominal_capacity_ah");
    std::vector<std::string> f;
    while (r.next(f)) {
      if (f.size() == 1 && f[0].empty()) continue;
      if (f.size() != 4) r.fail("expected 4 columns, got " + std::to_string(f.size()));
      SeriesAcc& acc = series[f[0]];
      const int cycle = r.parse_int(f[1], "cycle");
      if (cycle < 1) r.fail("cycle index must be positive");
      if (!acc.cycles.empty() && cycle <= acc.cycles.back()) {
        r.fail("cell " + f[0] + ": cycle " + f[1] + " not strictly increasing");
      }
      const double cap = r.parse_double(f[2], "discharge_capacity_ah");
      const double nominal = r.parse_double(f[3], "nominal_capacity_ah");
      if (cap < 0.0) r.fail("cell " + f[0] + ": negative discharge capacity");
      if (nominal <= 0.0) r.fail("cell " + f[0] + ": nominal capacity must be positive");
      if (acc.cycles.empty()) {
        acc.nominal = nominal;
      } else if (nominal != acc.nominal) {
        r.fail("cell " + f[0] + ": nominal capacity changed mid-series");
      }
      acc.cycles.push_back(cycle);
      acc.caps.push_back(cap);
    }
  }
  if (series.empty()) throw Error(dir + "/capacity.csv: no data rows");

  // cycles.csv carries the raw waveforms of the retained cycles
  std::map<std::string, std::vector<CycleRecord>> waveforms;
  {
    CsvReader r((fs::path(dir) / "cycles.csv").string());
    r.expect_header("cell_id,cycle,t_s,voltage_v,current_a");
    std::vector<std::string> f;
    CycleRecord* cur = nullptr;
    std::vector<double> ts, vs, is;
    std::string cur_cell;
    int cur_cycle = -1;
    auto flush = [&] {
      if (!cur) return;
      cur->t = Eigen::Map<Vec>(ts.data(), static_cast<Eigen::Index>(ts.size()));
      cur->v = Eigen::Map<Vec>(vs.data(), static_cast<Eigen::Index>(vs.size()));
      cur->i = Eigen::Map<Vec>(is.data(), static_cast<Eigen::Index>(is.size()));
      cur = nullptr;
    };
    while (r.next(f)) {
      if (f.size() == 1 && f[0].empty()) continue;
      if (f.size() != 5) r.fail("expected 5 columns, got " + std::to_string(f.size()));
      const int cycle = r.parse_int(f[1], "cycle");
      if (f[0] != cur_cell || cycle != cur_cycle) {
        flush();
        auto& recs = waveforms[f[0]];
        for (const auto& prev : recs) {
          if (prev.cycle_index == cycle) {
            r.fail("cell " + f[0] + " cycle " + f[1] + ": samples split across the file");
          }
        }
        recs.emplace_back();
        cur = &recs.back();
        cur->cell_id = f[0];
        cur->cycle_index = cycle;
        cur_cell = f[0];
        cur_cycle = cycle;
        ts.clear();
        vs.clear();
        is.clear();
      }
      const double t = r.parse_double(f[2], "t_s");
      if (!ts.empty() && t <= ts.back()) {
        r.fail("cell " + f[0] + " cycle " + f[1] + ": t_s not strictly increasing");
      }
      ts.push_back(t);
      vs.push_back(r.parse_double(f[3], "voltage_v"));
      is.push_back(r.parse_double(f[4], "current_a"));
    }
    flush();
  }

  // optional generator labels
  std::map<std::string, CellTruth> truths;
  {
    const fs::path tp = fs::path(dir) / "truth.json";
    if (fs::exists(tp)) {
      std::ifstream in(tp);
      nlohmann::json j = nlohmann::json::parse(in);
      for (const auto& [id, entry] : j.items()) {
        CellTruth t;
        t.pattern = entry.at("pattern").get<std::string>();
        t.eol_cycle = entry.at("eol_cycle").get<int>();
        t.eol_crossing = entry.at("eol_crossing").get<double>();
        t.knee_cycle = entry.at("knee_cycle").get<double>();
        t.initial_soh = entry.at("initial_soh").get<double>();
        truths[id] = t;
      }
    }
  }

  Fleet fleet;
  fleet.reserve(series.size());
  for (auto& [id, acc] : series) {
    CellData cell;
    cell.series.cell_id = id;
    cell.series.cycles = acc.cycles;
    cell.series.capacity_ah =
        Eigen::Map<Vec>(acc.caps.data(), static_cast<Eigen::Index>(acc.caps.size()));
    cell.series.nominal_capacity_ah = acc.nominal;

    auto w = waveforms.find(id);
    if (w != waveforms.end()) {
      std::sort(w->second.begin(), w->second.end(),
                [](const CycleRecord& a, const CycleRecord& b) {
                  return a.cycle_index < b.cycle_index;
                });
      for (auto& rec : w->second) {
        validate(rec);
        const auto it = std::lower_bound(acc.cycles.begin(), acc.cycles.end(), rec.cycle_index);
        if (it == acc.cycles.end() || *it != rec.cycle_index) {
          throw Error(dir + "/capacity.csv: no capacity row for cell " + id + " cycle " +
                      std::to_string(rec.cycle_index));
        }
        rec.discharge_capacity = cell.series.capacity_ah(std::distance(acc.cycles.begin(), it));
      }
      cell.cycles = std::move(w->second);
      waveforms.erase(w);
    }
    auto t = truths.find(id);
    if (t != truths.end()) cell.truth = t->second;
    fleet.push_back(std::move(cell));
  }
  if (!waveforms.empty()) {
    throw Error(dir + "/cycles.csv: cell " + waveforms.begin()->first +
                " has waveforms but no capacity rows");
  }
  return fleet;
}

}  // namespace knotcast
