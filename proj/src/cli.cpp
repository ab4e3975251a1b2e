#include "knotcast/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "knotcast/eval.hpp"
#include "knotcast/knee.hpp"

namespace knotcast::cli {

namespace {

namespace fs = std::filesystem;

struct RunConfig {
  std::uint64_t seed = 17;
  std::string out = "out";
  std::string data_source = "synth";  // synth | csv
  std::string data_dir;               // dataset location (csv) or synth target
  SynthConfig synth;
  int knots = 3;
  std::string knot_mode = "uniform";
  double eol_level = 80.0;
  double top_level = 98.0;
  int bo_budget = 60;
  int input_cycles = 1;
  int n_points = 128;
  int folds = 5;
  int smooth_window = 5;
  std::string anchor_mode = "measured";
  TrainConfig train;
  std::vector<double> sigmas = {0.001, 0.003, 0.01};
  int robustness_draws = 100;
  std::vector<int> cycle_counts = {1, 3, 10, 50};
};

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file " + path);
  const nlohmann::json j = nlohmann::json::parse(in);

  cfg.seed = j.value("seed", cfg.seed);
  cfg.out = j.value("out", cfg.out);
  cfg.input_cycles = j.value("input_cycles", cfg.input_cycles);
  cfg.n_points = j.value("n_points", cfg.n_points);
  cfg.folds = j.value("folds", cfg.folds);
  cfg.smooth_window = j.value("smooth_window", cfg.smooth_window);
  cfg.anchor_mode = j.value("anchor_mode", cfg.anchor_mode);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    cfg.data_source = d.value("source", cfg.data_source);
    cfg.data_dir = d.value("dir", cfg.data_dir);
    cfg.synth.cells = d.value("cells", cfg.synth.cells);
    cfg.synth.kept_cycles = d.value("kept_cycles", cfg.synth.kept_cycles);
    cfg.synth.eol_min = d.value("eol_min", cfg.synth.eol_min);
    cfg.synth.eol_max = d.value("eol_max", cfg.synth.eol_max);
    cfg.synth.capacity_noise = d.value("capacity_noise", cfg.synth.capacity_noise);
    cfg.synth.feature_noise = d.value("feature_noise", cfg.synth.feature_noise);
    cfg.synth.nominal_capacity_ah = d.value("nominal_capacity_ah", cfg.synth.nominal_capacity_ah);
    if (d.contains("weights")) {
      const auto& w = d.at("weights");
      cfg.synth.weight_sublinear = w.value("sublinear", cfg.synth.weight_sublinear);
      cfg.synth.weight_linear = w.value("linear", cfg.synth.weight_linear);
      cfg.synth.weight_knee = w.value("knee", cfg.synth.weight_knee);
    }
  }
  if (j.contains("knots")) {
    const auto& k = j.at("knots");
    cfg.knots = k.value("k", cfg.knots);
    cfg.knot_mode = k.value("mode", cfg.knot_mode);
    cfg.eol_level = k.value("eol", cfg.eol_level);
    cfg.top_level = k.value("top", cfg.top_level);
    cfg.bo_budget = k.value("bo_budget", cfg.bo_budget);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.patience = t.value("patience", cfg.train.patience);
    cfg.train.val_fraction = t.value("val_fraction", cfg.train.val_fraction);
    cfg.train.mc_samples = t.value("mc_samples", cfg.train.mc_samples);
    cfg.train.optimizer = t.value("optimizer", cfg.train.optimizer);
  }
  if (j.contains("robustness")) {
    const auto& r = j.at("robustness");
    cfg.sigmas = r.value("sigmas", cfg.sigmas);
    cfg.robustness_draws = r.value("draws", cfg.robustness_draws);
  }
  cfg.cycle_counts = j.value("cycle_counts", cfg.cycle_counts);
}

PipelineConfig pipeline_of(const RunConfig& cfg) {
  PipelineConfig p;
  p.knots = cfg.knots;
  p.knot_mode = cfg.knot_mode;
  p.eol_level = cfg.eol_level;
  p.top_level = cfg.top_level;
  p.input_cycles = cfg.input_cycles;
  p.n_points = cfg.n_points;
  p.smooth_window = cfg.smooth_window;
  p.bo_budget = cfg.bo_budget;
  p.folds = cfg.folds;
  p.anchor_mode = cfg.anchor_mode;
  p.train = cfg.train;
  p.train.seed = cfg.seed;
  p.seed = cfg.seed;
  return p;
}

Fleet load_fleet(const RunConfig& cfg) {
  if (cfg.data_source == "csv") {
    if (cfg.data_dir.empty()) throw Error("data source 'csv' needs data.dir (or --data)");
    return load_dataset(cfg.data_dir);
  }
  if (cfg.data_source == "synth") {
    if (!cfg.data_dir.empty() && fs::exists(fs::path(cfg.data_dir) / "capacity.csv")) {
      return load_dataset(cfg.data_dir);
    }
    return synth_fleet(cfg.synth, cfg.seed);
  }
  throw Error("unknown data source '" + cfg.data_source + "'");
}

void write_text(const fs::path& path, const std::string& body) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << body;
}

// levels and bookkeeping the predict command needs alongside the weights
void write_model_meta(const fs::path& path, const KnotSpec& spec, const RunConfig& cfg) {
  nlohmann::json j;
  j["knot_levels"] = std::vector<double>(spec.soh_levels.data(),
                                         spec.soh_levels.data() + spec.soh_levels.size());
  j["eol_level"] = spec.eol_level;
  j["top_level"] = spec.top_level;
  j["anchor_mode"] = cfg.anchor_mode;
  j["smooth_window"] = cfg.smooth_window;
  write_text(path, j.dump(2) + "\n");
}

KnotSpec read_model_meta(const fs::path& path, std::string* anchor_mode, int* smooth_window) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open model metadata " + path.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  const auto levels = j.at("knot_levels").get<std::vector<double>>();
  if (anchor_mode) *anchor_mode = j.value("anchor_mode", std::string("measured"));
  if (smooth_window) *smooth_window = j.value("smooth_window", 5);
  return make_knot_spec(
      Eigen::Map<const Vec>(levels.data(), static_cast<Eigen::Index>(levels.size())),
      j.value("eol_level", 80.0), j.value("top_level", 98.0));
}

int report_failures(const EvalReport& report, const fs::path& out_dir) {
  if (report.failed_cells == 0) return 0;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& cell : report.cells) {
    if (cell.failed) manifest.push_back({{"cell_id", cell.cell_id}, {"error", cell.error}});
  }
  write_text(out_dir / "failures.json", manifest.dump(2) + "\n");
  std::cerr << report.failed_cells << " cell(s) failed; see "
            << (out_dir / "failures.json").string() << "\n";
  return 3;
}

int cmd_synth(const RunConfig& cfg) {
  const Fleet fleet = synth_fleet(cfg.synth, cfg.seed);
  const std::string dir = cfg.data_dir.empty() ? cfg.out : cfg.data_dir;
  save_dataset(fleet, dir);
  std::cout << "wrote " << fleet.size() << " cells to " << dir << "\n";
  return 0;
}

int cmd_optimize_knots(const RunConfig& cfg) {
  const Fleet fleet = load_fleet(cfg);
  const PipelineConfig pipe = pipeline_of(cfg);
  const FoldPlan plan = stratified_folds(fleet, cfg.folds, cfg.seed);

  nlohmann::json out;
  out["k"] = cfg.knots;
  out["budget"] = cfg.bo_budget;
  nlohmann::json folds = nlohmann::json::array();
  for (int fold = 0; fold < cfg.folds; ++fold) {
    std::vector<CellSeries> train_series, test_series;
    for (const std::size_t idx : plan.train_indices(fold)) {
      train_series.push_back(fleet[idx].series);
    }
    for (const std::size_t idx : plan.test_indices(fold)) {
      test_series.push_back(fleet[idx].series);
    }
    BoConfig bo;
    bo.knots = cfg.knots;
    bo.eol_level = cfg.eol_level;
    bo.top_level = cfg.top_level;
    bo.budget = cfg.bo_budget;
    bo.smooth_window = cfg.smooth_window;
    bo.seed = cfg.seed + 1000 * static_cast<std::uint64_t>(fold);
    const BoResult result = optimize_knots(train_series, bo);

    nlohmann::json history = nlohmann::json::array();
    for (const auto& [levels, value] : result.history) {
      history.push_back(
          {{"levels", std::vector<double>(levels.data(), levels.data() + levels.size())},
           {"objective", value}});
    }
    folds.push_back(
        {{"fold", fold},
         {"levels", std::vector<double>(result.best_levels.soh_levels.data(),
                                        result.best_levels.soh_levels.data() +
                                            result.best_levels.soh_levels.size())},
         {"objective_train", result.best_objective},
         {"objective_test",
          test_series.empty() ? 0.0
                              : objective(result.best_levels, test_series, cfg.smooth_window)},
         {"history", history}});
    (void)pipe;
  }
  out["folds"] = folds;
  write_text(fs::path(cfg.out) / "knots.json", out.dump(2) + "\n");
  std::cout << "wrote " << (fs::path(cfg.out) / "knots.json").string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  const Fleet fleet = load_fleet(cfg);
  const PipelineConfig pipe = pipeline_of(cfg);

  KnotSpec spec;
  if (cfg.knot_mode == "optimized") {
    std::vector<CellSeries> series;
    series.reserve(fleet.size());
    for (const auto& cell : fleet) series.push_back(cell.series);
    BoConfig bo;
    bo.knots = cfg.knots;
    bo.eol_level = cfg.eol_level;
    bo.top_level = cfg.top_level;
    bo.budget = cfg.bo_budget;
    bo.smooth_window = cfg.smooth_window;
    bo.seed = cfg.seed;
    spec = optimize_knots(series, bo).best_levels;
  } else {
    spec = uniform_levels(cfg.knots, cfg.eol_level, cfg.top_level);
  }

  std::vector<std::size_t> all(fleet.size());
  for (std::size_t k = 0; k < fleet.size(); ++k) all[k] = k;
  const TrainedPredictor predictor = fit_pipeline(fleet, all, spec, pipe, cfg.seed);

  fs::create_directories(cfg.out);
  save_model(predictor.net, (fs::path(cfg.out) / "model.kcm").string());
  write_model_meta(fs::path(cfg.out) / "model_meta.json", spec, cfg);

  std::ostringstream log;
  log << "epoch,train_loss,val_loss\n";
  char line[96];
  for (const auto& entry : predictor.training.log) {
    std::snprintf(line, sizeof(line), "%d,%.8g,%.8g\n", entry.epoch, entry.train_loss,
                  entry.val_loss);
    log << line;
  }
  write_text(fs::path(cfg.out) / "train_log.csv", log.str());
  std::cout << "wrote model.kcm, model_meta.json, train_log.csv to " << cfg.out << " ("
            << predictor.training.log.size() << " epochs)\n";
  return 0;
}

int cmd_predict(const RunConfig& cfg, const std::string& model_dir,
                const std::vector<std::string>& only_cells) {
  const Fleet fleet = load_fleet(cfg);
  const fs::path model_base = model_dir.empty() ? fs::path(cfg.out) : fs::path(model_dir);
  const ConvNet net = load_model((model_base / "model.kcm").string());
  RunConfig effective = cfg;
  const KnotSpec spec = read_model_meta(model_base / "model_meta.json",
                                        &effective.anchor_mode, &effective.smooth_window);
  const PipelineConfig pipe = pipeline_of(effective);

  std::ostringstream knots_csv, traj_csv;
  knots_csv << "cell_id,soh_level_pct,cycle_mean,cycle_sd,cycle_lo95,cycle_hi95\n";
  traj_csv << "cell_id,cycle,soh_pred_pct,soh_lo95_pct,soh_hi95_pct\n";
  nlohmann::json failures = nlohmann::json::array();
  char line[192];

  for (const auto& cell : fleet) {
    if (!only_cells.empty() &&
        std::find(only_cells.begin(), only_cells.end(), cell.series.cell_id) ==
            only_cells.end()) {
      continue;
    }
    try {
      const InputMatrix input = cell_input(cell, net.input_cycles, net.n_points);
      const McPrediction mc = predict_mc(net, input, cfg.train.mc_samples, cfg.seed);
      const Anchor anchor = cell_anchor(cell, pipe);

      for (Eigen::Index k = 0; k < spec.count(); ++k) {
        std::snprintf(line, sizeof(line), "%s,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      cell.series.cell_id.c_str(), spec.soh_levels(k), mc.mean_cycles(k),
                      mc.sd_cycles(k), mc.lo95(k), mc.hi95(k));
        knots_csv << line;
      }

      // per-pass reconstructions give the trajectory band
      const Trajectory mean_traj = reconstruct(points_from_cycles(spec, mc.mean_cycles), anchor);
      std::vector<Trajectory> sampled;
      sampled.reserve(static_cast<std::size_t>(mc.samples.rows()));
      for (Eigen::Index pass = 0; pass < mc.samples.rows(); ++pass) {
        Vec cycles = mc.samples.row(pass).transpose();
        bool ordered = cycles(0) > anchor.cycle;
        for (Eigen::Index k = 0; k + 1 < cycles.size() && ordered; ++k) {
          ordered = cycles(k + 1) > cycles(k);
        }
        if (!ordered) continue;  // skip malformed pass rather than fail the cell
        sampled.push_back(reconstruct(points_from_cycles(spec, cycles), anchor));
      }
      const long last_cycle = static_cast<long>(std::ceil(mc.hi95(spec.count() - 1)));
      std::vector<double> values;
      for (long c = static_cast<long>(std::ceil(anchor.cycle)); c <= last_cycle; ++c) {
        const auto cycle = static_cast<double>(c);
        values.clear();
        for (const auto& traj : sampled) values.push_back(traj(cycle));
        std::sort(values.begin(), values.end());
        const auto n = values.size();
        const double lo = n ? values[static_cast<std::size_t>(0.025 * (n - 1))] : 0.0;
        const double hi = n ? values[static_cast<std::size_t>(std::ceil(0.975 * (n - 1)))] : 0.0;
        std::snprintf(line, sizeof(line), "%s,%ld,%.8g,%.8g,%.8g\n",
                      cell.series.cell_id.c_str(), c, mean_traj(cycle), lo, hi);
        traj_csv << line;
      }
    } catch (const Error& e) {
      failures.push_back({{"cell_id", cell.series.cell_id}, {"error", e.what()}});
    }
  }

  write_text(fs::path(cfg.out) / "knots.csv", knots_csv.str());
  write_text(fs::path(cfg.out) / "trajectories.csv", traj_csv.str());
  if (!failures.empty()) {
    write_text(fs::path(cfg.out) / "failures.json", failures.dump(2) + "\n");
    std::cerr << failures.size() << " cell(s) failed; see "
              << (fs::path(cfg.out) / "failures.json").string() << "\n";
    return 3;
  }
  std::cout << "wrote knots.csv and trajectories.csv to " << cfg.out << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
  const Fleet fleet = load_fleet(cfg);
  const EvalReport report = run_cv(fleet, pipeline_of(cfg));
  write_text(fs::path(cfg.out) / "report.json", report_to_json(report) + "\n");
  write_text(fs::path(cfg.out) / "report.txt", report_to_text(report));
  std::cout << report_to_text(report);
  return report_failures(report, cfg.out);
}

int cmd_robustness(const RunConfig& cfg) {
  const Fleet fleet = load_fleet(cfg);
  const PipelineConfig pipe = pipeline_of(cfg);
  const FoldPlan plan = stratified_folds(fleet, cfg.folds, cfg.seed);
  const KnotSpec spec = uniform_levels(cfg.knots, cfg.eol_level, cfg.top_level);
  const TrainedPredictor predictor =
      fit_pipeline(fleet, plan.train_indices(0), spec, pipe, cfg.seed);
  const auto rows = robustness_study(fleet, plan.test_indices(0), predictor, cfg.sigmas,
                                     cfg.robustness_draws, cfg.seed, pipe);
  write_text(fs::path(cfg.out) / "robustness.csv", robustness_to_csv(rows));
  std::cout << "wrote robustness.csv to " << cfg.out << "\n";
  return 0;
}

int cmd_cycle_study(const RunConfig& cfg) {
  const Fleet fleet = load_fleet(cfg);
  const auto rows = input_cycle_study(fleet, cfg.cycle_counts, pipeline_of(cfg));
  write_text(fs::path(cfg.out) / "cycle_study.csv", cycle_study_to_csv(rows));
  std::cout << cycle_study_to_csv(rows);
  return 0;
}

int cmd_knee(const RunConfig& cfg) {
  const Fleet fleet = load_fleet(cfg);
  std::vector<KneeCsvRow> rows(fleet.size());
  parallel_for(fleet.size(), [&](std::size_t k) {
    const CellSeries& series = fleet[k].series;
    Vec x(series.size()), y(series.size());
    for (Eigen::Index j = 0; j < series.size(); ++j) {
      x(j) = series.cycles[static_cast<std::size_t>(j)];
      y(j) = series.soh(j);
    }
    rows[k].cell_id = series.cell_id;
    rows[k].fit = fit_bacon_watts(x, y);
  });
  fs::create_directories(cfg.out);
  write_knee_csv(rows, (fs::path(cfg.out) / "knees.csv").string());
  std::cout << "wrote knees.csv to " << cfg.out << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"knot-based battery capacity trajectory prediction"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string config_path, model_dir;
  std::vector<std::string> only_cells;

  // global options, applied after the config file so flags win
  std::optional<std::uint64_t> seed_flag;
  std::optional<int> knots_flag, cycles_flag, folds_flag, cells_flag, kept_flag, epochs_flag;
  std::optional<std::string> out_flag, mode_flag, data_flag;
  std::optional<std::vector<double>> sigma_flag;

  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed_flag, "random seed");
  app.add_option("--out", out_flag, "output directory");
  app.add_option("--knots", knots_flag, "number of knots K");
  app.add_option("--knot-mode", mode_flag, "uniform or optimized");
  app.add_option("--input-cycles", cycles_flag, "early cycles fed to the model");
  app.add_option("--folds", folds_flag, "cross-validation folds");
  app.add_option("--data", data_flag, "dataset directory");
  app.add_option("--sigma", sigma_flag, "perturbation levels")->delimiter(',');
  app.add_option("--cells", cells_flag, "synthetic fleet size");
  app.add_option("--kept-cycles", kept_flag, "raw cycles retained per synthetic cell");
  app.add_option("--epochs", epochs_flag, "training epochs");

  auto* synth = app.add_subcommand("synth", "generate a synthetic fleet dataset");
  auto* optimize = app.add_subcommand("optimize-knots", "per-fold knot level optimization");
  auto* train = app.add_subcommand("train", "train the interval model on a dataset");
  auto* predict = app.add_subcommand("predict", "predict knots and trajectories");
  predict->add_option("--model", model_dir, "directory holding model.kcm + model_meta.json");
  predict->add_option("--cell", only_cells, "restrict prediction to these cell ids");
  auto* evaluate = app.add_subcommand("evaluate", "cross-validated pipeline evaluation");
  auto* robustness = app.add_subcommand("robustness", "input perturbation study");
  auto* cycle_study = app.add_subcommand("cycle-study", "input cycle count study");
  auto* knee = app.add_subcommand("knee", "change-point fits for every cell");
  for (auto* sub : {synth, optimize, train, predict, evaluate, robustness, cycle_study, knee}) {
    sub->fallthrough();  // global flags may follow the subcommand name
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (!config_path.empty()) load_config_file(cfg, config_path);
    if (seed_flag) cfg.seed = *seed_flag;
    if (out_flag) cfg.out = *out_flag;
    if (knots_flag) cfg.knots = *knots_flag;
    if (mode_flag) cfg.knot_mode = *mode_flag;
    if (cycles_flag) cfg.input_cycles = *cycles_flag;
    if (folds_flag) cfg.folds = *folds_flag;
    if (data_flag) cfg.data_dir = *data_flag;
    if (sigma_flag) cfg.sigmas = *sigma_flag;
    if (cells_flag) cfg.synth.cells = *cells_flag;
    if (kept_flag) cfg.synth.kept_cycles = *kept_flag;
    if (epochs_flag) cfg.train.epochs = *epochs_flag;

    if (synth->parsed()) return cmd_synth(cfg);
    if (optimize->parsed()) return cmd_optimize_knots(cfg);
    if (train->parsed()) return cmd_train(cfg);
    if (predict->parsed()) return cmd_predict(cfg, model_dir, only_cells);
    if (evaluate->parsed()) return cmd_evaluate(cfg);
    if (robustness->parsed()) return cmd_robustness(cfg);
    if (cycle_study->parsed()) return cmd_cycle_study(cfg);
    if (knee->parsed()) return cmd_knee(cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace knotcast::cli
