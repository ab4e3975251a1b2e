// End-to-end acceptance suite. Each numbered criterion prints one PASS/FAIL
// line with the observed values; the exit code is the number of failures.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "knotcast/cli.hpp"
#include "knotcast/eval.hpp"
#include "knotcast/knee.hpp"
#include "reference_pchip.hpp"

using namespace knotcast;
namespace fs = std::filesystem;

namespace {

// training schedule used by the learning-based criteria
constexpr int kEpochs = 4000;
constexpr double kLearningRate = 0.002;

int g_failures = 0;

void criterion(int id, const std::string& name, double budget_seconds,
               const std::function<bool(std::string&)>& body) {
  const auto start = std::chrono::steady_clock::now();
  std::string detail;
  bool ok = false;
  try {
    ok = body(detail);
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (budget_seconds > 0.0 && elapsed > budget_seconds) {
    ok = false;
    detail += " [over the " + std::to_string(budget_seconds) + "s budget]";
  }
  std::printf("[%s] %2d. %s (%.1fs)%s%s\n", ok ? "PASS" : "FAIL", id, name.c_str(), elapsed,
              detail.empty() ? "" : " -- ", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

void skip(int id, const std::string& name, const std::string& why) {
  std::printf("[SKIP] %2d. %s -- %s\n", id, name.c_str(), why.c_str());
  std::fflush(stdout);
}

PipelineConfig learning_config() {
  PipelineConfig cfg;
  cfg.knots = 3;
  cfg.input_cycles = 1;
  cfg.seed = 17;
  cfg.train.epochs = kEpochs;
  cfg.train.patience = kEpochs;
  cfg.train.learning_rate = kLearningRate;
  cfg.train.val_fraction = 0.0;
  cfg.train.mc_samples = 100;
  return cfg;
}

Fleet make_fleet() {
  SynthConfig synth;  // 169 cells by default
  synth.kept_cycles = 3;
  return synth_fleet(synth, 17);
}

std::vector<CellSeries> series_of(const Fleet& fleet, const std::vector<std::size_t>& idx) {
  std::vector<CellSeries> out;
  out.reserve(idx.size());
  for (const std::size_t k : idx) out.push_back(fleet[k].series);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool dirs_equal(const fs::path& a, const fs::path& b, std::string& detail) {
  std::vector<fs::path> names;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (entry.is_regular_file()) names.push_back(fs::relative(entry.path(), a));
  }
  std::sort(names.begin(), names.end());
  for (const auto& name : names) {
    if (!fs::exists(b / name)) {
      detail += " missing " + name.string() + ";";
      return false;
    }
    if (slurp(a / name) != slurp(b / name)) {
      detail += " differs: " + name.string() + ";";
      return false;
    }
  }
  return !names.empty();
}

}  // namespace

int main() {
  std::printf("acceptance suite\n");
  const Fleet fleet = make_fleet();
  const FoldPlan plan = stratified_folds(fleet, 5, 17);
  EvalReport k3_report;  // shared between the learning and CI criteria

  criterion(1, "monotone interpolation matches the reference oracle", 5.0, [&](std::string& d) {
    Rng rng(20240811);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const int n = static_cast<int>(rng.uniform_int(5, 40));
      const double direction = trial % 2 == 0 ? 1.0 : -1.0;
      std::vector<double> xs(n), ys(n);
      xs[0] = rng.uniform(-5.0, 5.0);
      ys[0] = rng.uniform(-2.0, 2.0);
      for (int i = 1; i < n; ++i) {
        xs[i] = xs[i - 1] + rng.uniform(0.05, 3.0);
        ys[i] = ys[i - 1] + direction * rng.uniform(0.001, 1.5);
      }
      const auto spline =
          fit_pchip(Eigen::Map<const Vec>(xs.data(), n), Eigen::Map<const Vec>(ys.data(), n));
      double prev = spline(xs.front());
      for (int i = 0; i < 10000; ++i) {
        const double q = xs.front() + (xs.back() - xs.front()) * i / 9999.0;
        const double v = spline(q);
        worst = std::max(worst, std::abs(v - refspline::eval(xs, ys, q)));
        if (i > 0 && direction * (v - prev) < -1e-12) {
          d = "monotonicity violated";
          return false;
        }
        prev = v;
      }
    }
    std::ostringstream msg;
    msg << "max |impl - oracle| = " << worst;
    d = msg.str();
    return worst < 1e-9;
  });

  criterion(2, "uniform knot levels match the reference tables exactly", 5.0,
            [&](std::string& d) {
              const auto k2 = uniform_levels(2, 80.0, 98.0);
              const auto k3 = uniform_levels(3, 80.0, 98.0);
              const auto k4 = uniform_levels(4, 80.0, 98.0);
              const bool ok = k2.soh_levels(0) == 89.0 && k2.soh_levels(1) == 80.0 &&
                              k3.soh_levels(0) == 92.0 && k3.soh_levels(1) == 86.0 &&
                              k3.soh_levels(2) == 80.0 && k4.soh_levels(0) == 93.5 &&
                              k4.soh_levels(1) == 89.0 && k4.soh_levels(2) == 84.5 &&
                              k4.soh_levels(3) == 80.0;
              d = "levels {89,80} {92,86,80} {93.5,89,84.5,80}";
              return ok;
            });

  criterion(3, "interpolation error decreases in the knot count", 30.0, [&](std::string& d) {
    double mean_d[3] = {0.0, 0.0, 0.0};
    for (const auto& cell : fleet) {
      const auto truth = Trajectory::from_series(cell.series);
      const Anchor anchor{1.0, 100.0 * cell.series.soh(0)};
      for (int k = 2; k <= 4; ++k) {
        mean_d[k - 2] += interp_error(truth, extract_knots(cell.series, uniform_levels(k)),
                                      anchor) /
                         static_cast<double>(fleet.size());
      }
    }
    std::ostringstream msg;
    msg << "mean d(p): K=2 " << mean_d[0] << ", K=3 " << mean_d[1] << ", K=4 " << mean_d[2];
    d = msg.str();
    return mean_d[0] > mean_d[1] && mean_d[1] > mean_d[2] && mean_d[2] > 1e-4 &&
           mean_d[2] < 2e-2;
  });

  criterion(4, "knot optimization agrees with exhaustive search", 300.0, [&](std::string& d) {
    const auto train0 = series_of(fleet, plan.train_indices(0));

    BoConfig bo2;
    bo2.knots = 2;
    bo2.budget = 60;
    bo2.seed = 17;
    const BoResult bo = optimize_knots(train0, bo2);
    double grid_best = 1e18, grid_arg = 0.0;
    for (double level = 81.0; level <= 97.0 + 1e-9; level += 0.1) {
      Vec v(1);
      v << level;
      const double value = objective(spec_from_free_levels(v, bo2), train0);
      if (value < grid_best) {
        grid_best = value;
        grid_arg = level;
      }
    }
    const double gap = std::abs(bo.best_levels.soh_levels(0) - grid_arg);

    int optimized_wins = 0;
    for (int fold = 0; fold < 5; ++fold) {
      const auto train = series_of(fleet, plan.train_indices(fold));
      const auto test = series_of(fleet, plan.test_indices(fold));
      BoConfig bo3;
      bo3.knots = 3;
      bo3.budget = 60;
      bo3.seed = 17 + 1000 * static_cast<std::uint64_t>(fold);
      const BoResult result = optimize_knots(train, bo3);
      if (objective(result.best_levels, test) <= objective(uniform_levels(3), test)) {
        ++optimized_wins;
      }
    }
    std::ostringstream msg;
    msg << "K=2 grid gap " << gap << " SOH-pct (grid " << grid_arg << ", bo "
        << bo.best_levels.soh_levels(0) << "); optimized<=uniform on " << optimized_wins
        << "/5 held-out folds";
    d = msg.str();
    return gap <= 1.0 && optimized_wins >= 4;
  });

  criterion(5, "expected improvement matches its Monte-Carlo value", 60.0, [&](std::string& d) {
    Rng rng(99);
    double worst_rel = 0.0;
    int checked = 0;
    while (checked < 20) {
      const int m = static_cast<int>(rng.uniform_int(4, 12));
      Mat x(m, 2);
      Vec y(m);
      for (int k = 0; k < m; ++k) {
        x(k, 0) = rng.uniform(81.0, 97.0);
        x(k, 1) = rng.uniform(81.0, 97.0);
        y(k) = rng.uniform(0.002, 0.02);
      }
      const auto gp = GpSurrogate::fit(x, y, 31 + checked);
      Vec q(2);
      q << rng.uniform(82.0, 96.0), rng.uniform(82.0, 96.0);
      const auto post = gp.predict(q);
      const double analytic = expected_improvement(gp, q);
      if (post.sd == 0.0) {
        if (analytic != 0.0) {
          d = "EI != 0 at zero posterior sd";
          return false;
        }
        continue;  // the zero branch is exercised below
      }
      // deep-tail states are unverifiable at 1e6 samples: the estimator's own
      // relative error would dominate the 1% tolerance
      if (analytic < 0.05 * post.sd) continue;
      Rng mc(1234 + checked);
      double acc = 0.0;
      const int draws = 1000000;
      for (int k = 0; k < draws; ++k) {
        acc += std::max(gp.best_observed() - mc.normal(post.mean, post.sd), 0.0);
      }
      worst_rel = std::max(worst_rel, std::abs(acc / draws - analytic) / analytic);
      ++checked;
    }

    // the piecewise zero branch, probed at a sampled point
    Mat x(3, 1);
    Vec y(3);
    x << 85.0, 90.0, 95.0;
    y << 0.01, 0.02, 0.015;
    const auto gp = GpSurrogate::fit(x, y, 7);
    Vec at(1);
    at << 90.0;
    const bool zero_ok = gp.predict(at).sd == 0.0 && expected_improvement(gp, at) == 0.0;

    std::ostringstream msg;
    msg << "max relative gap " << worst_rel << " over 20 states; zero-sd EI "
        << (zero_ok ? "0" : "nonzero");
    d = msg.str();
    return worst_rel < 0.01 && zero_ok;
  });

  criterion(6, "network shapes and gradients check out", 120.0, [&](std::string& d) {
    const ConvNet shape_probe(128, 3, HeadType::kIntervals, 0.2, 1);
    const auto shapes = shape_probe.block_shapes();
    const bool shapes_ok = shapes.size() == 4 && shapes[0] == std::pair<int, int>{4, 64} &&
                           shapes[1] == std::pair<int, int>{8, 32} &&
                           shapes[2] == std::pair<int, int>{16, 16} &&
                           shapes[3] == std::pair<int, int>{32, 8} &&
                           shape_probe.flatten_size() == 256;

    // full finite-difference check on a reduced net
    const int batch = 3, columns = 16;
    Rng rng(1234);
    Mat x(3, batch * columns);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = rng.normal(0.0, 1.0);
    }
    ConvNet net(columns, 2, HeadType::kIntervals, 0.0, 42);
    Mat labels(2, batch);
    labels << 230, 180, 310, 420, 385, 540;

    ForwardCache cache;
    const Mat out = net.forward(x, batch, RunMode::kTrain, nullptr, &cache);
    Mat dlogits;
    interval_mae_loss(out, labels, &dlogits);
    net.zero_grads();
    net.backward(cache, dlogits);

    const double eps = 1e-4;
    double worst = 0.0;
    for (auto& p : net.params()) {
      for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
        for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
          const double saved = p.value(r, c);
          p.value(r, c) = saved + eps;
          const Mat up = net.forward(x, batch, RunMode::kTrain, nullptr);
          const double lu = interval_mae_loss(up, labels, nullptr);
          p.value(r, c) = saved - eps;
          const Mat down = net.forward(x, batch, RunMode::kTrain, nullptr);
          const double ld = interval_mae_loss(down, labels, nullptr);
          p.value(r, c) = saved;
          const double fd = (lu - ld) / (2.0 * eps);
          worst = std::max(worst, std::abs(fd - p.grad(r, c)) /
                                      std::max({std::abs(fd), std::abs(p.grad(r, c)), 1e-4}));
        }
      }
    }
    std::ostringstream msg;
    msg << "shape chain " << (shapes_ok ? "ok" : "wrong") << "; max gradient error " << worst;
    d = msg.str();
    return shapes_ok && worst < 1e-3;
  });

  criterion(7, "the pipeline learns the fleet end to end", 1800.0, [&](std::string& d) {
    k3_report = run_cv(fleet, learning_config());
    std::ostringstream msg;
    msg << "trajectory MAPE " << k3_report.trajectory_aggregate.mape << "% (< 3), knot MAPE "
        << k3_report.knot_aggregate.mape << "% (< 15), " << k3_report.failed_cells
        << " failed cells";
    d = msg.str();
    return k3_report.trajectory_aggregate.mape < 3.0 && k3_report.knot_aggregate.mape < 15.0 &&
           k3_report.failed_cells == 0;
  });

  criterion(8, "dropout-based confidence intervals behave", 1800.0, [&](std::string& d) {
    // zero dropout collapses the interval
    ConvNet point_net(128, 3, HeadType::kIntervals, 0.0, 5);
    InputMatrix probe = cell_input(fleet[0], 1, 128);
    const auto mc = predict_mc(point_net, probe, 50, 3);
    const bool zero_width = (mc.hi95 - mc.lo95).cwiseAbs().maxCoeff() == 0.0;

    const double coverage = k3_report.ci_coverage;

    PipelineConfig cfg = learning_config();
    cfg.knots = 2;
    const double width2 = run_cv(fleet, cfg).mean_ci_width_eol;
    const double width3 = k3_report.mean_ci_width_eol;
    cfg.knots = 4;
    const double width4 = run_cv(fleet, cfg).mean_ci_width_eol;
    const int wins = (width3 >= width2) + (width4 >= width3) + (width4 >= width2);

    std::ostringstream msg;
    msg << "zero-dropout width " << (zero_width ? "0" : ">0") << "; coverage " << coverage
        << " (>= 0.80); EOL CI widths " << width2 << " / " << width3 << " / " << width4 << " ("
        << wins << "/3 non-decreasing)";
    d = msg.str();
    return zero_width && coverage >= 0.80 && wins >= 2;
  });

  criterion(9, "perturbation robustness trends hold", 600.0, [&](std::string& d) {
    PipelineConfig cfg = learning_config();
    const auto spec = uniform_levels(3);
    const auto train_idx = plan.train_indices(0);
    const auto test_idx = plan.test_indices(0);

    const TrainedPredictor one = fit_pipeline(fleet, train_idx, spec, cfg, 17);
    const auto rows_one =
        robustness_study(fleet, test_idx, one, {0.0, 0.001, 0.003, 0.01}, 100, 23, cfg);

    PipelineConfig cfg3 = cfg;
    cfg3.input_cycles = 3;
    const TrainedPredictor three = fit_pipeline(fleet, train_idx, spec, cfg3, 17);
    const auto rows_three =
        robustness_study(fleet, test_idx, three, {0.01}, 100, 23, cfg3);

    bool zero_ok = true;
    for (const double dev : rows_one[0].deviations) zero_ok = zero_ok && dev == 0.0;
    const bool monotone = rows_one[1].median <= rows_one[2].median + 1e-12 &&
                          rows_one[2].median <= rows_one[3].median + 1e-12;
    const bool stacked_helps = rows_three[0].median <= rows_one[3].median;

    std::ostringstream msg;
    msg << "sigma=0 exact " << (zero_ok ? "yes" : "no") << "; medians "
        << rows_one[1].median << " / " << rows_one[2].median << " / " << rows_one[3].median
        << (monotone ? " (non-decreasing)" : " (NOT monotone)") << "; 3-cycle median at 0.01 "
        << rows_three[0].median << (stacked_helps ? " <= " : " > ") << rows_one[3].median;
    d = msg.str();
    return zero_ok && monotone && stacked_helps;
  });

  criterion(10, "change-point fits recover the knee", 60.0, [&](std::string& d) {
    int hits = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Vec x(200), y(200);
      Rng rng(400 + seed);
      for (int k = 0; k < 200; ++k) {
        x(k) = 1.0 + 999.0 * k / 199.0;
        y(k) = bacon_watts_value(1.0, -1e-4, -4e-4, 500.0, 40.0, x(k)) +
               rng.normal(0.0, 1e-3);
      }
      const auto fit = fit_bacon_watts(x, y);
      if (fit.converged && std::abs(fit.knee_cycle - 500.0) <= 10.0) ++hits;
    }

    const bool bins_ok = knee_class(499.9) == KneeClass::kC1 &&
                         knee_class(500.0) == KneeClass::kC2 &&
                         knee_class(1100.0) == KneeClass::kC3;

    Rng rng(7);
    double worst_jac = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const double a0 = rng.uniform(0.5, 1.5);
      const double a1 = rng.uniform(-3e-4, -1e-5);
      const double a2 = rng.uniform(-1e-3, -1e-4);
      const double x1 = rng.uniform(200.0, 800.0);
      const double gamma = rng.uniform(10.0, 120.0);
      const double x = x1 + rng.uniform(-3.0, 3.0) * gamma;
      const Vec jac = bacon_watts_jacobian(a0, a1, a2, x1, gamma, x);
      double theta[5] = {a0, a1, a2, x1, gamma};
      for (int p = 0; p < 5; ++p) {
        const double step = 1e-5 * std::max(std::abs(theta[p]), 1e-2);
        double hi[5], lo[5];
        for (int q = 0; q < 5; ++q) hi[q] = lo[q] = theta[q];
        hi[p] += step;
        lo[p] -= step;
        const double fd = (bacon_watts_value(hi[0], hi[1], hi[2], hi[3], hi[4], x) -
                           bacon_watts_value(lo[0], lo[1], lo[2], lo[3], lo[4], x)) /
                          (2.0 * step);
        if (std::abs(fd) < 1e-7 && std::abs(jac(p)) < 1e-7) continue;
        worst_jac = std::max(worst_jac,
                             std::abs(fd - jac(p)) / std::max(std::abs(fd), std::abs(jac(p))));
      }
    }

    std::ostringstream msg;
    msg << hits << "/50 seeds within 10 cycles (need 45); bins "
        << (bins_ok ? "exact" : "wrong") << "; max jacobian error " << worst_jac;
    d = msg.str();
    return hits >= 45 && bins_ok && worst_jac < 1e-6;
  });

  criterion(11, "every command is byte-deterministic per seed", 600.0, [&](std::string& d) {
    const fs::path base = fs::temp_directory_path() / "knotcast_acceptance_cli";
    fs::remove_all(base);
    fs::create_directories(base);
    const fs::path config_path = base / "config.json";
    {
      std::ofstream cfg(config_path);
      cfg << R"({
  "seed": 21,
  "data": {"cells": 10, "kept_cycles": 3, "eol_min": 350, "eol_max": 800},
  "knots": {"k": 3, "bo_budget": 12},
  "folds": 2,
  "train": {"epochs": 6, "batch_size": 8, "mc_samples": 12},
  "robustness": {"sigmas": [0.001], "draws": 5},
  "cycle_counts": [1, 2]
})";
    }
    auto run_pair = [&](const std::string& tag,
                        const std::function<int(const std::string&)>& invoke,
                        std::string& detail) {
      const std::string a = (base / (tag + "_a")).string();
      const std::string b = (base / (tag + "_b")).string();
      if (invoke(a) != 0 || invoke(b) != 0) {
        detail += tag + " exited nonzero;";
        return false;
      }
      if (!dirs_equal(a, b, detail)) {
        detail += " (" + tag + ")";
        return false;
      }
      return true;
    };

    const std::string cfg_s = config_path.string();
    const std::string ds = (base / "ds").string();
    bool ok = run_pair(
        "synth",
        [&](const std::string& out) {
          return cli::run({"synth", "--config", cfg_s, "--out", out});
        },
        d);
    if (cli::run({"synth", "--config", cfg_s, "--out", ds}) != 0) {
      d += " dataset synth failed;";
      return false;
    }
    const std::string model = (base / "model").string();
    ok = ok && run_pair(
                   "train",
                   [&](const std::string& out) {
                     return cli::run({"train", "--config", cfg_s, "--data", ds, "--out", out});
                   },
                   d);
    if (cli::run({"train", "--config", cfg_s, "--data", ds, "--out", model}) != 0) {
      d += " model train failed;";
      return false;
    }
    ok = ok && run_pair(
                   "predict",
                   [&](const std::string& out) {
                     return cli::run({"predict", "--config", cfg_s, "--data", ds, "--model",
                                      model, "--out", out});
                   },
                   d);
    ok = ok && run_pair(
                   "optimize-knots",
                   [&](const std::string& out) {
                     return cli::run(
                         {"optimize-knots", "--config", cfg_s, "--data", ds, "--out", out});
                   },
                   d);
    ok = ok && run_pair(
                   "evaluate",
                   [&](const std::string& out) {
                     return cli::run({"evaluate", "--config", cfg_s, "--data", ds, "--out", out});
                   },
                   d);
    ok = ok && run_pair(
                   "robustness",
                   [&](const std::string& out) {
                     return cli::run(
                         {"robustness", "--config", cfg_s, "--data", ds, "--out", out});
                   },
                   d);
    ok = ok && run_pair(
                   "cycle-study",
                   [&](const std::string& out) {
                     return cli::run(
                         {"cycle-study", "--config", cfg_s, "--data", ds, "--out", out});
                   },
                   d);
    ok = ok && run_pair(
                   "knee",
                   [&](const std::string& out) {
                     return cli::run({"knee", "--config", cfg_s, "--data", ds, "--out", out});
                   },
                   d);
    if (ok) d = "8 commands, byte-identical reruns";
    fs::remove_all(base);
    return ok;
  });

  const char* real_data = std::getenv("KNOTCAST_REAL_DATA");
  if (real_data == nullptr) {
    skip(12, "real-dataset reproduction (optional stretch)",
         "set KNOTCAST_REAL_DATA to a directory with cycles.csv/capacity.csv to enable");
  } else {
    criterion(12, "real-dataset reproduction (optional stretch)", 0.0, [&](std::string& d) {
      const Fleet real = load_dataset(real_data);
      PipelineConfig cfg = learning_config();
      const EvalReport report = run_cv(real, cfg);
      std::ostringstream msg;
      msg << "trajectory MAPE " << report.trajectory_aggregate.mape << "% (<= 2.5)";
      d = msg.str();
      return report.trajectory_aggregate.mape <= 2.5;
    });
  }

  std::printf("%d criterion failure(s)\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
