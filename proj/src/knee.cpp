#include "knotcast/knee.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace knotcast {

double bacon_watts_value(double a0, double a1, double a2, double x1, double gamma, double x) {
  const double u = x - x1;
  return a0 + a1 * u + a2 * u * std::tanh(u / gamma);
}

Vec bacon_watts_jacobian(double a0, double a1, double a2, double x1, double gamma, double x) {
  (void)a0;
  const double u = x - x1;
  const double t = std::tanh(u / gamma);
  const double s = 1.0 - t * t;  // sech^2
  Vec j(5);
  j(0) = 1.0;
  j(1) = u;
  j(2) = u * t;
  j(3) = -a1 - a2 * (t + u * s / gamma);
  j(4) = -a2 * u * u * s / (gamma * gamma);
  return j;
}

namespace {

// theta = (a0, a1, a2, x1, log gamma)
Vec residuals(const Vec& x, const Vec& y, const Vec& theta) {
  const double gamma = std::exp(theta(4));
  Vec r(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    r(k) = y(k) - bacon_watts_value(theta(0), theta(1), theta(2), theta(3), gamma, x(k));
  }
  return r;
}

Mat jacobian(const Vec& x, const Vec& theta) {
  const double gamma = std::exp(theta(4));
  Mat j(x.size(), 5);
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Vec row = bacon_watts_jacobian(theta(0), theta(1), theta(2), theta(3), gamma, x(k));
    row(4) *= gamma;  // d/d(log gamma)
    j.row(k) = row.transpose();
  }
  return j;
}

struct LmOutcome {
  Vec theta;
  double cost = 0.0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> cost_history;
};

LmOutcome levenberg_marquardt(const Vec& x, const Vec& y, Vec theta, const BwOptions& opts) {
  const double x_lo = x(0), x_hi = x(x.size() - 1);
  // gamma below the sampling resolution degenerates into a step function;
  // keep it between half the finest spacing and ten times the span
  double min_spacing = x_hi - x_lo;
  for (Eigen::Index k = 0; k + 1 < x.size(); ++k) {
    min_spacing = std::min(min_spacing, x(k + 1) - x(k));
  }
  const double log_gamma_lo = std::log(0.5 * min_spacing);
  const double log_gamma_hi = std::log(10.0 * (x_hi - x_lo));
  LmOutcome out;
  theta(3) = std::clamp(theta(3), x_lo, x_hi);
  theta(4) = std::clamp(theta(4), log_gamma_lo, log_gamma_hi);
  Vec r = residuals(x, y, theta);
  double cost = r.squaredNorm();
  out.cost_history.push_back(cost);

  double damping = opts.initial_damping;
  int iter = 0;
  for (; iter < opts.max_iterations; ++iter) {
    const Mat j = jacobian(x, theta);
    const Mat h = j.transpose() * j;
    const Vec g = j.transpose() * r;

    bool accepted = false;
    while (damping < 1e15) {
      Mat damped = h;
      for (int d = 0; d < 5; ++d) {
        damped(d, d) += damping * std::max(h(d, d), 1e-12);
      }
      const Vec step = damped.ldlt().solve(g);
      if (!step.allFinite()) {
        damping *= 10.0;
        continue;
      }
      Vec trial = theta + step;
      trial(3) = std::clamp(trial(3), x_lo, x_hi);
      trial(4) = std::clamp(trial(4), log_gamma_lo, log_gamma_hi);
      const Vec r_trial = residuals(x, y, trial);
      const double cost_trial = r_trial.squaredNorm();
      if (cost_trial < cost) {
        const double rel_drop = (cost - cost_trial) / std::max(cost, 1e-300);
        theta = trial;
        r = r_trial;
        cost = cost_trial;
        out.cost_history.push_back(cost);
        damping = std::max(damping / 10.0, 1e-12);
        accepted = true;
        if (rel_drop < opts.cost_tolerance || step.norm() < opts.step_tolerance) {
          out.converged = true;
        }
        break;
      }
      if (step.norm() < opts.step_tolerance) {
        out.converged = true;  // pinned to a minimum: no acceptable move left
        break;
      }
      damping *= 10.0;
    }
    if (out.converged || !accepted) break;
  }
  out.theta = theta;
  out.cost = cost;
  out.iterations = iter + 1;
  return out;
}

}  // namespace

BaconWattsFit fit_bacon_watts(const Vec& cycles, const Vec& soh, const BwOptions& opts) {
  const Eigen::Index n = cycles.size();
  if (n < 10 || soh.size() != n) {
    throw Error("fit_bacon_watts: need >= 10 points with matching lengths");
  }
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    if (!(cycles(k + 1) > cycles(k))) {
      throw Error("fit_bacon_watts: cycles must be strictly increasing");
    }
  }

  const double range = cycles(n - 1) - cycles(0);
  const double mean_x = cycles.mean();
  const double mean_y = soh.mean();
  const double slope = (cycles.array() - mean_x).cwiseProduct(soh.array() - mean_y).sum() /
                       (cycles.array() - mean_x).square().sum();

  std::vector<Vec> starts;
  if (opts.init) {
    Vec t = *opts.init;
    if (t.size() != 5 || !(t(4) > 0.0)) {
      throw Error("fit_bacon_watts: init must be (a0, a1, a2, x1, gamma) with gamma > 0");
    }
    t(4) = std::log(t(4));
    starts.push_back(t);
  } else {
    const double fractions[] = {0.5, 0.15, 0.35, 0.65, 0.85};
    const int n_starts = std::clamp(opts.starts, 1, 5);
    for (int s = 0; s < n_starts; ++s) {
      Vec t(5);
      t << mean_y, slope, slope, cycles(0) + fractions[s] * range, std::log(range / 10.0);
      starts.push_back(t);
    }
  }

  LmOutcome best;
  best.cost = std::numeric_limits<double>::infinity();
  for (const Vec& t0 : starts) {
    const LmOutcome run = levenberg_marquardt(cycles, soh, t0, opts);
    if (run.cost < best.cost) best = run;
  }

  BaconWattsFit fit;
  fit.alpha0 = best.theta(0);
  fit.alpha1 = best.theta(1);
  fit.alpha2 = best.theta(2);
  fit.knee_cycle = best.theta(3);
  fit.gamma = std::exp(best.theta(4));
  fit.residual_rms = std::sqrt(best.cost / static_cast<double>(n));
  fit.converged = best.converged;
  fit.iterations = best.iterations;
  fit.cost_history = best.cost_history;
  // the a2 term's largest possible contribution vs. the residual level
  const double data_scale = soh.cwiseAbs().maxCoeff();
  fit.low_curvature = std::abs(fit.alpha2) * 0.5 * range <=
                      std::max(4.0 * fit.residual_rms, 1e-9 * data_scale);
  return fit;
}

KneeClass knee_class(double x1) {
  if (x1 < 0.0) throw Error("knee_class: knee cycle must be nonnegative");
  if (x1 < 500.0) return KneeClass::kC1;
  if (x1 < 1100.0) return KneeClass::kC2;
  return KneeClass::kC3;
}

const char* knee_class_name(KneeClass klass) {
  switch (klass) {
    case KneeClass::kC1: return "C1";
    case KneeClass::kC2: return "C2";
    case KneeClass::kC3: return "C3";
  }
  return "?";
}

void write_knee_csv(const std::vector<KneeCsvRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("write_knee_csv: cannot write " + path);
  out << "cell_id,knee_cycle,gamma,alpha0,alpha1,alpha2,residual_rms,converged,low_curvature,"
         "class\n";
  char buf[256];
  for (const auto& row : rows) {
    const auto& f = row.fit;
    std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%d,%d,%s\n",
                  row.cell_id.c_str(), f.knee_cycle, f.gamma, f.alpha0, f.alpha1, f.alpha2,
                  f.residual_rms, f.converged ? 1 : 0, f.low_curvature ? 1 : 0,
                  knee_class_name(knee_class(std::max(f.knee_cycle, 0.0))));
    out << buf;
  }
}

}  // namespace knotcast
