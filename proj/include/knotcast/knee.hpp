#pragma once

#include "knotcast/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace knotcast {

/// Two-segment change-point model
///   Y(x) = a0 + a1 (x - x1) + a2 (x - x1) tanh((x - x1) / gamma)
/// where x1 is the knee cycle and gamma the transition abruptness.
double bacon_watts_value(double a0, double a1, double a2, double x1, double gamma, double x);

/// Partials of Y in (a0, a1, a2, x1, gamma) at one point.
Vec bacon_watts_jacobian(double a0, double a1, double a2, double x1, double gamma, double x);

struct BaconWattsFit {
  double alpha0 = 0.0;
  double alpha1 = 0.0;
  double alpha2 = 0.0;
  double knee_cycle = 0.0;  // x1, within the fitted cycle range
  double gamma = 1.0;
  double residual_rms = 0.0;
  bool converged = false;
  bool low_curvature = false;  // the a2 term never rises above the noise
  int iterations = 0;
  std::vector<double> cost_history;  // accepted costs, non-increasing
};

struct BwOptions {
  int max_iterations = 200;
  double initial_damping = 1e-3;
  double cost_tolerance = 1e-10;  // relative cost change
  double step_tolerance = 1e-12;  // parameter step norm
  int starts = 5;                 // knee seeds spread across the cycle range
  std::optional<Vec> init;        // (a0, a1, a2, x1, gamma) override
};

/// Damped least squares with the analytic Jacobian; gamma is kept positive by
/// optimizing its logarithm and x1 is clamped to the data range. Multistart
/// over knee seeds, best final cost kept. Never throws on hard data: a fit
/// that cannot converge is returned with converged == false.
BaconWattsFit fit_bacon_watts(const Vec& cycles, const Vec& soh, const BwOptions& opts = {});

enum class KneeClass { kC1 = 0, kC2 = 1, kC3 = 2 };

/// Short / medium / long bins: x1 < 500, 500 <= x1 < 1100, 1100 <= x1.
KneeClass knee_class(double x1);
const char* knee_class_name(KneeClass klass);

struct KneeCsvRow {
  std::string cell_id;
  BaconWattsFit fit;
};

/// One CSV row per cell: id, x1, gamma, alphas, residual rms, class.
void write_knee_csv(const std::vector<KneeCsvRow>& rows, const std::string& path);

}  // namespace knotcast
