#pragma once

#include "knotcast/common.hpp"

namespace knotcast {

struct NelderMeadResult {
  Vec x;
  double fx = 0.0;
  int iterations = 0;
};

/// Derivative-free simplex minimization. The objective may project its
/// argument onto a feasible set; the returned x is whatever argument scored
/// best, so callers should re-project it.
NelderMeadResult nelder_mead(const std::function<double(const Vec&)>& f, const Vec& start,
                             double step, int max_iterations, double tolerance = 1e-12);

}  // namespace knotcast
