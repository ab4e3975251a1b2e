#pragma once

#include "knotcast/common.hpp"

namespace knotcast {

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// Gaussian-process regressor with an anisotropic squared-exponential kernel.
/// Hyperparameters are fit by multistart maximization of the log marginal
/// likelihood on standardized observations. Immutable after fit.
class GpSurrogate {
 public:
  GpSurrogate() = default;

  /// points: one row per observation; values: the observed objective.
  static GpSurrogate fit(const Mat& points, const Vec& values, std::uint64_t seed);

  struct Posterior {
    double mean = 0.0;
    double sd = 0.0;
  };

  /// Posterior predictive marginal at x. Variances at or below the numerical
  /// noise floor report sd == 0 exactly.
  Posterior predict(const Vec& x) const;

  const Mat& sampled_points() const { return x_; }
  const Vec& observations() const { return y_; }
  double best_observed() const { return y_.minCoeff(); }
  Eigen::Index size() const { return y_.size(); }

  double jitter() const { return jitter_; }
  double value_scale() const { return y_scale_; }
  double log_marginal_likelihood() const { return lml_; }
  const Vec& length_scales() const { return length_scales_; }

  /// max_i |posterior_mean(x_i) - y_i|, bounded by 10 * jitter * value_scale.
  double max_interpolation_error() const;

 private:
  Mat x_;               // M x D
  Vec y_;               // raw observations
  Vec y_std_;           // standardized
  double y_offset_ = 0.0;
  double y_scale_ = 1.0;
  double signal_sd_ = 1.0;
  Vec length_scales_;   // per dimension
  double jitter_ = 1e-8;
  double lml_ = 0.0;
  Eigen::LLT<Mat> chol_;
  Vec alpha_;           // (K + jitter I)^-1 y_std

  double kernel(const Vec& a, const Vec& b) const;
  void factorize();
};

}  // namespace knotcast
