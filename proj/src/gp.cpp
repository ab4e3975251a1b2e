#include "knotcast/gp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "knotcast/optim.hpp"

namespace knotcast {

NelderMeadResult nelder_mead(const std::function<double(const Vec&)>& f, const Vec& start,
                             double step, int max_iterations, double tolerance) {
  const Eigen::Index d = start.size();
  std::vector<std::pair<double, Vec>> simplex;
  simplex.reserve(d + 1);
  simplex.emplace_back(f(start), start);
  for (Eigen::Index k = 0; k < d; ++k) {
    Vec v = start;
    v(k) += step;
    simplex.emplace_back(f(v), v);
  }
  auto by_value = [](const auto& a, const auto& b) { return a.first < b.first; };

  int iter = 0;
  for (; iter < max_iterations; ++iter) {
    std::sort(simplex.begin(), simplex.end(), by_value);
    if (simplex.back().first - simplex.front().first < tolerance) break;

    Vec centroid = Vec::Zero(d);
    for (Eigen::Index k = 0; k < d + 1; ++k) {
      if (k < d) centroid += simplex[static_cast<std::size_t>(k)].second;
    }
    centroid /= static_cast<double>(d);
    const Vec& worst = simplex.back().second;

    const Vec reflected = centroid + (centroid - worst);
    const double fr = f(reflected);
    if (fr < simplex.front().first) {
      const Vec expanded = centroid + 2.0 * (centroid - worst);
      const double fe = f(expanded);
      simplex.back() = fe < fr ? std::make_pair(fe, expanded) : std::make_pair(fr, reflected);
      continue;
    }
    if (fr < simplex[simplex.size() - 2].first) {
      simplex.back() = {fr, reflected};
      continue;
    }
    const Vec contracted = centroid + 0.5 * (worst - centroid);
    const double fc = f(contracted);
    if (fc < simplex.back().first) {
      simplex.back() = {fc, contracted};
      continue;
    }
    for (std::size_t k = 1; k < simplex.size(); ++k) {  // shrink toward the best
      simplex[k].second = simplex[0].second + 0.5 * (simplex[k].second - simplex[0].second);
      simplex[k].first = f(simplex[k].second);
    }
  }
  std::sort(simplex.begin(), simplex.end(), by_value);
  return {simplex.front().second, simplex.front().first, iter};
}

double GpSurrogate::kernel(const Vec& a, const Vec& b) const {
  double q = 0.0;
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const double r = (a(k) - b(k)) / length_scales_(k);
    q += r * r;
  }
  return signal_sd_ * signal_sd_ * std::exp(-0.5 * q);
}

void GpSurrogate::factorize() {
  const Eigen::Index m = x_.rows();
  Mat gram(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b <= a; ++b) {
      gram(a, b) = kernel(x_.row(a).transpose(), x_.row(b).transpose());
      gram(b, a) = gram(a, b);
    }
  }
  jitter_ = 1e-8;
  for (int attempt = 0; attempt < 10; ++attempt) {
    Mat k = gram + jitter_ * Mat::Identity(m, m);
    chol_.compute(k);
    if (chol_.info() == Eigen::Success) {
      alpha_ = chol_.solve(y_std_);
      // keep the interpolation error within 10x the jitter floor
      if (alpha_.cwiseAbs().maxCoeff() <= 10.0) return;
    }
    jitter_ *= 10.0;
  }
  if (chol_.info() != Eigen::Success) throw Error("GpSurrogate: covariance factorization failed");
  alpha_ = chol_.solve(y_std_);
}

GpSurrogate GpSurrogate::fit(const Mat& points, const Vec& values, std::uint64_t seed) {
  if (points.rows() < 1 || points.rows() != values.size()) {
    throw Error("GpSurrogate::fit: need one observation per sampled point");
  }
  const Eigen::Index m = points.rows();
  const Eigen::Index d = points.cols();

  GpSurrogate gp;
  gp.x_ = points;
  gp.y_ = values;
  gp.y_offset_ = values.mean();
  const double sd = std::sqrt(variance_of(values));
  gp.y_scale_ = sd > 1e-12 ? sd : 1.0;
  gp.y_std_ = (values.array() - gp.y_offset_) / gp.y_scale_;

  // spans give the length-scale search a data-driven origin
  Vec span(d);
  for (Eigen::Index k = 0; k < d; ++k) {
    const double s = points.col(k).maxCoeff() - points.col(k).minCoeff();
    span(k) = s > 1e-9 ? s : 1.0;
  }

  // theta = (log signal_sd, log length_scales...)
  auto project = [&](const Vec& theta) {
    Vec t = theta;
    t(0) = std::clamp(t(0), std::log(1e-2), std::log(1e2));
    for (Eigen::Index k = 0; k < d; ++k) {
      t(k + 1) = std::clamp(t(k + 1), std::log(span(k) * 1e-3), std::log(span(k) * 1e3));
    }
    return t;
  };
  auto negative_lml = [&](const Vec& theta_raw) {
    const Vec theta = project(theta_raw);
    GpSurrogate trial = gp;
    trial.signal_sd_ = std::exp(theta(0));
    trial.length_scales_ = theta.tail(d).array().exp();
    try {
      trial.factorize();
    } catch (const Error&) {
      return std::numeric_limits<double>::infinity();
    }
    const Mat& l = trial.chol_.matrixLLT();
    double log_det_half = 0.0;
    for (Eigen::Index k = 0; k < m; ++k) log_det_half += std::log(l(k, k));
    const double lml = -0.5 * trial.y_std_.dot(trial.alpha_) - log_det_half -
                       0.5 * static_cast<double>(m) * std::log(2.0 * M_PI);
    return -lml;
  };

  Vec theta0(d + 1);
  theta0(0) = 0.0;
  for (Eigen::Index k = 0; k < d; ++k) theta0(k + 1) = std::log(0.5 * span(k));

  Rng rng(seed ^ 0x6770ull);
  Vec best_theta = project(theta0);
  double best_val = negative_lml(best_theta);
  for (int start = 0; start < 6; ++start) {
    Vec t0 = theta0;
    if (start > 0) {
      for (Eigen::Index k = 0; k < t0.size(); ++k) t0(k) += rng.uniform(-1.5, 1.5);
    }
    const auto r = nelder_mead(negative_lml, t0, 0.4, 150);
    if (r.fx < best_val) {
      best_val = r.fx;
      best_theta = project(r.x);
    }
  }

  gp.signal_sd_ = std::exp(best_theta(0));
  gp.length_scales_ = best_theta.tail(d).array().exp();
  gp.factorize();
  gp.lml_ = -best_val;
  return gp;
}

GpSurrogate::Posterior GpSurrogate::predict(const Vec& x) const {
  const Eigen::Index m = x_.rows();
  Vec kstar(m);
  for (Eigen::Index k = 0; k < m; ++k) kstar(k) = kernel(x, x_.row(k).transpose());

  Posterior p;
  p.mean = y_offset_ + y_scale_ * kstar.dot(alpha_);
  const Vec solved = chol_.solve(kstar);
  double var = signal_sd_ * signal_sd_ + jitter_ - kstar.dot(solved);
  if (var <= 4.0 * jitter_) var = 0.0;  // numerical noise floor
  p.sd = y_scale_ * std::sqrt(var);
  return p;
}

double GpSurrogate::max_interpolation_error() const {
  double worst = 0.0;
  for (Eigen::Index k = 0; k < x_.rows(); ++k) {
    worst = std::max(worst, std::abs(predict(x_.row(k).transpose()).mean - y_(k)));
  }
  return worst;
}

}  // namespace knotcast
