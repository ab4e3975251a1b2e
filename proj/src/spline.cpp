#include "knotcast/spline.hpp"

#include <algorithm>
#include <sstream>

namespace knotcast {

namespace {

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// One-sided three-point derivative for a boundary knot, clamped so the
// interpolant stays monotone next to the edge.
double edge_derivative(double h_near, double h_far, double s_near, double s_far) {
  double d = ((2.0 * h_near + h_far) * s_near - h_near * s_far) / (h_near + h_far);
  if (sign_of(d) != sign_of(s_near)) {
    d = 0.0;
  } else if (sign_of(s_near) != sign_of(s_far) && std::abs(d) > 3.0 * std::abs(s_near)) {
    d = 3.0 * s_near;
  }
  return d;
}

}  // namespace

MonotoneSpline fit_pchip(const Vec& x, const Vec& y) {
  const Eigen::Index n = x.size();
  if (n < 2 || y.size() != n) {
    std::ostringstream msg;
    msg << "fit_pchip: need >= 2 knots with matching lengths, got x=" << n
        << " y=" << y.size();
    throw Error(msg.str());
  }
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    if (!(x(k + 1) > x(k))) {
      std::ostringstream msg;
      msg << "fit_pchip: knot abscissae must be strictly increasing, violated at index "
          << k + 1 << " (" << x(k) << " -> " << x(k + 1) << ")";
      throw Error(msg.str());
    }
  }

  const Vec h = x.tail(n - 1) - x.head(n - 1);
  const Vec s = (y.tail(n - 1) - y.head(n - 1)).cwiseQuotient(h);

  Vec d(n);
  if (n == 2) {
    d.setConstant(s(0));
  } else {
    for (Eigen::Index k = 1; k + 1 < n; ++k) {
      if (s(k - 1) * s(k) <= 0.0) {
        d(k) = 0.0;
      } else {
        const double w1 = 2.0 * h(k) + h(k - 1);
        const double w2 = h(k) + 2.0 * h(k - 1);
        d(k) = (w1 + w2) / (w1 / s(k - 1) + w2 / s(k));
      }
    }
    d(0) = edge_derivative(h(0), h(1), s(0), s(1));
    d(n - 1) = edge_derivative(h(n - 2), h(n - 3), s(n - 2), s(n - 3));
  }

  MonotoneSpline out;
  out.x_ = x;
  out.y_ = y;
  out.d_ = d;
  out.c2_.resize(n - 1);
  out.c3_.resize(n - 1);
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    out.c2_(i) = (3.0 * s(i) - 2.0 * d(i) - d(i + 1)) / h(i);
    out.c3_(i) = (d(i) + d(i + 1) - 2.0 * s(i)) / (h(i) * h(i));
  }
  return out;
}

double MonotoneSpline::operator()(double q) const {
  const Eigen::Index n = x_.size();
  if (n == 0) throw Error("MonotoneSpline: evaluate called on an unfitted spline");
  if (q <= x_(0)) return y_(0);
  if (q >= x_(n - 1)) return y_(n - 1);
  const double* begin = x_.data();
  Eigen::Index i = std::upper_bound(begin, begin + n, q) - begin - 1;
  const double dx = q - x_(i);
  return y_(i) + dx * (d_(i) + dx * (c2_(i) + dx * c3_(i)));
}

Vec MonotoneSpline::operator()(const Vec& q) const {
  Vec out(q.size());
  for (Eigen::Index i = 0; i < q.size(); ++i) out(i) = (*this)(q(i));
  return out;
}

}  // namespace knotcast
