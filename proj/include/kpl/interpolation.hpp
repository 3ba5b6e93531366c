#pragma once

#include <stdexcept>
#include <vector>

#include "kpl/math.hpp"

namespace kpl {

enum class InterpKind { pchip, makima, spline };

inline InterpKind interp_kind_from_string(const std::string& s) {
  if (s == "pchip") return InterpKind::pchip;
  if (s == "makima") return InterpKind::makima;
  if (s == "spline") return InterpKind::spline;
  throw std::invalid_argument("unknown interpolation kind: " + s);
}

inline const char* to_string(InterpKind k) {
  switch (k) {
    case InterpKind::pchip: return "pchip";
    case InterpKind::makima: return "makima";
    default: return "spline";
  }
}

// Piecewise-cubic interpolant of one channel, stored in Hermite form
// (knot values plus knot slopes).  The slope rule distinguishes the
// kinds: shape-preserving pchip, modified-Akima weights, or a C2 cubic
// spline with not-a-knot ends.
class Series1D {
 public:
  Series1D() = default;

  Series1D(VectorXd t, VectorXd y, InterpKind kind) : t_(std::move(t)), y_(std::move(y)) {
    const int n = static_cast<int>(t_.size());
    if (n < 2) throw std::invalid_argument("interpolation needs at least two samples");
    if (y_.size() != n) throw std::invalid_argument("sample count mismatch");
    if (!t_.allFinite() || !y_.allFinite())
      throw std::invalid_argument("non-finite interpolation data");
    for (int i = 0; i + 1 < n; ++i)
      if (!(t_[i + 1] > t_[i])) throw std::invalid_argument("knots must strictly increase");

    const VectorXd h = t_.tail(n - 1) - t_.head(n - 1);
    const VectorXd del = (y_.tail(n - 1) - y_.head(n - 1)).cwiseQuotient(h);
    d_.resize(n);
    if (n == 2) {
      d_.setConstant(del[0]);
      return;
    }
    switch (kind) {
      case InterpKind::pchip: fit_pchip(h, del); break;
      case InterpKind::makima: fit_makima(del); break;
      case InterpKind::spline: fit_spline(h, del); break;
    }
  }

  double t_begin() const { return t_[0]; }
  double t_end() const { return t_[t_.size() - 1]; }
  const VectorXd& knots() const { return t_; }
  const VectorXd& values() const { return y_; }

  void eval(double t, double* v, double* d1 = nullptr, double* d2 = nullptr) const {
    if (t_.size() == 0) throw std::logic_error("empty interpolant");
    if (t < t_begin() || t > t_end()) throw std::out_of_range("query outside the knot span");
    int lo = 0;
    int hi = static_cast<int>(t_.size()) - 1;
    while (hi - lo > 1) {
      const int mid = (lo + hi) / 2;
      (t_[mid] <= t ? lo : hi) = mid;
    }
    const double h = t_[hi] - t_[lo], s = (t - t_[lo]) / h;
    const double y0 = y_[lo], y1 = y_[hi], m0 = h * d_[lo], m1 = h * d_[hi];
    if (v)
      *v = y0 * (2 * s * s * s - 3 * s * s + 1) + m0 * (s * s * s - 2 * s * s + s) +
           y1 * (-2 * s * s * s + 3 * s * s) + m1 * (s * s * s - s * s);
    if (d1)
      *d1 = (y0 * (6 * s * s - 6 * s) + m0 * (3 * s * s - 4 * s + 1) + y1 * (6 * s - 6 * s * s) +
             m1 * (3 * s * s - 2 * s)) /
            h;
    if (d2)
      *d2 = (y0 * (12 * s - 6) + m0 * (6 * s - 4) + y1 * (6 - 12 * s) + m1 * (6 * s - 2)) / (h * h);
  }

  double value(double t) const {
    double v;
    eval(t, &v);
    return v;
  }

 private:
  static int sgn(double x) { return (x > 0) - (x < 0); }

  static double pchip_edge(double h0, double h1, double del0, double del1) {
    double d = ((2 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if (sgn(d) != sgn(del0)) return 0;
    if (sgn(del0) != sgn(del1) && std::abs(d) > 3 * std::abs(del0)) return 3 * del0;
    return d;
  }

  void fit_pchip(const VectorXd& h, const VectorXd& del) {
    const int n = static_cast<int>(t_.size());
    for (int i = 1; i + 1 < n; ++i) {
      if (sgn(del[i - 1]) * sgn(del[i]) > 0) {
        const double w1 = 2 * h[i] + h[i - 1], w2 = h[i] + 2 * h[i - 1];
        d_[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
      } else {
        d_[i] = 0;
      }
    }
    d_[0] = pchip_edge(h[0], h[1], del[0], del[1]);
    d_[n - 1] = pchip_edge(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
  }

  void fit_makima(const VectorXd& del) {
    const int n = static_cast<int>(t_.size());
    const int nd = n - 1;
    // Two ghost slopes on each side, extrapolated linearly.
    VectorXd ext(nd + 4);
    ext.segment(2, nd) = del;
    ext[1] = 2 * del[0] - del[1];
    ext[0] = 2 * ext[1] - del[0];
    ext[nd + 2] = 2 * del[nd - 1] - del[nd - 2];
    ext[nd + 3] = 2 * ext[nd + 2] - del[nd - 1];
    for (int i = 0; i < n; ++i) {
      const double dm2 = ext[i], dm1 = ext[i + 1], dp0 = ext[i + 2], dp1 = ext[i + 3];
      const double w1 = std::abs(dp1 - dp0) + std::abs(dp1 + dp0) / 2;
      const double w2 = std::abs(dm1 - dm2) + std::abs(dm1 + dm2) / 2;
      d_[i] = (w1 + w2 == 0) ? 0 : (w1 * dm1 + w2 * dp0) / (w1 + w2);
    }
  }

  void fit_spline(const VectorXd& h, const VectorXd& del) {
    const int n = static_cast<int>(t_.size());
    if (n == 3) {
      // Both not-a-knot conditions fall on the middle knot; the
      // interpolant degenerates to the parabola through the data.
      const double c = (del[1] - del[0]) / (t_[2] - t_[0]);
      for (int i = 0; i < 3; ++i) d_[i] = del[0] + c * (2 * t_[i] - t_[0] - t_[1]);
      return;
    }
    MatrixXd a = MatrixXd::Zero(n, n);
    VectorXd b(n);
    a(0, 0) = 1 / (h[0] * h[0]);
    a(0, 1) = 1 / (h[0] * h[0]) - 1 / (h[1] * h[1]);
    a(0, 2) = -1 / (h[1] * h[1]);
    b[0] = 2 * (del[0] / (h[0] * h[0]) - del[1] / (h[1] * h[1]));
    for (int i = 1; i + 1 < n; ++i) {
      a(i, i - 1) = 1 / h[i - 1];
      a(i, i) = 2 * (1 / h[i - 1] + 1 / h[i]);
      a(i, i + 1) = 1 / h[i];
      b[i] = 3 * (del[i - 1] / h[i - 1] + del[i] / h[i]);
    }
    const int m = n - 2;
    a(n - 1, n - 3) = 1 / (h[m - 1] * h[m - 1]);
    a(n - 1, n - 2) = 1 / (h[m - 1] * h[m - 1]) - 1 / (h[m] * h[m]);
    a(n - 1, n - 1) = -1 / (h[m] * h[m]);
    b[n - 1] = 2 * (del[m - 1] / (h[m - 1] * h[m - 1]) - del[m] / (h[m] * h[m]));
    d_ = a.partialPivLu().solve(b);
  }

  VectorXd t_, y_, d_;
};

// Independent interpolants of several channels over one knot vector.
class SeriesND {
 public:
  SeriesND() = default;

  SeriesND(const VectorXd& t, const MatrixXd& y, InterpKind kind) {
    if (y.rows() != t.size()) throw std::invalid_argument("sample count mismatch");
    ch_.reserve(y.cols());
    for (int c = 0; c < y.cols(); ++c) ch_.emplace_back(t, y.col(c), kind);
  }

  int channels() const { return static_cast<int>(ch_.size()); }
  double t_begin() const { return ch_.at(0).t_begin(); }
  double t_end() const { return ch_.at(0).t_end(); }

  void eval(double t, VectorXd* v, VectorXd* d1 = nullptr, VectorXd* d2 = nullptr) const {
    const int nc = channels();
    if (v) v->resize(nc);
    if (d1) d1->resize(nc);
    if (d2) d2->resize(nc);
    for (int c = 0; c < nc; ++c)
      ch_[c].eval(t, v ? &(*v)[c] : nullptr, d1 ? &(*d1)[c] : nullptr, d2 ? &(*d2)[c] : nullptr);
  }

 private:
  std::vector<Series1D> ch_;
};

}  // namespace kpl
