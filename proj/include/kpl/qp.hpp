#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "kpl/math.hpp"

namespace kpl {

struct EqQpResult {
  VectorXd x;
  VectorXd lambda;
  bool success = false;
  std::string message;
};

// Minimizes 0.5 x'Hx + g'x subject to Ax = b.  H only needs to be
// positive semidefinite on the nullspace of A; singular reduced Hessians
// are resolved by the minimum-norm stationary point.  Multipliers satisfy
// Hx + g + A'lambda = 0 in the least-squares sense.
inline EqQpResult solve_eq_qp(const MatrixXd& h, const VectorXd& g, const MatrixXd& a,
                              const VectorXd& b) {
  const int n = static_cast<int>(h.rows());
  const int m = static_cast<int>(a.rows());
  EqQpResult out;

  VectorXd xp = VectorXd::Zero(n);
  MatrixXd z = MatrixXd::Identity(n, n);
  Eigen::ColPivHouseholderQR<MatrixXd> qr_at;
  if (m > 0) {
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(a);
    xp = cod.solve(b);
    if ((a * xp - b).norm() > 1e-8 * (1.0 + b.norm())) {
      out.message = "inconsistent equality constraints";
      return out;
    }
    qr_at.compute(a.transpose());
    const int rank = static_cast<int>(qr_at.rank());
    if (rank >= n) {
      z.resize(n, 0);
    } else {
      const MatrixXd q = qr_at.householderQ();
      z = q.rightCols(n - rank);
    }
  }

  VectorXd x = xp;
  if (z.cols() > 0) {
    const MatrixXd hr = z.transpose() * h * z;
    const VectorXd gr = z.transpose() * (g + h * xp);
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod_hr(hr);
    const VectorXd y = cod_hr.solve(-gr);
    if ((hr * y + gr).norm() > 1e-6 * (1.0 + gr.norm())) {
      out.message = "objective unbounded on the feasible set";
      return out;
    }
    x += z * y;
  }

  out.x = x;
  if (m > 0) {
    out.lambda = qr_at.solve(-(h * x + g));
  } else {
    out.lambda.resize(0);
  }
  out.success = true;
  return out;
}

struct QpResult {
  VectorXd x;
  VectorXd lambda_eq;
  VectorXd mu;  // one entry per inequality row, zero when inactive
  std::vector<int> active;
  bool success = false;
  std::string message;
};

// Active-set method for 0.5 x'Hx + g'x with Ax = b and Cx <= d.  Rows of
// C move in and out of the working set until the most violated row is
// satisfied and every working multiplier is nonnegative.
inline QpResult solve_qp(const MatrixXd& h, const VectorXd& g, const MatrixXd& a,
                         const VectorXd& b, const MatrixXd& c, const VectorXd& d,
                         std::vector<int> warm_active = {}) {
  const int m_eq = static_cast<int>(a.rows());
  const int m_in = static_cast<int>(c.rows());
  QpResult out;
  out.mu = VectorXd::Zero(m_in);

  std::vector<int> active = std::move(warm_active);
  std::sort(active.begin(), active.end());
  active.erase(std::unique(active.begin(), active.end()), active.end());
  active.erase(std::remove_if(active.begin(), active.end(),
                              [&](int i) { return i < 0 || i >= m_in; }),
               active.end());

  const double feas_tol = 1e-9 * (1.0 + (m_in ? d.cwiseAbs().maxCoeff() : 0.0));
  const int max_pass = 4 * (m_in + 1) + 8;
  for (int pass = 0; pass < max_pass; ++pass) {
    MatrixXd aw(m_eq + active.size(), h.rows());
    VectorXd bw(m_eq + active.size());
    aw.topRows(m_eq) = a;
    bw.head(m_eq) = b;
    for (size_t k = 0; k < active.size(); ++k) {
      aw.row(m_eq + k) = c.row(active[k]);
      bw[m_eq + k] = d[active[k]];
    }
    EqQpResult eq = solve_eq_qp(h, g, aw, bw);
    if (!eq.success) {
      // Most recently added row made the working set inconsistent.
      if (!active.empty()) {
        active.pop_back();
        continue;
      }
      out.message = eq.message;
      return out;
    }

    int worst = -1;
    double worst_gap = feas_tol;
    for (int i = 0; i < m_in; ++i) {
      if (std::find(active.begin(), active.end(), i) != active.end()) continue;
      const double gap = c.row(i).dot(eq.x) - d[i];
      if (gap > worst_gap) {
        worst_gap = gap;
        worst = i;
      }
    }
    if (worst >= 0) {
      active.push_back(worst);
      continue;
    }

    int drop = -1;
    double most_negative = -1e-9;
    for (size_t k = 0; k < active.size(); ++k) {
      const double mu_k = eq.lambda[m_eq + k];
      if (mu_k < most_negative) {
        most_negative = mu_k;
        drop = static_cast<int>(k);
      }
    }
    if (drop >= 0) {
      active.erase(active.begin() + drop);
      continue;
    }

    out.x = eq.x;
    out.lambda_eq = m_eq ? VectorXd(eq.lambda.head(m_eq)) : VectorXd();
    for (size_t k = 0; k < active.size(); ++k) out.mu[active[k]] = eq.lambda[m_eq + k];
    out.active = active;
    out.success = true;
    return out;
  }
  out.message = "active-set iteration limit";
  return out;
}

}  // namespace kpl
