#pragma once

#include <functional>
#include <optional>

#include "kpl/qp.hpp"

namespace kpl {

// Smooth program  min f(x)  s.t.  c_eq(x) = 0,  c_in(x) <= 0.
// Callables for absent constraint families may be left empty.
struct NlpProblem {
  int n = 0;
  std::function<double(const VectorXd&)> cost;
  std::function<VectorXd(const VectorXd&)> cost_grad;
  std::function<VectorXd(const VectorXd&)> eq;
  std::function<MatrixXd(const VectorXd&)> eq_jac;
  std::function<VectorXd(const VectorXd&)> ineq;
  std::function<MatrixXd(const VectorXd&)> ineq_jac;
};

struct NlpOptions {
  double tol_eq = 1e-6;
  double tol_ineq = 1e-6;
  double tol_stat = 1e-5;
  int max_iter = 200;
  // Initial Lagrangian Hessian estimate; identity when empty.
  MatrixXd hessian0;
  // Keep hessian0 fixed instead of quasi-Newton updates.
  bool fixed_hessian = false;
  // Structured Lagrangian Hessian; overrides the quasi-Newton model when
  // set.  The solver adds adaptive diagonal damping when the subproblem
  // step is rejected, so the result may be indefinite or partial.
  std::function<MatrixXd(const VectorXd& x, const VectorXd& lambda_eq, const VectorXd& mu)>
      lagr_hessian;
  std::function<void(int iter, const VectorXd& x, double cost, double viol)> on_iter;
};

struct NlpResult {
  VectorXd x;
  VectorXd lambda_eq;
  VectorXd mu;
  bool converged = false;
  int iterations = 0;
  double cost = 0;
  double eq_violation = 0;
  double ineq_violation = 0;
  double stationarity = 0;
  std::string message;
};

struct DerivativeReport {
  double cost_grad_error = 0;
  double eq_jac_error = 0;
  double ineq_jac_error = 0;
  double worst() const { return std::max({cost_grad_error, eq_jac_error, ineq_jac_error}); }
};

// Central-difference audit of the supplied derivatives, scaled per entry
// by 1 + |analytic|.
inline DerivativeReport check_derivatives(const NlpProblem& p, const VectorXd& x,
                                          double h = 1e-6) {
  DerivativeReport rep;
  VectorXd e = VectorXd::Zero(p.n);
  const VectorXd g = p.cost_grad(x);
  for (int i = 0; i < p.n; ++i) {
    e[i] = h;
    const double fd = (p.cost(x + e) - p.cost(x - e)) / (2 * h);
    rep.cost_grad_error =
        std::max(rep.cost_grad_error, std::abs(fd - g[i]) / (1 + std::abs(g[i])));
    e[i] = 0;
  }
  auto jac_err = [&](const std::function<VectorXd(const VectorXd&)>& fn,
                     const std::function<MatrixXd(const VectorXd&)>& jf) {
    if (!fn) return 0.0;
    const MatrixXd j = jf(x);
    double worst = 0;
    for (int i = 0; i < p.n; ++i) {
      e[i] = h;
      const VectorXd fd = (fn(x + e) - fn(x - e)) / (2 * h);
      for (int r = 0; r < fd.size(); ++r)
        worst = std::max(worst, std::abs(fd[r] - j(r, i)) / (1 + std::abs(j(r, i))));
      e[i] = 0;
    }
    return worst;
  };
  rep.eq_jac_error = jac_err(p.eq, p.eq_jac);
  rep.ineq_jac_error = jac_err(p.ineq, p.ineq_jac);
  return rep;
}

namespace detail {

inline double constraint_l1(const VectorXd& ce, const VectorXd& ci) {
  double v = ce.cwiseAbs().sum();
  for (int i = 0; i < ci.size(); ++i) v += std::max(ci[i], 0.0);
  return v;
}

// First-order multipliers by least squares over the active rows, pruning
// negative inequality multipliers one at a time.
inline void estimate_multipliers(const VectorXd& g, const MatrixXd& ae, const MatrixXd& aw,
                                 const VectorXd& ci, VectorXd& lambda_eq, VectorXd& mu) {
  const int n = static_cast<int>(g.size());
  std::vector<int> act;
  for (int i = 0; i < ci.size(); ++i)
    if (ci[i] > -1e-6 * (1 + std::abs(ci[i]))) act.push_back(i);
  VectorXd y;
  while (true) {
    MatrixXd at(n, ae.rows() + act.size());
    if (ae.rows()) at.leftCols(ae.rows()) = ae.transpose();
    for (size_t k = 0; k < act.size(); ++k)
      at.col(ae.rows() + k) = aw.row(act[k]).transpose();
    y = at.cols() ? VectorXd(at.completeOrthogonalDecomposition().solve(-g)) : VectorXd();
    int worst = -1;
    double most = -1e-12;
    for (size_t k = 0; k < act.size(); ++k)
      if (y[ae.rows() + k] < most) {
        most = y[ae.rows() + k];
        worst = static_cast<int>(k);
      }
    if (worst < 0) break;
    act.erase(act.begin() + worst);
  }
  lambda_eq = y.head(ae.rows());
  mu = VectorXd::Zero(aw.rows());
  for (size_t k = 0; k < act.size(); ++k) mu[act[k]] = y[ae.rows() + k];
}

}  // namespace detail

// Line-search SQP.  Subproblems run through the active-set QP; the
// Lagrangian Hessian estimate keeps positive definiteness through damped
// rank-two updates, so the subproblems stay convex.
inline NlpResult solve_nlp(const NlpProblem& p, const VectorXd& x0, const NlpOptions& opt = {}) {
  NlpResult res;
  VectorXd x = x0;
  const int n = p.n;
  if (x.size() != n) throw std::invalid_argument("bad initial point size");

  auto eval_eq = [&](const VectorXd& xx) { return p.eq ? p.eq(xx) : VectorXd(); };
  auto eval_in = [&](const VectorXd& xx) { return p.ineq ? p.ineq(xx) : VectorXd(); };

  MatrixXd bmat = opt.hessian0.size() ? opt.hessian0 : MatrixXd::Identity(n, n);
  double f = p.cost(x);
  VectorXd g = p.cost_grad(x);
  VectorXd ce = eval_eq(x);
  VectorXd ci = eval_in(x);
  MatrixXd ae = p.eq ? p.eq_jac(x) : MatrixXd(0, n);
  MatrixXd aw = p.ineq ? p.ineq_jac(x) : MatrixXd(0, n);

  double nu = 1.0;
  double delta = 0.0;
  std::vector<int> warm;
  int stalls = 0;
  bool give_up = false;
  if (opt.lagr_hessian) detail::estimate_multipliers(g, ae, aw, ci, res.lambda_eq, res.mu);

  for (int iter = 0; iter < opt.max_iter && !give_up; ++iter) {
    res.iterations = iter + 1;

    MatrixXd hbase;
    if (opt.lagr_hessian) hbase = opt.lagr_hessian(x, res.lambda_eq, res.mu);

    VectorXd d;
    bool restoration = false;
    bool accepted = false;
    double alpha = 1.0;
    double f_new = f;
    VectorXd x_new = x, ce_new = ce, ci_new = ci;

    // An exact Hessian may be indefinite or badly conditioned away from
    // the solution, which shows up as a rejected or useless subproblem
    // step.  Retry with growing diagonal damping; the equality-tangent
    // step direction bends toward the projected gradient as the damping
    // grows, and the damping decays again once full steps are accepted.
    const int max_attempt = opt.lagr_hessian ? 10 : 1;
    for (int attempt = 0; attempt < max_attempt && !accepted; ++attempt) {
      const bool last = attempt == max_attempt - 1;
      if (opt.lagr_hessian) {
        bmat = hbase;
        if (delta > 0) bmat.diagonal().array() += delta;
      }
      QpResult qp = solve_qp(bmat, g, ae, -ce, aw, -ci, warm);
      restoration = false;
      if (qp.success) {
        d = qp.x;
        warm = qp.active;
        res.lambda_eq = qp.lambda_eq;
        res.mu = qp.mu;
      } else if (opt.lagr_hessian && !last) {
        delta = delta == 0 ? 1e-4 : 10 * delta;
        continue;
      } else {
        // Linearized constraints are inconsistent here; take a
        // minimum-norm Gauss-Newton step on the violated constraints.
        restoration = true;
        std::vector<int> viol;
        for (int i = 0; i < ci.size(); ++i)
          if (ci[i] > 0) viol.push_back(i);
        MatrixXd ar(ae.rows() + viol.size(), n);
        VectorXd cr(ar.rows());
        ar.topRows(ae.rows()) = ae;
        cr.head(ae.rows()) = ce;
        for (size_t k = 0; k < viol.size(); ++k) {
          ar.row(ae.rows() + k) = aw.row(viol[k]);
          cr[ae.rows() + k] = ci[viol[k]];
        }
        if (ar.rows() == 0) {
          res.message = "subproblem failed: " + qp.message;
          give_up = true;
          break;
        }
        Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(ar);
        d = -cod.solve(cr);
      }

      const double mult_inf =
          std::max(res.lambda_eq.size() ? res.lambda_eq.cwiseAbs().maxCoeff() : 0.0,
                   res.mu.size() ? res.mu.cwiseAbs().maxCoeff() : 0.0);
      const double nu_req = 1.2 * mult_inf + 1e-3;
      if (nu < nu_req)
        nu = nu_req;
      else if (nu > 10 * nu_req)
        nu = std::max(nu / 10, nu_req);  // let an early multiplier spike decay

      const double v0 = detail::constraint_l1(ce, ci);
      const double phi0 = f + nu * v0;
      const double dgrad = g.dot(d) - nu * v0;

      // A probe budget of three halvings decides whether this damping
      // level produces a usable step; only the final attempt searches all
      // the way down.  Every trial gets a second-order correction: the
      // merit penalty tracks the multiplier scale, so the quadratic
      // constraint violation of an uncorrected trial would veto steps
      // that are actually fine.
      const int halvings = opt.lagr_hessian && !last ? 3 : 40;
      alpha = 1.0;
      for (int ls = 0; ls < halvings && !accepted; ++ls) {
        x_new = x + alpha * d;
        ce_new = eval_eq(x_new);
        ci_new = eval_in(x_new);
        if (!restoration && (ce_new.size() || ci_new.size())) {
          // Correct the trial through the equality rows plus whatever
          // inequality rows it violates, and keep the corrected point
          // only when it actually restores; far from the base point the
          // linearization misleads.
          std::vector<int> viol;
          for (int i = 0; i < ci_new.size(); ++i)
            if (ci_new[i] > 0) viol.push_back(i);
          MatrixXd ast(ae.rows() + viol.size(), n);
          VectorXd cst(ast.rows());
          ast.topRows(ae.rows()) = ae;
          cst.head(ae.rows()) = ce_new;
          for (size_t k = 0; k < viol.size(); ++k) {
            ast.row(ae.rows() + k) = aw.row(viol[k]);
            cst[ae.rows() + k] = ci_new[viol[k]];
          }
          if (ast.rows()) {
            const VectorXd xs =
                x_new - Eigen::CompleteOrthogonalDecomposition<MatrixXd>(ast).solve(cst);
            const VectorXd ces = eval_eq(xs);
            const VectorXd cis = eval_in(xs);
            if (detail::constraint_l1(ces, cis) < detail::constraint_l1(ce_new, ci_new)) {
              x_new = xs;
              ce_new = ces;
              ci_new = cis;
            }
          }
        }
        f_new = p.cost(x_new);
        const double phi = f_new + nu * detail::constraint_l1(ce_new, ci_new);
        const double target = restoration ? phi0 - 1e-4 * alpha * nu * v0
                                          : phi0 + 1e-4 * alpha * std::min(dgrad, 0.0);
        if (phi <= target) {
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted && opt.lagr_hessian && !last)
        delta = delta == 0 ? 1e-4 : 10 * delta;
    }
    if (give_up) break;
    if (opt.lagr_hessian && accepted && alpha == 1.0) delta = delta <= 1e-6 ? 0.0 : delta / 3;
    if (!accepted) {
      if (++stalls >= 5) {
        res.message = "line search stalled";
        break;
      }
    } else {
      stalls = 0;
    }

    const VectorXd s = x_new - x;
    VectorXd g_new = p.cost_grad(x_new);
    MatrixXd ae_new = p.eq ? p.eq_jac(x_new) : MatrixXd(0, n);
    MatrixXd aw_new = p.ineq ? p.ineq_jac(x_new) : MatrixXd(0, n);

    // Multipliers re-estimated at the new point by least squares over the
    // active rows.  The subproblem's multipliers inherit the Hessian model
    // error, which would skew the update below and hide convergence.
    detail::estimate_multipliers(g_new, ae_new, aw_new, ci_new, res.lambda_eq, res.mu);

    if (!opt.lagr_hessian && !opt.fixed_hessian && s.norm() > 1e-14) {
      VectorXd gl_new = g_new, gl_old = g;
      if (res.lambda_eq.size()) {
        gl_new += ae_new.transpose() * res.lambda_eq;
        gl_old += ae.transpose() * res.lambda_eq;
      }
      if (res.mu.size()) {
        gl_new += aw_new.transpose() * res.mu;
        gl_old += aw.transpose() * res.mu;
      }
      VectorXd yv = gl_new - gl_old;
      const VectorXd bs = bmat * s;
      const double sbs = s.dot(bs);
      double sy = s.dot(yv);
      if (sbs > 0 && sy < 0.2 * sbs) {
        const double theta = 0.8 * sbs / (sbs - sy);
        yv = theta * yv + (1 - theta) * bs;
        sy = s.dot(yv);
      }
      if (sy > 1e-12 && sbs > 1e-12)
        bmat += (yv * yv.transpose()) / sy - (bs * bs.transpose()) / sbs;
    }

    x = x_new;
    f = f_new;
    g = g_new;
    ce = ce_new;
    ci = ci_new;
    ae = ae_new;
    aw = aw_new;

    res.eq_violation = ce.size() ? ce.cwiseAbs().maxCoeff() : 0.0;
    res.ineq_violation = ci.size() ? std::max(0.0, ci.maxCoeff()) : 0.0;
    VectorXd gl = g;
    if (res.lambda_eq.size() == ae.rows() && ae.rows()) gl += ae.transpose() * res.lambda_eq;
    if (res.mu.size() == aw.rows() && aw.rows()) gl += aw.transpose() * res.mu;
    res.stationarity = gl.cwiseAbs().maxCoeff();
    if (std::getenv("KPL_NLP_TRACE"))
      std::fprintf(
          stderr,
          "TRACE it %4d |d| %.3e a %.3f f %.8f eqv %.2e stat %.3e act %zu nu %.2e del %.1e\n",
          iter, d.norm(), alpha, f, res.eq_violation, res.stationarity, warm.size(), nu, delta);
    if (opt.on_iter) opt.on_iter(iter, x, f, std::max(res.eq_violation, res.ineq_violation));

    if (res.eq_violation <= opt.tol_eq && res.ineq_violation <= opt.tol_ineq &&
        res.stationarity <= opt.tol_stat * (1 + g.cwiseAbs().maxCoeff())) {
      res.converged = true;
      break;
    }
  }

  res.x = x;
  res.cost = f;
  res.eq_violation = ce.size() ? ce.cwiseAbs().maxCoeff() : 0.0;
  res.ineq_violation = ci.size() ? std::max(0.0, ci.maxCoeff()) : 0.0;
  if (res.message.empty() && !res.converged) res.message = "iteration limit";
  return res;
}

}  // namespace kpl
