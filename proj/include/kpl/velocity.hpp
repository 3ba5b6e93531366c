#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "hybrid.hpp"
#include "keyframe.hpp"
#include "qp.hpp"

namespace kpl {

struct VelocityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Planar average velocity (xdot, ydot, yawdot) over one step.
inline Vector3d average_step_velocity(const Footstep& a, const Footstep& b) {
  const double dt = b.t - a.t;
  if (dt <= 0)
    throw VelocityError("non-increasing timestamps: dt = " + std::to_string(dt));
  return {(b.x - a.x) / dt, (b.y - a.y) / dt, wrap_angle(b.yaw - a.yaw) / dt};
}

struct KeyframeVelocities {
  VectorXd qd_minus;                      // ends the step that lands here
  VectorXd qd_plus;                       // starts the next step
  Eigen::Matrix<double, 6, 1> impulse;    // landing wrench (force, moment)
  Vector3d average_velocity = Vector3d::Zero();
};

struct VelocityOptions {
  Matrix3d q_weight = Matrix3d::Identity();  // pre-impact deviation weight
  Matrix3d p_weight = Matrix3d::Identity();  // post-impact deviation weight
  double v_min = 0.05;    // required swing-foot descent speed at touchdown
  double eps_fwd = 0.01;  // required forward base speed after touchdown
};

// The assignment problem reduced to the pre-impact velocity alone: the
// post-impact velocity is R x throughout, so the contact conditions on
// both sides of the impact become linear rows in x and the cost becomes
// a convex quadratic.
struct VelocityQp {
  MatrixXd h;        // cost Hessian, rank <= 6
  MatrixXd g_map;    // gradient = g_map * v_avg
  Matrix3d w_const;  // constant cost term v_avg' w_const v_avg
  MatrixXd a_eq;     // stance rows, then post-impact contact rows; rhs 0
  int eq_rank = 0;
  MatrixXd a_in;     // rows a with a x <= b
  VectorXd b_in;
  std::vector<std::string> ineq_names;
  MatrixXd r;        // pre-to-post impact velocity map
  MatrixXd s;        // picks (xdot_b, ydot_b, yawdot_b) out of a velocity

  double cost(const VectorXd& x, const Vector3d& v_avg) const {
    const VectorXd g = g_map * v_avg;
    return 0.5 * x.dot(h * x) + g.dot(x) + v_avg.dot(w_const * v_avg);
  }
};

inline VelocityQp reduce_to_qp(const RobotModel& m, const KeyframePosture& kp,
                               const Vector3d& v_avg, const VelocityOptions& opt = {}) {
  const int nq = m.nq();
  Kinematics kin(m, kp.q);

  VelocityQp qp;
  qp.r = impact_velocity_map(m, kp.q, kp.leading);
  qp.s = MatrixXd::Zero(3, nq);
  qp.s(0, 0) = qp.s(1, 1) = qp.s(2, 5) = 1.0;

  const MatrixXd sr = qp.s * qp.r;
  qp.h = 2.0 * (qp.s.transpose() * opt.q_weight * qp.s + sr.transpose() * opt.p_weight * sr);
  qp.g_map = -2.0 * (qp.s.transpose() * opt.q_weight + sr.transpose() * opt.p_weight);
  qp.w_const = opt.q_weight + opt.p_weight;

  const MatrixXd j_stance = contact_jacobian(kin, kp.trailing());
  const MatrixXd j_landing = contact_jacobian(kin, kp.leading);
  qp.a_eq.resize(j_stance.rows() + j_landing.rows(), nq);
  qp.a_eq.topRows(j_stance.rows()) = j_stance;
  qp.a_eq.bottomRows(j_landing.rows()) = j_landing * qp.r;  // ~0 by construction
  Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(qp.a_eq);
  qp.eq_rank = static_cast<int>(cod.rank());

  // Touchdown approach: the swing sole must be descending. Forward
  // progress: the base planar velocity right after the impact keeps a
  // positive component along the commanded travel direction; with no
  // planar travel the paper's condition has no direction to point along,
  // so the row is omitted.
  std::vector<VectorXd> rows;
  std::vector<double> rhs;
  rows.push_back(j_landing.row(2));
  rhs.push_back(-opt.v_min);
  qp.ineq_names.push_back("swing-foot descent");
  const double vxy = std::hypot(v_avg.x(), v_avg.y());
  if (vxy > 1e-12) {
    const VectorXd fwd =
        (v_avg.x() * sr.row(0) + v_avg.y() * sr.row(1)).transpose() / vxy;
    rows.push_back(-fwd);
    rhs.push_back(-opt.eps_fwd);
    qp.ineq_names.push_back("forward progress");
  }
  qp.a_in.resize(rows.size(), nq);
  qp.b_in.resize(rhs.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    qp.a_in.row(static_cast<int>(i)) = rows[i].transpose();
    qp.b_in[static_cast<int>(i)] = rhs[i];
  }
  return qp;
}

struct VelocityQpSolution {
  VectorXd x;
  VectorXd lambda;  // equality multipliers
  VectorXd mu;      // inequality multipliers, zero when inactive
  std::vector<int> active;
  double cost = 0;
};

// With at most two inequality rows the active set is found by trying all
// subsets and keeping the KKT-consistent candidate of lowest cost. The
// Hessian is rank-deficient, so each subproblem is solved in minimum-norm
// form; the cost is a sum of squares and never unbounded.
inline VelocityQpSolution solve_velocity_qp(const VelocityQp& qp, const Vector3d& v_avg) {
  const VectorXd g = qp.g_map * v_avg;
  const int me = static_cast<int>(qp.a_eq.rows());
  const int mi = static_cast<int>(qp.a_in.rows());
  const double ftol = 1e-9 * (1.0 + (mi ? qp.b_in.cwiseAbs().maxCoeff() : 0.0));

  bool found = false;
  VelocityQpSolution best;
  for (int mask = 0; mask < (1 << mi); ++mask) {
    std::vector<int> act;
    for (int i = 0; i < mi; ++i)
      if (mask & (1 << i)) act.push_back(i);

    MatrixXd a(me + act.size(), qp.h.cols());
    VectorXd b = VectorXd::Zero(me + act.size());
    a.topRows(me) = qp.a_eq;
    for (size_t k = 0; k < act.size(); ++k) {
      a.row(me + static_cast<int>(k)) = qp.a_in.row(act[k]);
      b[me + static_cast<int>(k)] = qp.b_in[act[k]];
    }
    const EqQpResult res = solve_eq_qp(qp.h, g, a, b);
    if (!res.success) continue;

    bool ok = true;
    for (int i = 0; i < mi && ok; ++i)
      if (!(mask & (1 << i))) ok = qp.a_in.row(i).dot(res.x) <= qp.b_in[i] + ftol;
    for (size_t k = 0; k < act.size() && ok; ++k)
      ok = res.lambda[me + static_cast<int>(k)] >= -1e-9;
    if (!ok) continue;

    const double c = 0.5 * res.x.dot(qp.h * res.x) + g.dot(res.x);
    if (!found || c < best.cost - 1e-12 ||
        (c < best.cost + 1e-12 && act.size() < best.active.size())) {
      found = true;
      best.x = res.x;
      best.lambda = res.lambda.head(me);
      best.mu = VectorXd::Zero(mi);
      for (size_t k = 0; k < act.size(); ++k)
        best.mu[act[k]] = std::max(0.0, res.lambda[me + static_cast<int>(k)]);
      best.active = act;
      best.cost = c;
    }
  }
  if (found) return best;

  // No subset admits a KKT point, so the constraints exclude each other.
  // Name any margin row that is identically constant on the contact
  // manifold yet outside its bound; that is the usual failure mode
  // (a swing sole that cannot descend from this posture).
  Eigen::ColPivHouseholderQR<MatrixXd> qr(qp.a_eq.transpose());
  const MatrixXd qfull = qr.householderQ();
  const MatrixXd z = qfull.rightCols(qp.h.cols() - qr.rank());
  std::string detail;
  for (int i = 0; i < mi; ++i) {
    const VectorXd zr = z.transpose() * qp.a_in.row(i).transpose();
    if (zr.norm() <= 1e-9 * (1.0 + qp.a_in.row(i).norm()) && qp.b_in[i] < -ftol)
      detail += (detail.empty() ? "" : "; ") + qp.ineq_names[i] +
                " is fixed at zero on the contact manifold but must reach " +
                std::to_string(qp.b_in[i]);
  }
  if (detail.empty()) detail = "no consistent active set among the margin constraints";
  throw VelocityError("infeasible-qp: " + detail);
}

// Velocities for the touchdown at a keyframe: the minimizing pre-impact
// velocity, its image under the impact, and the contact impulse. The
// returned pair is impact-consistent by construction and re-checked
// against the full impact solve.
inline KeyframeVelocities assign_velocities(const RobotModel& m, const KeyframePosture& kp,
                                            const Vector3d& v_avg,
                                            const VelocityOptions& opt = {}) {
  const VelocityQp qp = reduce_to_qp(m, kp, v_avg, opt);
  const VelocityQpSolution sol = solve_velocity_qp(qp, v_avg);

  KeyframeVelocities out;
  out.qd_minus = sol.x;
  out.qd_plus = qp.r * sol.x;
  out.average_velocity = v_avg;

  const ImpactResult imp = impact_map(m, {kp.q, out.qd_minus}, kp.leading);
  if ((imp.qd_plus - out.qd_plus).cwiseAbs().maxCoeff() > 1e-9)
    throw VelocityError("impact map disagrees with the assignment reduction");
  out.impulse.setZero();
  out.impulse.head(imp.impulse.size()) = imp.impulse;
  return out;
}

}  // namespace kpl
