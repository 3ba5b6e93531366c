#pragma once

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlp.hpp"
#include "velocity.hpp"

namespace kpl {

struct MotionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MotionOptions {
  double w_q = 1.0;
  double w_qd = 0.1;
  double w_rdd = 0.01;
  double w_f = 1e-4;
  double dt_min = 0.01;
  double mu = 0.6;
  // Unilateral and pyramid bounds on the contact forces. They are
  // feasibility guards beyond the core formulation; disable to solve the
  // bare problem.
  bool friction_guards = true;
  bool swing_clearance = true;
  VelocityOptions velocity;
  NlpOptions nlp;

  MotionOptions() {
    nlp.tol_eq = 1e-7;
    nlp.tol_ineq = 1e-8;
    nlp.max_iter = 400;
  }
};

// Reference configurations interpolated between the library's canonical
// straight-step pair. Only body height, body tilt, and joint angles are
// ever weighted against it, so the canonical frame needs no alignment
// with any particular step.
struct NominalTrajectory {
  std::vector<VectorXd> q_norm;
};

inline NominalTrajectory make_nominal_trajectory(const RobotModel& m, const KeyframeLibrary& lib,
                                                 int K) {
  if (K < 2) throw MotionError("nominal trajectory needs at least two samples");
  const std::vector<double> xs = lib.grid.dx.values();
  const double sx = xs[xs.size() / 2];
  const double sy = lib.grid.dy.values().front();
  const int ia = query_two_nearest(lib, Vector3d(sx, -sy, 0), Side::right).first;
  const int ib = query_two_nearest(lib, Vector3d(sx, sy, 0), Side::left).first;
  const VectorXd& qa = lib.entries[ia].q;
  const VectorXd& qb = lib.entries[ib].q;

  NominalTrajectory out;
  out.q_norm.reserve(K);
  for (int k = 0; k < K; ++k) {
    const double s = static_cast<double>(k) / (K - 1);
    VectorXd q = k == 0 ? qa : k == K - 1 ? qb : VectorXd(qa + s * (qb - qa));
    m.validate_state({q, VectorXd::Zero(m.nq())});
    out.q_norm.push_back(std::move(q));
  }
  return out;
}

// One continuous single-support phase, keyframe to keyframe.
struct StepContext {
  int index = 0;
  KeyframePosture start, end;
  VectorXd qd_start, qd_end;  // post-impact at start, pre-impact at end
  double t_start = 0;
  double duration = 0;
  double stance_yaw = 0;  // orients the friction pyramid
};

struct StepMotion {
  int index = 0;
  Side stance = Side::left;
  double t_start = 0, duration = 0;
  int K = 0, nc = 0;
  std::vector<VectorXd> q, qd;
  VectorXd dt;  // dt[K-1] is the trailing zero slot
  std::vector<Vector3d> r, rd, rdd;
  std::vector<std::vector<Vector3d>> f;  // [waypoint][contact point]
  KeyframePosture start_posture, end_posture;
  VectorXd qd_start, qd_end;
  double cost = 0;
  int iterations = 0;

  double time_of(int k) const {
    double t = t_start;
    for (int i = 0; i < k; ++i) t += dt[i];
    return t;
  }
};

namespace detail {

// Offsets into the stacked per-step decision vector
// {q, qdot, dt, r, rdot, rddot, F}.
struct StepLayout {
  int K = 0, nq = 0, nc = 0;
  int q0 = 0, qd0 = 0, dt0 = 0, r0 = 0, rd0 = 0, rdd0 = 0, f0 = 0;

  StepLayout() = default;
  StepLayout(int k, int n, int c) : K(k), nq(n), nc(c) {
    q0 = 0;
    qd0 = q0 + K * nq;
    dt0 = qd0 + K * nq;
    r0 = dt0 + K;
    rd0 = r0 + 3 * K;
    rdd0 = rd0 + 3 * K;
    f0 = rdd0 + 3 * K;
  }
  int q(int k) const { return q0 + k * nq; }
  int qd(int k) const { return qd0 + k * nq; }
  int dt(int k) const { return dt0 + k; }
  int r(int k) const { return r0 + 3 * k; }
  int rd(int k) const { return rd0 + 3 * k; }
  int rdd(int k) const { return rdd0 + 3 * k; }
  int f(int k, int j) const { return f0 + 3 * (k * nc + j); }
  int full() const { return f0 + 3 * K * nc; }
};

}  // namespace detail

struct StepProblem {
  NlpProblem nlp;  // over the free variables only
  VectorXd guess;
  int decision_dimension = 0;  // full stacked size including pinned slots
  detail::StepLayout layout;
  std::vector<int> free_idx;
  VectorXd pinned;  // full-size template carrying the pinned values
  StepContext ctx;
  MotionOptions opt;
  // Equality block sizes in residual order: newton, com, duration,
  // holonomic, then the three finite-difference families.
  std::vector<std::pair<std::string, int>> eq_blocks;

  VectorXd expand(const VectorXd& xr) const {
    VectorXd xf = pinned;
    for (size_t i = 0; i < free_idx.size(); ++i) xf[free_idx[i]] = xr[static_cast<int>(i)];
    return xf;
  }
};

inline StepProblem build_step_problem(const RobotModel& m, const StepContext& ctx,
                                      const NominalTrajectory& nominal, int K,
                                      const MotionOptions& opt = {}) {
  if (K < 3) throw MotionError("a step needs at least three way-points");
  if (ctx.duration <= 0) throw MotionError("step duration must be positive");
  if (ctx.start.leading != ctx.end.trailing())
    throw MotionError("inconsistent boundary data: start keyframe lands on the " +
                      std::string(ctx.start.leading == Side::left ? "left" : "right") +
                      " foot but the end keyframe stands on the other");
  if (static_cast<int>(nominal.q_norm.size()) != K)
    throw MotionError("nominal trajectory has " + std::to_string(nominal.q_norm.size()) +
                      " samples, the step uses " + std::to_string(K));
  const int nq = m.nq();
  if (ctx.qd_start.size() != nq || ctx.qd_end.size() != nq)
    throw MotionError("boundary velocity dimension mismatch");

  const Side stance = ctx.start.leading;
  const Side swing = other_side(stance);
  const int nc = static_cast<int>(m.foot(stance).contact_points().size());
  const int rows_st = m.foot(stance).constraint_rows();
  const detail::StepLayout lay(K, nq, nc);

  StepProblem p;
  p.layout = lay;
  p.decision_dimension = lay.full();
  p.ctx = ctx;
  p.opt = opt;

  // The end keyframe may sit a whole turn away in the yaw coordinate;
  // shift it by full turns so the step travels the short way.
  {
    const double shift = std::round((ctx.start.q[5] - ctx.end.q[5]) / (2 * M_PI));
    if (shift != 0) p.ctx.end.q[5] += 2 * M_PI * shift;
  }

  // Pinned slots: boundary states and the trailing duration slot that no
  // interval uses.
  p.pinned = VectorXd::Zero(lay.full());
  std::vector<bool> is_pinned(lay.full(), false);
  auto pin = [&](int off, const VectorXd& v) {
    p.pinned.segment(off, v.size()) = v;
    for (int i = 0; i < v.size(); ++i) is_pinned[off + i] = true;
  };
  pin(lay.q(0), p.ctx.start.q);
  pin(lay.q(K - 1), p.ctx.end.q);
  pin(lay.qd(0), ctx.qd_start);
  pin(lay.qd(K - 1), ctx.qd_end);
  pin(lay.dt(K - 1), VectorXd::Zero(1));
  for (int i = 0; i < lay.full(); ++i)
    if (!is_pinned[i]) p.free_idx.push_back(i);

  const double mt = m.total_mass();
  const Vector3d grav = m.gravity;
  const double duration = ctx.duration;

  p.eq_blocks = {{"newton", 3 * K},
                 {"com", 3 * K},
                 {"duration", 1},
                 {"holonomic", rows_st * (K - 2)},
                 {"fd-q", nq * (K - 1)},
                 {"fd-r", 3 * (K - 1)},
                 {"fd-rdot", 3 * (K - 1)}};
  int me = 0;
  for (const auto& b : p.eq_blocks) me += b.second;

  const int zs_lo = 2, zs_hi = K - 2;  // clearance window
  const int n_zs = opt.swing_clearance ? std::max(0, zs_hi - zs_lo + 1) : 0;
  const int n_fr = opt.friction_guards ? 5 * nc * K : 0;
  const int mi = n_zs + (K - 1) + n_fr;

  const RobotModel* model = &m;
  auto eval_eq = [model, lay, K, nq, nc, rows_st, stance, mt, grav, duration,
                  me](const VectorXd& xf) {
    VectorXd c(me);
    int row = 0;
    for (int k = 0; k < K; ++k) {
      Vector3d fsum = Vector3d::Zero();
      for (int j = 0; j < nc; ++j) fsum += xf.segment<3>(lay.f(k, j));
      c.segment<3>(row + 3 * k) = mt * xf.segment<3>(lay.rdd(k)) - fsum - mt * grav;
    }
    row += 3 * K;
    std::vector<Kinematics> kins;
    kins.reserve(K);
    for (int k = 0; k < K; ++k) kins.emplace_back(*model, xf.segment(lay.q(k), nq));
    for (int k = 0; k < K; ++k)
      c.segment<3>(row + 3 * k) = xf.segment<3>(lay.r(k)) - kins[k].com_position();
    row += 3 * K;
    c[row] = xf.segment(lay.dt(0), K).sum() - duration;
    row += 1;
    for (int k = 1; k <= K - 2; ++k) {
      c.segment(row, rows_st) = contact_jacobian(kins[k], stance) * xf.segment(lay.qd(k), nq);
      row += rows_st;
    }
    for (int k = 0; k < K - 1; ++k) {
      c.segment(row, nq) = xf.segment(lay.q(k + 1), nq) - xf.segment(lay.q(k), nq) -
                           0.5 * xf[lay.dt(k)] *
                               (xf.segment(lay.qd(k), nq) + xf.segment(lay.qd(k + 1), nq));
      row += nq;
    }
    for (int k = 0; k < K - 1; ++k) {
      c.segment<3>(row) = xf.segment<3>(lay.r(k + 1)) - xf.segment<3>(lay.r(k)) -
                          0.5 * xf[lay.dt(k)] *
                              (xf.segment<3>(lay.rd(k)) + xf.segment<3>(lay.rd(k + 1)));
      row += 3;
    }
    for (int k = 0; k < K - 1; ++k) {
      c.segment<3>(row) = xf.segment<3>(lay.rd(k + 1)) - xf.segment<3>(lay.rd(k)) -
                          0.5 * xf[lay.dt(k)] *
                              (xf.segment<3>(lay.rdd(k)) + xf.segment<3>(lay.rdd(k + 1)));
      row += 3;
    }
    return c;
  };

  auto jac_eq = [model, lay, K, nq, nc, rows_st, stance, mt, me](const VectorXd& xf) {
    MatrixXd a = MatrixXd::Zero(me, lay.full());
    int row = 0;
    for (int k = 0; k < K; ++k) {
      a.block<3, 3>(row + 3 * k, lay.rdd(k)) = mt * Matrix3d::Identity();
      for (int j = 0; j < nc; ++j)
        a.block<3, 3>(row + 3 * k, lay.f(k, j)) = -Matrix3d::Identity();
    }
    row += 3 * K;
    std::vector<Kinematics> kins;
    kins.reserve(K);
    for (int k = 0; k < K; ++k) kins.emplace_back(*model, xf.segment(lay.q(k), nq));
    for (int k = 0; k < K; ++k) {
      a.block<3, 3>(row + 3 * k, lay.r(k)) = Matrix3d::Identity();
      a.block(row + 3 * k, lay.q(k), 3, nq) = -kins[k].com_jacobian();
    }
    row += 3 * K;
    a.block(row, lay.dt(0), 1, K).setOnes();
    row += 1;
    const double h = 1e-6;
    for (int k = 1; k <= K - 2; ++k) {
      const VectorXd qd = xf.segment(lay.qd(k), nq);
      a.block(row, lay.qd(k), rows_st, nq) = contact_jacobian(kins[k], stance);
      VectorXd q = xf.segment(lay.q(k), nq);
      for (int i = 0; i < nq; ++i) {
        const double saved = q[i];
        q[i] = saved + h;
        const VectorXd up = contact_jacobian(Kinematics(*model, q), stance) * qd;
        q[i] = saved - h;
        const VectorXd dn = contact_jacobian(Kinematics(*model, q), stance) * qd;
        q[i] = saved;
        a.block(row, lay.q(k) + i, rows_st, 1) = (up - dn) / (2 * h);
      }
      row += rows_st;
    }
    for (int k = 0; k < K - 1; ++k) {
      const double dt = xf[lay.dt(k)];
      a.block(row, lay.q(k + 1), nq, nq).setIdentity();
      a.block(row, lay.q(k), nq, nq) = -MatrixXd::Identity(nq, nq);
      a.block(row, lay.qd(k), nq, nq) = -0.5 * dt * MatrixXd::Identity(nq, nq);
      a.block(row, lay.qd(k + 1), nq, nq) = -0.5 * dt * MatrixXd::Identity(nq, nq);
      a.block(row, lay.dt(k), nq, 1) =
          -0.5 * (xf.segment(lay.qd(k), nq) + xf.segment(lay.qd(k + 1), nq));
      row += nq;
    }
    for (int pass = 0; pass < 2; ++pass) {
      const auto lo = pass == 0 ? &detail::StepLayout::r : &detail::StepLayout::rd;
      const auto hi = pass == 0 ? &detail::StepLayout::rd : &detail::StepLayout::rdd;
      for (int k = 0; k < K - 1; ++k) {
        const double dt = xf[lay.dt(k)];
        a.block<3, 3>(row, (lay.*lo)(k + 1)) = Matrix3d::Identity();
        a.block<3, 3>(row, (lay.*lo)(k)) = -Matrix3d::Identity();
        a.block<3, 3>(row, (lay.*hi)(k)) = -0.5 * dt * Matrix3d::Identity();
        a.block<3, 3>(row, (lay.*hi)(k + 1)) = -0.5 * dt * Matrix3d::Identity();
        a.block<3, 1>(row, lay.dt(k)) =
            -0.5 * (xf.segment<3>((lay.*hi)(k)) + xf.segment<3>((lay.*hi)(k + 1)));
        row += 3;
      }
    }
    return a;
  };

  const double mu = opt.mu;
  const double cy = std::cos(ctx.stance_yaw), sy = std::sin(ctx.stance_yaw);
  const bool fric = opt.friction_guards;
  const bool clear = opt.swing_clearance;
  const double dt_min = opt.dt_min;
  auto eval_in = [model, lay, K, nq, nc, swing, mi, zs_lo, zs_hi, mu, cy, sy, fric, clear,
                  dt_min](const VectorXd& xf) {
    VectorXd c(mi);
    int row = 0;
    if (clear)
      for (int k = zs_lo; k <= zs_hi; ++k) {
        Kinematics kin(*model, xf.segment(lay.q(k), nq));
        c[row++] = -kin.sole_position(swing).z();
      }
    for (int k = 0; k < K - 1; ++k) c[row++] = dt_min - xf[lay.dt(k)];
    if (fric)
      for (int k = 0; k < K; ++k)
        for (int j = 0; j < nc; ++j) {
          const Vector3d f = xf.segment<3>(lay.f(k, j));
          const double fx = cy * f.x() + sy * f.y();
          const double fy = -sy * f.x() + cy * f.y();
          c[row++] = -f.z();
          c[row++] = fx - mu * f.z();
          c[row++] = -fx - mu * f.z();
          c[row++] = fy - mu * f.z();
          c[row++] = -fy - mu * f.z();
        }
    return c;
  };

  auto jac_in = [model, lay, K, nq, nc, swing, mi, zs_lo, zs_hi, mu, cy, sy, fric,
                 clear](const VectorXd& xf) {
    MatrixXd a = MatrixXd::Zero(mi, lay.full());
    int row = 0;
    if (clear)
      for (int k = zs_lo; k <= zs_hi; ++k) {
        Kinematics kin(*model, xf.segment(lay.q(k), nq));
        a.block(row, lay.q(k), 1, nq) = -contact_jacobian(kin, swing).row(2);
        ++row;
      }
    for (int k = 0; k < K - 1; ++k) a(row++, lay.dt(k)) = -1.0;
    if (fric)
      for (int k = 0; k < K; ++k)
        for (int j = 0; j < nc; ++j) {
          const int col = lay.f(k, j);
          a(row, col + 2) = -1.0;
          ++row;
          a(row, col) = cy;
          a(row, col + 1) = sy;
          a(row, col + 2) = -mu;
          ++row;
          a(row, col) = -cy;
          a(row, col + 1) = -sy;
          a(row, col + 2) = -mu;
          ++row;
          a(row, col) = -sy;
          a(row, col + 1) = cy;
          a(row, col + 2) = -mu;
          ++row;
          a(row, col) = sy;
          a(row, col + 1) = -cy;
          a(row, col + 2) = -mu;
          ++row;
        }
    return a;
  };

  // Squared-norm regularization toward the nominal posture and toward
  // small rates, accelerations, and forces. World-planar base position
  // and heading are never penalized: the nominal lives in a canonical
  // frame and the boundary conditions own the step's placement.
  VectorXd wq = VectorXd::Ones(nq);
  wq[0] = wq[1] = wq[5] = 0.0;
  std::vector<VectorXd> qn = nominal.q_norm;
  const double w_q = opt.w_q, w_qd = opt.w_qd, w_rdd = opt.w_rdd, w_f = opt.w_f;

  auto eval_cost = [lay, K, nq, nc, wq, qn, w_q, w_qd, w_rdd, w_f](const VectorXd& xf) {
    double c = 0;
    for (int k = 0; k < K; ++k) {
      const VectorXd dq = xf.segment(lay.q(k), nq) - qn[k];
      c += w_q * dq.cwiseProduct(wq).dot(dq);
      c += w_qd * xf.segment(lay.qd(k), nq).squaredNorm();
      c += w_rdd * xf.segment<3>(lay.rdd(k)).squaredNorm();
      for (int j = 0; j < nc; ++j) c += w_f * xf.segment<3>(lay.f(k, j)).squaredNorm();
    }
    return c;
  };
  auto grad_cost = [lay, K, nq, nc, wq, qn, w_q, w_qd, w_rdd, w_f](const VectorXd& xf) {
    VectorXd g = VectorXd::Zero(lay.full());
    for (int k = 0; k < K; ++k) {
      const VectorXd dq = xf.segment(lay.q(k), nq) - qn[k];
      g.segment(lay.q(k), nq) = 2 * w_q * dq.cwiseProduct(wq);
      g.segment(lay.qd(k), nq) = 2 * w_qd * xf.segment(lay.qd(k), nq);
      g.segment<3>(lay.rdd(k)) = 2 * w_rdd * xf.segment<3>(lay.rdd(k));
      for (int j = 0; j < nc; ++j)
        g.segment<3>(lay.f(k, j)) = 2 * w_f * xf.segment<3>(lay.f(k, j));
    }
    return g;
  };

  // Reduce everything to the free variables.
  const std::vector<int> free_idx = p.free_idx;
  const VectorXd pinned = p.pinned;
  auto expand = [free_idx, pinned](const VectorXd& xr) {
    VectorXd xf = pinned;
    for (size_t i = 0; i < free_idx.size(); ++i) xf[free_idx[i]] = xr[static_cast<int>(i)];
    return xf;
  };
  auto select_cols = [free_idx](const MatrixXd& a) {
    MatrixXd out(a.rows(), free_idx.size());
    for (size_t i = 0; i < free_idx.size(); ++i) out.col(static_cast<int>(i)) = a.col(free_idx[i]);
    return out;
  };
  auto select_vec = [free_idx](const VectorXd& v) {
    VectorXd out(free_idx.size());
    for (size_t i = 0; i < free_idx.size(); ++i) out[static_cast<int>(i)] = v[free_idx[i]];
    return out;
  };

  p.nlp.n = static_cast<int>(free_idx.size());
  p.nlp.cost = [eval_cost, expand](const VectorXd& x) { return eval_cost(expand(x)); };
  p.nlp.cost_grad = [grad_cost, expand, select_vec](const VectorXd& x) {
    return select_vec(grad_cost(expand(x)));
  };
  p.nlp.eq = [eval_eq, expand](const VectorXd& x) { return eval_eq(expand(x)); };
  p.nlp.eq_jac = [jac_eq, expand, select_cols](const VectorXd& x) {
    return select_cols(jac_eq(expand(x)));
  };
  p.nlp.ineq = [eval_in, expand](const VectorXd& x) { return eval_in(expand(x)); };
  p.nlp.ineq_jac = [jac_in, expand, select_cols](const VectorXd& x) {
    return select_cols(jac_in(expand(x)));
  };

  // Initial guess: straight-line configurations, matching constant
  // rates, uniform durations, the implied CoM path at rest forces.
  VectorXd xf = p.pinned;
  VectorXd dq_total = p.ctx.end.q - p.ctx.start.q;
  for (int i = 3; i < 6 && i < nq; ++i) dq_total[i] = wrap_angle(dq_total[i]);
  for (int k = 1; k < K - 1; ++k) {
    const double s = static_cast<double>(k) / (K - 1);
    xf.segment(lay.q(k), nq) = p.ctx.start.q + s * dq_total;
    xf.segment(lay.qd(k), nq) = dq_total / duration;
  }
  for (int k = 0; k < K - 1; ++k) xf[lay.dt(k)] = duration / (K - 1);
  for (int k = 0; k < K; ++k) {
    Kinematics kin(m, xf.segment(lay.q(k), nq));
    xf.segment<3>(lay.r(k)) = kin.com_position();
    xf.segment<3>(lay.rd(k)).setZero();
    xf.segment<3>(lay.rdd(k)).setZero();
    for (int j = 0; j < nc; ++j) xf.segment<3>(lay.f(k, j)) = -mt * grav / nc;
  }
  p.guess.resize(p.nlp.n);
  for (size_t i = 0; i < free_idx.size(); ++i) p.guess[static_cast<int>(i)] = xf[free_idx[i]];

  // Structured Lagrangian Hessian: the exact constant cost curvature, the
  // exact bilinear duration-rate cross terms of the difference identities,
  // and differenced curvature for the holonomic and center-of-mass rows.
  // The remaining terms are small enough that the solver's ridge handles
  // them.
  const int off_com = 3 * K;
  const int off_hol = 6 * K + 1;
  const int off_fdq = off_hol + rows_st * (K - 2);
  const int off_fdr = off_fdq + nq * (K - 1);
  const int off_fdrd = off_fdr + 3 * (K - 1);
  p.opt.nlp.lagr_hessian = [model, lay, K, nq, nc, rows_st, stance, swing, wq, w_q, w_qd, w_rdd,
                            w_f, off_com, off_hol, off_fdq, off_fdr, off_fdrd, zs_lo, zs_hi, clear,
                            expand,
                            free_idx](const VectorXd& xr, const VectorXd& le, const VectorXd& mu) {
    const VectorXd xf = expand(xr);
    MatrixXd h = MatrixXd::Zero(lay.full(), lay.full());
    for (int k = 0; k < K; ++k) {
      h.diagonal().segment(lay.q(k), nq) += 2 * w_q * wq;
      h.diagonal().segment(lay.qd(k), nq).array() += 2 * w_qd;
      h.diagonal().segment<3>(lay.rdd(k)).array() += 2 * w_rdd;
      for (int j = 0; j < nc; ++j) h.diagonal().segment<3>(lay.f(k, j)).array() += 2 * w_f;
    }
    h.diagonal().array() += 1e-6;

    auto add_sym = [&h](int a, int b, double v) {
      h(a, b) += v;
      h(b, a) += v;
    };
    for (int k = 0; k < K - 1; ++k) {
      for (int i = 0; i < nq; ++i) {
        const double v = -0.5 * le[off_fdq + k * nq + i];
        add_sym(lay.dt(k), lay.qd(k) + i, v);
        add_sym(lay.dt(k), lay.qd(k + 1) + i, v);
      }
      for (int i = 0; i < 3; ++i) {
        const double vr = -0.5 * le[off_fdr + 3 * k + i];
        add_sym(lay.dt(k), lay.rd(k) + i, vr);
        add_sym(lay.dt(k), lay.rd(k + 1) + i, vr);
        const double vv = -0.5 * le[off_fdrd + 3 * k + i];
        add_sym(lay.dt(k), lay.rdd(k) + i, vv);
        add_sym(lay.dt(k), lay.rdd(k + 1) + i, vv);
      }
    }

    const double fh = 1e-6;
    for (int k = 1; k <= K - 2; ++k) {
      const VectorXd lh = le.segment(off_hol + (k - 1) * rows_st, rows_st);
      VectorXd q = xf.segment(lay.q(k), nq);
      for (int j = 0; j < nq; ++j) {
        const double saved = q[j];
        q[j] = saved + fh;
        const VectorXd up = contact_jacobian(Kinematics(*model, q), stance).transpose() * lh;
        q[j] = saved - fh;
        const VectorXd dn = contact_jacobian(Kinematics(*model, q), stance).transpose() * lh;
        q[j] = saved;
        const VectorXd col = (up - dn) / (2 * fh);
        for (int i = 0; i < nq; ++i) add_sym(lay.qd(k) + i, lay.q(k) + j, col[i]);
      }
    }

    // Configuration-block curvature of the holonomic rows and of any
    // active swing-clearance rows, from central second differences of the
    // weighted scalars.
    const double f2 = 1e-4;
    auto add_scalar_curvature = [&](int k, auto&& phi) {
      VectorXd q = xf.segment(lay.q(k), nq);
      const double p0 = phi(q);
      MatrixXd hq(nq, nq);
      VectorXd pp(nq), pm(nq);
      for (int j = 0; j < nq; ++j) {
        const double saved = q[j];
        q[j] = saved + f2;
        pp[j] = phi(q);
        q[j] = saved - f2;
        pm[j] = phi(q);
        q[j] = saved;
        hq(j, j) = (pp[j] - 2 * p0 + pm[j]) / (f2 * f2);
      }
      for (int a = 0; a < nq; ++a)
        for (int b = a + 1; b < nq; ++b) {
          const double sa = q[a], sb = q[b];
          q[a] = sa + f2;
          q[b] = sb + f2;
          const double fpp = phi(q);
          q[b] = sb - f2;
          const double fpm = phi(q);
          q[a] = sa - f2;
          const double fmm = phi(q);
          q[b] = sb + f2;
          const double fmp = phi(q);
          q[a] = sa;
          q[b] = sb;
          hq(a, b) = hq(b, a) = (fpp - fpm - fmp + fmm) / (4 * f2 * f2);
        }
      h.block(lay.q(k), lay.q(k), nq, nq) += hq;
    };
    for (int k = 1; k <= K - 2; ++k) {
      const VectorXd lh = le.segment(off_hol + (k - 1) * rows_st, rows_st);
      if (lh.cwiseAbs().maxCoeff() < 1e-12) continue;
      const VectorXd qdk = xf.segment(lay.qd(k), nq);
      add_scalar_curvature(k, [&](const VectorXd& q) {
        return lh.dot(contact_jacobian(Kinematics(*model, q), stance) * qdk);
      });
    }
    if (clear && mu.size())
      for (int k = zs_lo; k <= zs_hi; ++k) {
        const double m_k = mu[k - zs_lo];
        if (m_k < 1e-12) continue;
        add_scalar_curvature(k, [&](const VectorXd& q) {
          return -m_k * Kinematics(*model, q).sole_position(swing).z();
        });
      }

    for (int k = 0; k < K; ++k) {
      const Vector3d lc = le.segment<3>(off_com + 3 * k);
      VectorXd q = xf.segment(lay.q(k), nq);
      MatrixXd hq(nq, nq);
      for (int j = 0; j < nq; ++j) {
        const double saved = q[j];
        q[j] = saved + fh;
        const VectorXd up = -Kinematics(*model, q).com_jacobian().transpose() * lc;
        q[j] = saved - fh;
        const VectorXd dn = -Kinematics(*model, q).com_jacobian().transpose() * lc;
        q[j] = saved;
        hq.col(j) = (up - dn) / (2 * fh);
      }
      h.block(lay.q(k), lay.q(k), nq, nq) += 0.5 * (hq + hq.transpose());
    }

    const int nf = static_cast<int>(free_idx.size());
    MatrixXd hc(lay.full(), nf);
    for (int j = 0; j < nf; ++j) hc.col(j) = h.col(free_idx[j]);
    MatrixXd hr(nf, nf);
    for (int i = 0; i < nf; ++i) hr.row(i) = hc.row(free_idx[i]);
    return hr;
  };

  // Initial model before any multiplier information exists.
  {
    VectorXd d = VectorXd::Constant(lay.full(), 1e-6);
    for (int k = 0; k < K; ++k) {
      d.segment(lay.q(k), nq) += 2 * w_q * wq;
      d.segment(lay.qd(k), nq).array() += 2 * w_qd;
      d.segment<3>(lay.rdd(k)).array() += 2 * w_rdd;
      for (int j = 0; j < nc; ++j) d.segment<3>(lay.f(k, j)).array() += 2 * w_f;
    }
    VectorXd dr(p.nlp.n);
    for (size_t i = 0; i < free_idx.size(); ++i) dr[static_cast<int>(i)] = d[free_idx[i]];
    p.opt.nlp.hessian0 = dr.asDiagonal();
  }
  return p;
}

namespace detail {

inline void require(bool ok, const std::string& what, double value, std::string& report) {
  if (!ok)
    report += (report.empty() ? "" : "; ") + what + " = " + std::to_string(value);
}

}  // namespace detail

// Independent re-check of every StepMotion invariant, straight from the
// stored way-points.
inline void verify_step_motion(const RobotModel& m, const StepMotion& sm,
                               const MotionOptions& opt = {}) {
  const int K = sm.K, nq = m.nq();
  const double mt = m.total_mass();
  std::string bad;
  double dtsum = 0;
  for (int k = 0; k < K; ++k) dtsum += sm.dt[k];
  detail::require(std::abs(dtsum - sm.duration) < 1e-8, "duration residual",
                  dtsum - sm.duration, bad);
  for (int k = 0; k < K; ++k) {
    Kinematics kin(m, sm.q[k]);
    Vector3d fsum = Vector3d::Zero();
    for (const Vector3d& f : sm.f[k]) fsum += f;
    const double newton = (mt * sm.rdd[k] - fsum - mt * m.gravity).cwiseAbs().maxCoeff();
    detail::require(newton < 1e-5, "newton residual at k=" + std::to_string(k), newton, bad);
    const double com = (sm.r[k] - kin.com_position()).norm();
    detail::require(com < 1e-6, "com residual at k=" + std::to_string(k), com, bad);
    if (k > 0 && k < K - 1) {
      const double hol = (contact_jacobian(kin, sm.stance) * sm.qd[k]).cwiseAbs().maxCoeff();
      detail::require(hol < 1e-6, "holonomic residual at k=" + std::to_string(k), hol, bad);
      const double z = kin.sole_position(other_side(sm.stance)).z();
      if (opt.swing_clearance && k >= 2 && k <= K - 2)
        detail::require(z > -1e-6, "swing clearance at k=" + std::to_string(k), z, bad);
    }
    if (k < K - 1)
      detail::require(sm.dt[k] >= opt.dt_min - 1e-9, "dt at k=" + std::to_string(k), sm.dt[k],
                      bad);
  }
  for (int k = 0; k < K - 1; ++k) {
    const double fq = (sm.q[k + 1] - sm.q[k] - 0.5 * sm.dt[k] * (sm.qd[k] + sm.qd[k + 1]))
                          .cwiseAbs()
                          .maxCoeff();
    const double fr =
        (sm.r[k + 1] - sm.r[k] - 0.5 * sm.dt[k] * (sm.rd[k] + sm.rd[k + 1])).cwiseAbs().maxCoeff();
    const double fv = (sm.rd[k + 1] - sm.rd[k] - 0.5 * sm.dt[k] * (sm.rdd[k] + sm.rdd[k + 1]))
                          .cwiseAbs()
                          .maxCoeff();
    detail::require(fq < 1e-6, "difference identity (q) at k=" + std::to_string(k), fq, bad);
    detail::require(fr < 1e-6, "difference identity (r) at k=" + std::to_string(k), fr, bad);
    detail::require(fv < 1e-6, "difference identity (rdot) at k=" + std::to_string(k), fv, bad);
  }
  if ((sm.q.front() - sm.start_posture.q).cwiseAbs().maxCoeff() != 0 ||
      (sm.q.back() - sm.end_posture.q).cwiseAbs().maxCoeff() != 0)
    bad += (bad.empty() ? "" : "; ") + std::string("boundary configurations not pinned");
  if (!bad.empty()) throw MotionError("step motion verification failed: " + bad);
  for (int k = 0; k < K; ++k) m.validate_state({sm.q[k], sm.qd[k]}, false);
}

inline StepMotion solve_step_motion(const RobotModel& m, const StepProblem& p) {
  const NlpResult res = solve_nlp(p.nlp, p.guess, p.opt.nlp);
  if (!res.converged) {
    // Surface the violation per constraint family.
    const VectorXd c = p.nlp.eq(res.x);
    std::string rep;
    int row = 0;
    for (const auto& b : p.eq_blocks) {
      const double v = b.second ? c.segment(row, b.second).cwiseAbs().maxCoeff() : 0.0;
      rep += (rep.empty() ? "" : ", ") + b.first + " " + std::to_string(v);
      row += b.second;
    }
    throw MotionError("step " + std::to_string(p.ctx.index) + " failed: " + res.message +
                      " (iterations " + std::to_string(res.iterations) + "; " + rep + ")");
  }

  const VectorXd xf = p.expand(res.x);
  const detail::StepLayout& lay = p.layout;
  StepMotion sm;
  sm.index = p.ctx.index;
  sm.stance = p.ctx.start.leading;
  sm.t_start = p.ctx.t_start;
  sm.duration = p.ctx.duration;
  sm.K = lay.K;
  sm.nc = lay.nc;
  sm.dt = xf.segment(lay.dt(0), lay.K);
  for (int k = 0; k < lay.K; ++k) {
    sm.q.push_back(xf.segment(lay.q(k), lay.nq));
    sm.qd.push_back(xf.segment(lay.qd(k), lay.nq));
    sm.r.push_back(xf.segment<3>(lay.r(k)));
    sm.rd.push_back(xf.segment<3>(lay.rd(k)));
    sm.rdd.push_back(xf.segment<3>(lay.rdd(k)));
    std::vector<Vector3d> fk;
    for (int j = 0; j < lay.nc; ++j) fk.push_back(xf.segment<3>(lay.f(k, j)));
    sm.f.push_back(std::move(fk));
  }
  sm.start_posture = p.ctx.start;
  sm.end_posture = p.ctx.end;
  sm.qd_start = p.ctx.qd_start;
  sm.qd_end = p.ctx.qd_end;
  sm.cost = res.cost;
  sm.iterations = res.iterations;
  verify_step_motion(m, sm, p.opt);
  return sm;
}

struct StepTiming {
  double posture = 0, assignment = 0, solve = 0;  // seconds
};

struct WalkPlan {
  uint64_t model_hash = 0;
  int K = 0;
  FootstepSequence footsteps;
  std::vector<StepMotion> steps;
  std::vector<StepTiming> timing;
};

// Pipeline over a footstep sequence: posture interpolation, velocity
// assignment, then one continuous-phase solve per step. The first two
// footsteps are the feet the robot starts standing on.
inline WalkPlan plan_walk(const RobotModel& m, const KeyframeLibrary& lib,
                          const FootstepSequence& seq, const NominalTrajectory& nominal, int K,
                          const MotionOptions& opt = {}) {
  validate_sequence(m, seq);
  const int n = static_cast<int>(seq.steps.size());
  if (n < 3) throw MotionError("a walk needs at least three footsteps");

  using clock = std::chrono::steady_clock;
  auto secs = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
  };

  WalkPlan plan;
  plan.model_hash = model_hash(m);
  plan.K = K;
  plan.footsteps = seq;

  // Landing s consumes footsteps s-1 (trailing) and s (leading). The
  // posture of landing s is shared as the end of one step and the start
  // of the next; its velocities come from one assignment, which is what
  // makes adjacent steps impact-consistent.
  std::vector<KeyframePosture> postures(n);
  std::vector<KeyframeVelocities> velocities(n);
  double first_posture_time = 0;
  {
    const auto t0 = clock::now();
    postures[1] = interpolate_posture(lib, m, seq, 0);
    first_posture_time = secs(t0, clock::now());
  }

  for (int s = 2; s < n; ++s) {
    StepTiming tm;
    auto t0 = clock::now();
    postures[s] = interpolate_posture(lib, m, seq, s - 1);
    tm.posture = secs(t0, clock::now()) + (s == 2 ? first_posture_time : 0.0);

    t0 = clock::now();
    velocities[s] = assign_velocities(
        m, postures[s], average_step_velocity(seq.steps[s - 1], seq.steps[s]), opt.velocity);
    tm.assignment = secs(t0, clock::now());

    StepContext ctx;
    ctx.index = s - 2;
    ctx.start = postures[s - 1];
    ctx.end = postures[s];
    ctx.qd_start = s == 2 ? VectorXd::Zero(m.nq()) : velocities[s - 1].qd_plus;
    ctx.qd_end = velocities[s].qd_minus;
    ctx.t_start = seq.steps[s - 1].t;
    ctx.duration = seq.steps[s].t - seq.steps[s - 1].t;
    ctx.stance_yaw = seq.steps[s - 1].yaw;

    t0 = clock::now();
    const StepProblem problem = build_step_problem(m, ctx, nominal, K, opt);
    plan.steps.push_back(solve_step_motion(m, problem));
    tm.solve = secs(t0, clock::now());
    plan.timing.push_back(tm);
  }
  return plan;
}

}  // namespace kpl
