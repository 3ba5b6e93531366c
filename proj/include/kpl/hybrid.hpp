#pragma once

#include <functional>
#include <optional>

#include "kpl/dynamics.hpp"

namespace kpl {

struct DynamicsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Holonomic contact constraint of a support foot: pinned sole point for
// point feet, welded sole frame for flat feet.
inline MatrixXd contact_jacobian(const Kinematics& kin, Side s) {
  const Foot& f = kin.model().foot(s);
  if (f.contact == ContactType::point) return kin.point_jacobian(f.link, kin.sole_position(s));
  return kin.frame_jacobian(f.link, kin.sole_position(s));
}

// Jdot * qd for the same constraint rows.
inline VectorXd contact_bias(const Kinematics& kin, Side s, const VectorXd& qd) {
  const Foot& f = kin.model().foot(s);
  const auto mo = propagate_motion(kin, qd, VectorXd::Zero(kin.model().nq()));
  Vector3d a;
  point_motion(kin, mo, f.link, kin.sole_position(s), nullptr, &a);
  if (f.contact == ContactType::point) return a;
  VectorXd b(6);
  b << a, mo[f.link].alpha;
  return b;
}

// Height of a foot's sole frame above the ground plane and its rate.
inline void swing_foot_height(const RobotModel& m, const GeneralizedState& s, Side foot, double* z,
                              double* zdot) {
  Kinematics kin(m, s.q);
  if (z) *z = kin.sole_position(foot).z();
  if (zdot) {
    const Foot& f = m.foot(foot);
    *zdot = kin.point_jacobian(f.link, kin.sole_position(foot)).row(2).dot(s.qd);
  }
}

namespace detail {

inline void check_contact_conditioning(const MatrixXd& M, const MatrixXd& J) {
  Eigen::LLT<MatrixXd> llt(M);
  if (llt.info() != Eigen::Success) throw DynamicsError("mass matrix not positive definite");
  MatrixXd JMiJt = J * llt.solve(J.transpose());
  Eigen::JacobiSVD<MatrixXd> svd(JMiJt);
  const double smin = svd.singularValues().minCoeff();
  const double smax = svd.singularValues().maxCoeff();
  if (smin <= 0 || smax / smin > 1e8)
    throw DynamicsError("degenerate support contact (ill-conditioned constraint)");
}

}  // namespace detail

struct ConstrainedAccel {
  VectorXd qdd;
  VectorXd contact_force;  // constraint wrench on the support foot
};

// Accelerations of the support-constrained dynamics
//   M qdd + c = B u + J' F,   J qdd + Jdot qd = -2 alpha J qd
// solved as one saddle-point system.  alpha is the constraint-drift gain
// (zero recovers the exact constraint equation).
inline ConstrainedAccel constrained_acceleration(const RobotModel& m, const GeneralizedState& s,
                                                 const VectorXd& u, Side support,
                                                 double alpha = 10.0) {
  if (u.size() != m.n()) throw DynamicsError("input dimension mismatch");
  Kinematics kin(m, s.q);
  const MatrixXd M = mass_matrix(m, kin);
  const VectorXd c = bias_forces(m, kin, s.qd);
  const MatrixXd J = contact_jacobian(kin, support);
  const VectorXd jdqd = contact_bias(kin, support, s.qd);
  detail::check_contact_conditioning(M, J);

  const int nq = m.nq(), nc = static_cast<int>(J.rows());
  MatrixXd kkt = MatrixXd::Zero(nq + nc, nq + nc);
  kkt.topLeftCorner(nq, nq) = M;
  kkt.topRightCorner(nq, nc) = -J.transpose();
  kkt.bottomLeftCorner(nc, nq) = J;
  VectorXd rhs(nq + nc);
  rhs.head(nq) = m.input_map() * u - c;
  rhs.tail(nc) = -jdqd - 2.0 * alpha * (J * s.qd);
  VectorXd sol = kkt.partialPivLu().solve(rhs);
  return {sol.head(nq), sol.tail(nc)};
}

// Support-eliminated dynamics M qdd + cbar = Bbar u, obtained by solving
// the contact force out of the constrained equations.
struct ReducedDynamics {
  VectorXd cbar;
  MatrixXd Bbar;
};

inline ReducedDynamics reduced_dynamics(const RobotModel& m, const Kinematics& kin,
                                        const VectorXd& qd, Side support) {
  const MatrixXd M = mass_matrix(m, kin);
  const VectorXd c = bias_forces(m, kin, qd);
  const MatrixXd J = contact_jacobian(kin, support);
  const VectorXd jdqd = contact_bias(kin, support, qd);
  detail::check_contact_conditioning(M, J);

  Eigen::LLT<MatrixXd> llt(M);
  const MatrixXd JMi = J * llt.solve(MatrixXd::Identity(m.nq(), m.nq()));
  const MatrixXd lam = (JMi * J.transpose()).partialPivLu().solve(
      MatrixXd::Identity(J.rows(), J.rows()));
  const MatrixXd B = m.input_map();
  ReducedDynamics out;
  out.cbar = c - J.transpose() * lam * (JMi * c - jdqd);
  out.Bbar = B - J.transpose() * lam * (JMi * B);
  return out;
}

struct ImpactResult {
  VectorXd qd_plus;
  VectorXd impulse;  // impulsive contact wrench on the new support foot
};

// Plastic impact transferring support to `new_support`: momentum balance
// M (qd+ - qd-) = J' dF with the new support brought to rest, J qd+ = 0.
inline ImpactResult impact_map(const RobotModel& m, const GeneralizedState& s, Side new_support,
                               bool check_height = true) {
  Kinematics kin(m, s.q);
  if (check_height && std::abs(kin.sole_position(new_support).z()) > 1e-6)
    throw DynamicsError("impact requested with the landing foot off the ground");
  const MatrixXd M = mass_matrix(m, kin);
  const MatrixXd J = contact_jacobian(kin, new_support);
  detail::check_contact_conditioning(M, J);

  const int nq = m.nq(), nc = static_cast<int>(J.rows());
  MatrixXd kkt = MatrixXd::Zero(nq + nc, nq + nc);
  kkt.topLeftCorner(nq, nq) = M;
  kkt.topRightCorner(nq, nc) = -J.transpose();
  kkt.bottomLeftCorner(nc, nq) = J;
  VectorXd rhs = VectorXd::Zero(nq + nc);
  rhs.head(nq) = M * s.qd;
  VectorXd sol = kkt.partialPivLu().solve(rhs);
  return {sol.head(nq), sol.tail(nc)};
}

// Linear map qd+ = R(q) qd- of the plastic impact, columns solved from
// the same saddle-point system.
inline MatrixXd impact_velocity_map(const RobotModel& m, const VectorXd& q, Side new_support) {
  Kinematics kin(m, q);
  const MatrixXd M = mass_matrix(m, kin);
  const MatrixXd J = contact_jacobian(kin, new_support);
  detail::check_contact_conditioning(M, J);

  const int nq = m.nq(), nc = static_cast<int>(J.rows());
  MatrixXd kkt = MatrixXd::Zero(nq + nc, nq + nc);
  kkt.topLeftCorner(nq, nq) = M;
  kkt.topRightCorner(nq, nc) = -J.transpose();
  kkt.bottomLeftCorner(nc, nq) = J;
  Eigen::PartialPivLU<MatrixXd> lu(kkt);
  MatrixXd rhs = MatrixXd::Zero(nq + nc, nq);
  rhs.topRows(nq) = M;
  return lu.solve(rhs).topRows(nq);
}

struct TrajectorySample {
  double t;
  VectorXd q, qd, qdd;
};

struct Trajectory {
  std::vector<TrajectorySample> samples;

  bool empty() const { return samples.empty(); }
  double t_begin() const { return samples.front().t; }
  double t_end() const { return samples.back().t; }

  // Cubic Hermite interpolation: q from (q, qd), qd from (qd, qdd).
  GeneralizedState state_at(double t) const {
    if (samples.empty()) throw DynamicsError("empty trajectory");
    if (t <= samples.front().t) return {samples.front().q, samples.front().qd};
    if (t >= samples.back().t) return {samples.back().q, samples.back().qd};
    size_t hi = 1;
    while (samples[hi].t < t) ++hi;
    const TrajectorySample& a = samples[hi - 1];
    const TrajectorySample& b = samples[hi];
    const double h = b.t - a.t, s = (t - a.t) / h;
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s), h10 = s * (1 - s) * (1 - s);
    const double h01 = s * s * (3 - 2 * s), h11 = s * s * (s - 1);
    GeneralizedState out;
    out.q = h00 * a.q + h10 * h * a.qd + h01 * b.q + h11 * h * b.qd;
    out.qd = h00 * a.qd + h10 * h * a.qdd + h01 * b.qd + h11 * h * b.qdd;
    return out;
  }
};

struct SwitchEvent {
  double t;
  GeneralizedState state;
};

namespace detail {

inline double foot_z(const RobotModel& m, const VectorXd& q, Side foot) {
  return Kinematics(m, q).sole_position(foot).z();
}

// Bisection for the downward zero crossing of the swing-foot height
// within [t_lo, t_hi] of an interpolated trajectory segment.
inline std::optional<SwitchEvent> refine_crossing(const RobotModel& m, const Trajectory& traj,
                                                  Side swing, double t_lo, double t_hi) {
  double z_lo = foot_z(m, traj.state_at(t_lo).q, swing);
  for (int it = 0; it < 200; ++it) {
    const double t_mid = 0.5 * (t_lo + t_hi);
    GeneralizedState s = traj.state_at(t_mid);
    const double z = foot_z(m, s.q, swing);
    if (std::abs(z) < 1e-8 || (t_hi - t_lo) < 1e-15) {
      double zdot;
      swing_foot_height(m, s, swing, nullptr, &zdot);
      if (zdot < -1e-6) return SwitchEvent{t_mid, std::move(s)};
      return std::nullopt;  // grazing or upward contact
    }
    if ((z_lo >= 0) == (z >= 0)) {
      t_lo = t_mid;
      z_lo = z;
    } else {
      t_hi = t_mid;
    }
  }
  return std::nullopt;
}

}  // namespace detail

// Earliest touchdown of `swing` in the segment: the height crosses zero
// from above with a strictly negative rate.  Grazing and upward crossings
// are not events.
inline std::optional<SwitchEvent> detect_switch(const RobotModel& m, const Trajectory& traj,
                                                Side swing) {
  for (size_t i = 1; i < traj.samples.size(); ++i) {
    const double z0 = detail::foot_z(m, traj.samples[i - 1].q, swing);
    const double z1 = detail::foot_z(m, traj.samples[i].q, swing);
    if (z0 >= 0 && z1 < 0) {
      auto ev = detail::refine_crossing(m, traj, swing, traj.samples[i - 1].t, traj.samples[i].t);
      if (ev) return ev;
    }
  }
  return std::nullopt;
}

using ControlCallback = std::function<VectorXd(double t, const GeneralizedState&)>;

struct IntegrateOptions {
  double dt = 1e-3;
  double baumgarte_alpha = 10.0;
  // Controls are sampled once per step and held by default; continuous
  // mode re-evaluates the callback at the RK stages.
  bool continuous_control = false;
  // Touchdown detection of the swing foot; crossings are ignored until
  // the foot has risen above arm_height or arm_after seconds have passed.
  bool detect_touchdown = false;
  Side swing = Side::left;
  double arm_height = 0.0;
  double arm_after = 0.0;
};

struct PhaseResult {
  Trajectory trajectory;
  std::optional<SwitchEvent> event;
  GeneralizedState final_state;
};

namespace detail {

template <typename AccelFn>
GeneralizedState rk4_step(const AccelFn& accel, double t, const GeneralizedState& s, double h) {
  auto f = [&](double tt, const GeneralizedState& ss) {
    return std::pair<VectorXd, VectorXd>(ss.qd, accel(tt, ss));
  };
  auto [k1q, k1v] = f(t, s);
  auto [k2q, k2v] = f(t + h / 2, {s.q + h / 2 * k1q, s.qd + h / 2 * k1v});
  auto [k3q, k3v] = f(t + h / 2, {s.q + h / 2 * k2q, s.qd + h / 2 * k2v});
  auto [k4q, k4v] = f(t + h, {s.q + h * k3q, s.qd + h * k3v});
  GeneralizedState out;
  out.q = s.q + h / 6 * (k1q + 2 * k2q + 2 * k3q + k4q);
  out.qd = s.qd + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v);
  return out;
}

template <typename AccelFn>
PhaseResult integrate_generic(const RobotModel& m, const AccelFn& accel_of_u,
                              const GeneralizedState& s0, double t0, double t_end,
                              const ControlCallback& controller, const IntegrateOptions& opt) {
  PhaseResult out;
  GeneralizedState s = s0;
  double t = t0;
  bool armed = opt.arm_height <= 0 && opt.arm_after <= 0;

  auto push_sample = [&](double tt, const GeneralizedState& ss) {
    VectorXd u = controller(tt, ss);
    out.trajectory.samples.push_back({tt, ss.q, ss.qd, accel_of_u(tt, ss, u)});
  };
  push_sample(t, s);

  while (t < t_end - 1e-12) {
    const double h = std::min(opt.dt, t_end - t);
    GeneralizedState next;
    if (opt.continuous_control) {
      auto accel = [&](double tt, const GeneralizedState& ss) {
        return accel_of_u(tt, ss, controller(tt, ss));
      };
      next = rk4_step(accel, t, s, h);
    } else {
      const VectorXd u_hold = controller(t, s);
      auto accel = [&](double tt, const GeneralizedState& ss) { return accel_of_u(tt, ss, u_hold); };
      next = rk4_step(accel, t, s, h);
    }
    t += h;
    s = std::move(next);
    push_sample(t, s);

    if (opt.detect_touchdown) {
      const double z = foot_z(m, s.q, opt.swing);
      if (!armed && (z >= opt.arm_height || t - t0 >= opt.arm_after)) armed = true;
      if (armed) {
        const size_t i = out.trajectory.samples.size() - 1;
        const double z0 = foot_z(m, out.trajectory.samples[i - 1].q, opt.swing);
        if (z0 >= 0 && z < 0) {
          auto ev = refine_crossing(m, out.trajectory, opt.swing,
                                    out.trajectory.samples[i - 1].t, t);
          if (ev) {
            out.trajectory.samples.back() = {ev->t, ev->state.q, ev->state.qd,
                                             accel_of_u(ev->t, ev->state,
                                                        controller(ev->t, ev->state))};
            out.event = ev;
            out.final_state = ev->state;
            return out;
          }
        }
      }
    }
  }
  out.final_state = s;
  return out;
}

}  // namespace detail

// Integrates one support phase with fixed-step RK4, optionally stopping
// at the swing-foot touchdown.
inline PhaseResult integrate_phase(const RobotModel& m, Side support, const GeneralizedState& s0,
                                   double t0, double t_end, const ControlCallback& controller,
                                   const IntegrateOptions& opt = {}) {
  auto accel = [&](double, const GeneralizedState& ss, const VectorXd& u) {
    return constrained_acceleration(m, ss, u, support, opt.baumgarte_alpha).qdd;
  };
  return detail::integrate_generic(m, accel, s0, t0, t_end, controller, opt);
}

// Unconstrained (free-floating) integration, mainly for conservation and
// convergence checks.
inline PhaseResult integrate_free(const RobotModel& m, const GeneralizedState& s0, double t0,
                                  double t_end, const ControlCallback& controller,
                                  const IntegrateOptions& opt = {}) {
  auto accel = [&](double, const GeneralizedState& ss, const VectorXd& u) {
    Kinematics kin(m, ss.q);
    const MatrixXd M = mass_matrix(m, kin);
    const VectorXd c = bias_forces(m, kin, ss.qd);
    return VectorXd(M.llt().solve(m.input_map() * u - c));
  };
  return detail::integrate_generic(m, accel, s0, t0, t_end, controller, opt);
}

}  // namespace kpl
