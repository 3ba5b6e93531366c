#pragma once

#include "kpl/kinematics.hpp"

namespace kpl {

// Generalized forces that realize the given accelerations:
// tau = M(q) qdd + c(q, qd) with gravity included unless disabled.
inline VectorXd inverse_dynamics(const RobotModel& m, const Kinematics& kin, const VectorXd& qd,
                                 const VectorXd& qdd, bool with_gravity = true) {
  const auto motion = propagate_motion(kin, qd, qdd);
  VectorXd tau = VectorXd::Zero(m.nq());
  const Vector3d g = with_gravity ? m.gravity : Vector3d::Zero().eval();
  for (size_t li = 0; li < m.links.size(); ++li) {
    const Link& l = m.links[li];
    const Matrix3d iw = kin.link_rotation(static_cast<int>(li)) * l.inertia *
                        kin.link_rotation(static_cast<int>(li)).transpose();
    const Vector3d f = l.mass * (motion[li].a_com - g);
    const Vector3d n = iw * motion[li].alpha + motion[li].omega.cross(iw * motion[li].omega);
    tau += kin.point_jacobian(static_cast<int>(li), kin.link_com(static_cast<int>(li))).transpose() * f;
    tau += kin.angular_jacobian(static_cast<int>(li)).transpose() * n;
  }
  return tau;
}

inline VectorXd inverse_dynamics(const RobotModel& m, const VectorXd& q, const VectorXd& qd,
                                 const VectorXd& qdd, bool with_gravity = true) {
  return inverse_dynamics(m, Kinematics(m, q), qd, qdd, with_gravity);
}

inline MatrixXd mass_matrix(const RobotModel& m, const Kinematics& kin) {
  MatrixXd M = MatrixXd::Zero(m.nq(), m.nq());
  for (size_t li = 0; li < m.links.size(); ++li) {
    const Link& l = m.links[li];
    const Matrix3d iw = kin.link_rotation(static_cast<int>(li)) * l.inertia *
                        kin.link_rotation(static_cast<int>(li)).transpose();
    const MatrixXd jc = kin.point_jacobian(static_cast<int>(li), kin.link_com(static_cast<int>(li)));
    const MatrixXd jw = kin.angular_jacobian(static_cast<int>(li));
    M.noalias() += l.mass * jc.transpose() * jc;
    M.noalias() += jw.transpose() * iw * jw;
  }
  return M;
}

inline MatrixXd mass_matrix(const RobotModel& m, const VectorXd& q) {
  return mass_matrix(m, Kinematics(m, q));
}

// Coriolis, centrifugal, and gravity forces.
inline VectorXd bias_forces(const RobotModel& m, const Kinematics& kin, const VectorXd& qd) {
  return inverse_dynamics(m, kin, qd, VectorXd::Zero(m.nq()), true);
}

inline VectorXd bias_forces(const RobotModel& m, const VectorXd& q, const VectorXd& qd) {
  return bias_forces(m, Kinematics(m, q), qd);
}

inline double kinetic_energy(const RobotModel& m, const Kinematics& kin, const VectorXd& qd) {
  return 0.5 * qd.dot(mass_matrix(m, kin) * qd);
}

inline double potential_energy(const RobotModel& m, const Kinematics& kin) {
  double pe = 0;
  for (size_t li = 0; li < m.links.size(); ++li)
    pe -= m.links[li].mass * m.gravity.dot(kin.link_com(static_cast<int>(li)));
  return pe;
}

}  // namespace kpl
