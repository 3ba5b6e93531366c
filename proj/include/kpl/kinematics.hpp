#pragma once

#include <vector>

#include "kpl/model.hpp"

namespace kpl {

// Forward-kinematics cache for one configuration.  Link frames carry no
// rotation offsets: a child frame coincides with its joint, rotated about
// the joint axis by the joint angle.
class Kinematics {
 public:
  Kinematics(const RobotModel& model, const VectorXd& q) : m_(&model), q_(q) {
    const int nl = static_cast<int>(model.links.size());
    if (q.size() != model.nq()) throw ModelError("configuration dimension mismatch");
    R_.resize(nl);
    origin_.resize(nl);
    com_w_.resize(nl);
    axis_w_.resize(model.n());
    E_ = euler_rate_map(q[3], q[4], q[5]);

    R_[model.root_link] = base_rotation(q[3], q[4], q[5]);
    origin_[model.root_link] = q.head<3>();
    for (int ji = 0; ji < model.n(); ++ji) {
      const Joint& j = model.joints[ji];
      R_[j.child] = R_[j.parent] * axis_angle(j.axis, q[6 + ji]);
      origin_[j.child] = origin_[j.parent] + R_[j.parent] * j.origin;
      axis_w_[ji] = R_[j.child] * j.axis;
    }
    for (int li = 0; li < nl; ++li) com_w_[li] = origin_[li] + R_[li] * model.links[li].com;
  }

  const RobotModel& model() const { return *m_; }
  const VectorXd& q() const { return q_; }
  const Matrix3d& link_rotation(int li) const { return R_[li]; }
  const Vector3d& link_origin(int li) const { return origin_[li]; }
  const Vector3d& link_com(int li) const { return com_w_[li]; }
  const Vector3d& joint_axis_world(int ji) const { return axis_w_[ji]; }
  const Vector3d& joint_position_world(int ji) const { return origin_[m_->joints[ji].child]; }
  const Matrix3d& euler_map() const { return E_; }

  Vector3d point_world(int li, const Vector3d& local) const {
    return origin_[li] + R_[li] * local;
  }

  Matrix3d sole_rotation(Side s) const { return R_[m_->foot(s).link]; }
  Vector3d sole_position(Side s) const {
    const Foot& f = m_->foot(s);
    return point_world(f.link, f.offset);
  }

  // 3 x nq Jacobian of a point riding on link li.
  MatrixXd point_jacobian(int li, const Vector3d& p_world) const {
    MatrixXd J = MatrixXd::Zero(3, m_->nq());
    J.leftCols<3>().setIdentity();
    const Vector3d base_arm = p_world - origin_[m_->root_link];
    for (int k = 0; k < 3; ++k) J.col(3 + k) = E_.col(k).cross(base_arm);
    for (int ji = m_->links[li].parent_joint; ji >= 0;
         ji = m_->links[m_->joints[ji].parent].parent_joint)
      J.col(6 + ji) = axis_w_[ji].cross(p_world - joint_position_world(ji));
    return J;
  }

  // 3 x nq Jacobian of link li's angular velocity.
  MatrixXd angular_jacobian(int li) const {
    MatrixXd J = MatrixXd::Zero(3, m_->nq());
    J.block<3, 3>(0, 3) = E_;
    for (int ji = m_->links[li].parent_joint; ji >= 0;
         ji = m_->links[m_->joints[ji].parent].parent_joint)
      J.col(6 + ji) = axis_w_[ji];
    return J;
  }

  // 6 x nq frame Jacobian (linear rows then angular rows) of a frame
  // riding on link li at world position p.
  MatrixXd frame_jacobian(int li, const Vector3d& p_world) const {
    MatrixXd J(6, m_->nq());
    J.topRows<3>() = point_jacobian(li, p_world);
    J.bottomRows<3>() = angular_jacobian(li);
    return J;
  }

  Vector3d com_position() const {
    Vector3d c = Vector3d::Zero();
    for (size_t li = 0; li < m_->links.size(); ++li) c += m_->links[li].mass * com_w_[li];
    return c / m_->total_mass();
  }

  MatrixXd com_jacobian() const {
    MatrixXd J = MatrixXd::Zero(3, m_->nq());
    for (size_t li = 0; li < m_->links.size(); ++li)
      J += m_->links[li].mass * point_jacobian(static_cast<int>(li), com_w_[li]);
    return J / m_->total_mass();
  }

 private:
  const RobotModel* m_;
  VectorXd q_;
  std::vector<Matrix3d> R_;
  std::vector<Vector3d> origin_;
  std::vector<Vector3d> com_w_;
  std::vector<Vector3d> axis_w_;
  Matrix3d E_;
};

// World-frame velocities and accelerations of every link for given
// coordinate rates and accelerations.
struct BodyMotion {
  Vector3d omega, alpha;
  Vector3d v_origin, a_origin;
  Vector3d v_com, a_com;
};

inline std::vector<BodyMotion> propagate_motion(const Kinematics& kin, const VectorXd& qd,
                                                const VectorXd& qdd) {
  const RobotModel& m = kin.model();
  if (qd.size() != m.nq() || qdd.size() != m.nq())
    throw ModelError("velocity/acceleration dimension mismatch");
  std::vector<BodyMotion> out(m.links.size());

  const VectorXd& q = kin.q();
  const Matrix3d E = kin.euler_map();
  const Matrix3d Edot = euler_rate_map_dot(q[3], q[4], q[5], qd[3], qd[4], qd[5]);

  BodyMotion& root = out[m.root_link];
  root.omega = E * qd.segment<3>(3);
  root.alpha = E * qdd.segment<3>(3) + Edot * qd.segment<3>(3);
  root.v_origin = qd.head<3>();
  root.a_origin = qdd.head<3>();

  for (int ji = 0; ji < m.n(); ++ji) {
    const Joint& j = m.joints[ji];
    const BodyMotion& p = out[j.parent];
    BodyMotion& c = out[j.child];
    const Vector3d r = kin.link_origin(j.child) - kin.link_origin(j.parent);
    const Vector3d& a_w = kin.joint_axis_world(ji);
    c.v_origin = p.v_origin + p.omega.cross(r);
    c.a_origin = p.a_origin + p.alpha.cross(r) + p.omega.cross(p.omega.cross(r));
    c.omega = p.omega + a_w * qd[6 + ji];
    c.alpha = p.alpha + a_w * qdd[6 + ji] + p.omega.cross(a_w * qd[6 + ji]);
  }
  for (size_t li = 0; li < m.links.size(); ++li) {
    BodyMotion& b = out[li];
    const Vector3d r = kin.link_com(static_cast<int>(li)) - kin.link_origin(static_cast<int>(li));
    b.v_com = b.v_origin + b.omega.cross(r);
    b.a_com = b.a_origin + b.alpha.cross(r) + b.omega.cross(b.omega.cross(r));
  }
  return out;
}

// Velocity and acceleration of a point riding on a link.
inline void point_motion(const Kinematics& kin, const std::vector<BodyMotion>& mo, int li,
                         const Vector3d& p_world, Vector3d* v, Vector3d* a) {
  const BodyMotion& b = mo[li];
  const Vector3d r = p_world - kin.link_origin(li);
  if (v) *v = b.v_origin + b.omega.cross(r);
  if (a) *a = b.a_origin + b.alpha.cross(r) + b.omega.cross(b.omega.cross(r));
}

}  // namespace kpl
