#pragma once

#include <Eigen/Dense>
#include <cmath>

namespace kpl {

using Eigen::Matrix3d;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

constexpr double kPi = 3.14159265358979323846;

// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

inline Matrix3d skew(const Vector3d& v) {
  Matrix3d s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

inline Matrix3d rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Matrix3d r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

inline Matrix3d rot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Matrix3d r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

inline Matrix3d rot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Matrix3d r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

inline Matrix3d axis_angle(const Vector3d& axis, double a) {
  return Eigen::AngleAxisd(a, axis).toRotationMatrix();
}

// Base orientation angles are stored as [pitch, roll, yaw]; the world
// rotation composes yaw about world z, then pitch about the rotated y,
// then roll about the twice-rotated x (intrinsic Z-Y-X).
inline Matrix3d base_rotation(double pitch, double roll, double yaw) {
  return rot_z(yaw) * rot_y(pitch) * rot_x(roll);
}

// Maps [pitch_rate, roll_rate, yaw_rate] to the world angular velocity:
// omega = E(angles) * rates. Columns follow the storage order above.
inline Matrix3d euler_rate_map(double pitch, double roll, double yaw) {
  Matrix3d e;
  e.col(0) = rot_z(yaw) * Vector3d::UnitY();
  e.col(1) = rot_z(yaw) * rot_y(pitch) * Vector3d::UnitX();
  e.col(2) = Vector3d::UnitZ();
  return e;
}

// Time derivative of euler_rate_map along the given rates.
inline Matrix3d euler_rate_map_dot(double pitch, double roll, double yaw,
                                   double pitch_rate, double /*roll_rate*/,
                                   double yaw_rate) {
  const Vector3d zhat = Vector3d::UnitZ();
  const Vector3d c0 = rot_z(yaw) * Vector3d::UnitY();
  const Vector3d c1 = rot_z(yaw) * rot_y(pitch) * Vector3d::UnitX();
  Matrix3d e_dot = Matrix3d::Zero();
  e_dot.col(0) = yaw_rate * zhat.cross(c0);
  e_dot.col(1) = yaw_rate * zhat.cross(c1) + pitch_rate * c0.cross(c1);
  return e_dot;
}

// Rotation error as a rotation vector (log map), valid away from pi.
inline Vector3d rotation_log(const Matrix3d& r) {
  Eigen::AngleAxisd aa(r);
  return aa.angle() * aa.axis();
}

inline double yaw_of(const Matrix3d& r) { return std::atan2(r(1, 0), r(0, 0)); }

}  // namespace kpl
