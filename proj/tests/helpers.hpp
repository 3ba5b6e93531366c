#pragma once

#include <random>
#include <string>

#include "kpl/kinematics.hpp"
#include "kpl/model.hpp"

namespace test {

inline std::string data_path(const std::string& f) { return std::string(KPL_DATA_DIR) + "/" + f; }

inline kpl::RobotModel biped5() { return kpl::load_model(data_path("biped5.model")); }
inline kpl::RobotModel biped12() { return kpl::load_model(data_path("biped12.model")); }

// Random configuration with modest base tilt and joints inside limits.
inline kpl::VectorXd random_q(const kpl::RobotModel& m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  kpl::VectorXd q(m.nq());
  for (int i = 0; i < 3; ++i) q[i] = 0.4 * u(rng);
  q[3] = 0.3 * u(rng);
  q[4] = 0.3 * u(rng);
  q[5] = 1.5 * u(rng);
  for (int j = 0; j < m.n(); ++j) {
    const auto& jt = m.joints[j];
    const double lo = std::max(jt.lower, -2.0), hi = std::min(jt.upper, 2.0);
    q[6 + j] = lo + (hi - lo) * (0.5 + 0.45 * u(rng));
  }
  return q;
}

inline kpl::VectorXd random_qd(const kpl::RobotModel& m, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  kpl::VectorXd qd(m.nq());
  for (int i = 0; i < qd.size(); ++i) qd[i] = scale * u(rng);
  return qd;
}

// Central finite difference of f: R^n -> R^m with respect to x.
template <typename F>
kpl::MatrixXd fd_jacobian(F&& f, const kpl::VectorXd& x, double h = 1e-6) {
  const kpl::VectorXd f0 = f(x);
  kpl::MatrixXd J(f0.size(), x.size());
  for (int i = 0; i < x.size(); ++i) {
    kpl::VectorXd xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    J.col(i) = (f(xp) - f(xm)) / (2 * h);
  }
  return J;
}

}  // namespace test
