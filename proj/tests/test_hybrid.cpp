#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "kpl/hybrid.hpp"

using namespace kpl;
using namespace test;

namespace {

// Minimal planar mechanism for the hand-built impulse oracle: a floating
// body with one pitch joint to a shank that carries the landing foot.
const char* kToyModel = R"(
model toy_planar
gravity 0 0 -9.81

links {
  body  { root mass 1.1 com 0 0 0 inertia 4e-3 5e-3 3e-3 0 0 0 }
  shank { mass 0.4 com 0.01 0 -0.09 inertia 1.6e-3 1.7e-3 4e-4 0 0 0 }
}

joints {
  knee { parent body child shank origin 0.02 0 -0.05 axis 0 1 0 limits -3 3 vel_limit 30 }
}

feet {
  left  { link shank offset 0.015 0 -0.21 contact point }
  right { link body offset 0 0 0.05 contact point }
}
)";

Eigen::Vector2d planar(const Vector3d& v) { return {v.x(), v.z()}; }
Eigen::Vector2d cross_y(double w, const Eigen::Vector2d& r) { return {w * r.y(), -w * r.x()}; }
double moment_y(const Eigen::Vector2d& r, const Eigen::Vector2d& f) {
  return r.y() * f.x() - r.x() * f.y();
}

VectorXd shift_onto_ground(const RobotModel& m, VectorXd q, Side foot) {
  q[2] -= Kinematics(m, q).sole_position(foot).z();
  return q;
}

struct Momentum {
  Vector3d linear;
  Vector3d angular;  // about the given point
};

Momentum system_momentum(const RobotModel& m, const VectorXd& q, const VectorXd& qd,
                         const Vector3d& about) {
  Kinematics kin(m, q);
  auto mo = propagate_motion(kin, qd, VectorXd::Zero(m.nq()));
  Momentum out{Vector3d::Zero(), Vector3d::Zero()};
  for (size_t li = 0; li < m.links.size(); ++li) {
    const Link& ln = m.links[li];
    const Matrix3d iw = kin.link_rotation(li) * ln.inertia * kin.link_rotation(li).transpose();
    out.linear += ln.mass * mo[li].v_com;
    out.angular += (kin.link_com(li) - about).cross(ln.mass * mo[li].v_com) + iw * mo[li].omega;
  }
  return out;
}

}  // namespace

TEST_CASE("planar impulse-momentum oracle matches the impact map") {
  RobotModel m = parse_model(kToyModel);
  const double m1 = 1.1, m2 = 0.4, i1 = 5e-3, i2 = 1.7e-3;
  const Vector3d joint_off(0.02, 0, -0.05), com2_off(0.01, 0, -0.09), foot_off(0.015, 0, -0.21);

  struct Case {
    double pitch, knee, px, vx, vz, pitch_rate, knee_rate;
  };
  for (const Case& c : {Case{0.3, -0.65, 0.1, 0.7, -1.1, 0.4, -1.3},
                        Case{-0.2, 0.9, -0.3, 0.25, -0.6, -1.1, 0.8},
                        Case{0.05, 0.4, 0.0, 1.3, -0.4, 0.0, 2.0}}) {
    VectorXd q = VectorXd::Zero(m.nq());
    q[0] = c.px;
    q[3] = c.pitch;
    q[6] = c.knee;
    q = shift_onto_ground(m, q, Side::left);
    VectorXd qd = VectorXd::Zero(m.nq());
    qd[0] = c.vx;
    qd[2] = c.vz;
    qd[3] = c.pitch_rate;
    qd[6] = c.knee_rate;

    // Geometry in the sagittal plane, body com at the base origin.
    const Eigen::Vector2d r1(q[0], q[2]);
    const Eigen::Vector2d rj = r1 + planar(rot_y(c.pitch) * joint_off);
    const Eigen::Vector2d r2 = rj + planar(rot_y(c.pitch + c.knee) * com2_off);
    const Eigen::Vector2d rc = rj + planar(rot_y(c.pitch + c.knee) * foot_off);
    REQUIRE(std::abs(Kinematics(m, q).sole_position(Side::left).x() - rc.x()) < 1e-12);

    const Eigen::Vector2d v1(c.vx, c.vz);
    const double w1 = c.pitch_rate, w2 = c.pitch_rate + c.knee_rate;
    const Eigen::Vector2d v2 = v1 + cross_y(w1, rj - r1) + cross_y(w2, r2 - rj);

    // Unknowns: v1(2) w1 v2(2) w2 P(2) F(2); per-body momentum and moment
    // balance, contact pinned, joint point velocities matched.
    MatrixXd a = MatrixXd::Zero(10, 10);
    VectorXd b = VectorXd::Zero(10);
    a(0, 0) = m1, a(0, 6) = 1, b[0] = m1 * v1.x();
    a(1, 1) = m1, a(1, 7) = 1, b[1] = m1 * v1.y();
    a(2, 2) = i1, a(2, 6) = (rj - r1).y(), a(2, 7) = -(rj - r1).x(), b[2] = i1 * w1;
    a(3, 3) = m2, a(3, 6) = -1, a(3, 8) = -1, b[3] = m2 * v2.x();
    a(4, 4) = m2, a(4, 7) = -1, a(4, 9) = -1, b[4] = m2 * v2.y();
    a(5, 5) = i2;
    a(5, 6) = -(rj - r2).y(), a(5, 7) = (rj - r2).x();
    a(5, 8) = -(rc - r2).y(), a(5, 9) = (rc - r2).x();
    b[5] = i2 * w2;
    a(6, 3) = 1, a(6, 5) = (rc - r2).y();
    a(7, 4) = 1, a(7, 5) = -(rc - r2).x();
    a(8, 0) = 1, a(8, 2) = (rj - r1).y(), a(8, 3) = -1, a(8, 5) = -(rj - r2).y();
    a(9, 1) = 1, a(9, 2) = -(rj - r1).x(), a(9, 4) = -1, a(9, 5) = (rj - r2).x();
    const VectorXd sol = a.partialPivLu().solve(b);

    const ImpactResult im = impact_map(m, {q, qd}, Side::left);
    CHECK(std::abs(im.qd_plus[0] - sol[0]) < 1e-10);
    CHECK(std::abs(im.qd_plus[2] - sol[1]) < 1e-10);
    CHECK(std::abs(im.qd_plus[3] - sol[2]) < 1e-10);
    CHECK(std::abs(im.qd_plus[6] - (sol[5] - sol[2])) < 1e-10);
    CHECK(std::abs(im.qd_plus[1]) < 1e-10);
    CHECK(std::abs(im.qd_plus[4]) < 1e-10);
    CHECK(std::abs(im.qd_plus[5]) < 1e-10);
    REQUIRE(im.impulse.size() == 3);
    CHECK(std::abs(im.impulse[0] - sol[8]) < 1e-10);
    CHECK(std::abs(im.impulse[2] - sol[9]) < 1e-10);
    CHECK(std::abs(im.impulse[1]) < 1e-10);
  }
}

TEST_CASE("impact conserves angular momentum about a point contact") {
  RobotModel m = biped5();
  std::mt19937_64 rng(71);
  for (int trial = 0; trial < 6; ++trial) {
    VectorXd q = shift_onto_ground(m, random_q(m, rng), Side::left);
    VectorXd qd = random_qd(m, rng);
    const ImpactResult im = impact_map(m, {q, qd}, Side::left);
    const Vector3d rc = Kinematics(m, q).sole_position(Side::left);
    const Momentum before = system_momentum(m, q, qd, rc);
    const Momentum after = system_momentum(m, q, im.qd_plus, rc);
    const double scale = std::max(1.0, before.angular.norm());
    CHECK((after.angular - before.angular).norm() < 1e-9 * scale);
    CHECK((after.linear - before.linear - im.impulse).norm() < 1e-9);
  }
}

TEST_CASE("impact satisfies momentum balance and rest constraints") {
  std::mt19937_64 rng(72);
  for (const RobotModel& m : {biped5(), biped12()}) {
    for (int trial = 0; trial < 5; ++trial) {
      const Side landing = trial % 2 ? Side::left : Side::right;
      VectorXd q = shift_onto_ground(m, random_q(m, rng), landing);
      VectorXd qd = random_qd(m, rng);
      Kinematics kin(m, q);
      const MatrixXd mm = mass_matrix(m, kin);
      const MatrixXd j = contact_jacobian(kin, landing);

      const ImpactResult im = impact_map(m, {q, qd}, landing);
      CHECK((j * im.qd_plus).norm() < 1e-9);
      CHECK((mm * (im.qd_plus - qd) - j.transpose() * im.impulse).norm() < 1e-9);
      CHECK(kinetic_energy(m, kin, im.qd_plus) <= kinetic_energy(m, kin, qd) + 1e-12);

      const MatrixXd r = impact_velocity_map(m, q, landing);
      CHECK((r * qd - im.qd_plus).norm() < 1e-10);

      if (m.foot(landing).contact == ContactType::flat) {
        const Vector3d rc = kin.sole_position(landing);
        const Momentum before = system_momentum(m, q, qd, rc);
        const Momentum after = system_momentum(m, q, im.qd_plus, rc);
        CHECK((after.linear - before.linear - im.impulse.head<3>()).norm() < 1e-9);
        CHECK((after.angular - before.angular - im.impulse.tail<3>()).norm() < 1e-9);
      }
    }
  }
}

TEST_CASE("impact map rejects a landing foot off the ground") {
  RobotModel m = biped5();
  VectorXd q = VectorXd::Zero(m.nq());
  q[2] = 0.4;
  CHECK_THROWS_AS(impact_map(m, {q, VectorXd::Zero(m.nq())}, Side::left), DynamicsError);
  CHECK_NOTHROW(impact_map(m, {q, VectorXd::Zero(m.nq())}, Side::left, false));
}

TEST_CASE("support-constrained flow satisfies its defining equations") {
  std::mt19937_64 rng(73);
  const double alpha = 10.0;
  for (const RobotModel& m : {biped5(), biped12()}) {
    std::uniform_real_distribution<double> uu(-2.0, 2.0);
    for (int trial = 0; trial < 4; ++trial) {
      const Side support = trial % 2 ? Side::left : Side::right;
      VectorXd q = shift_onto_ground(m, random_q(m, rng), support);
      VectorXd qd = random_qd(m, rng, 0.6);
      VectorXd u(m.n());
      for (int i = 0; i < m.n(); ++i) u[i] = uu(rng);

      Kinematics kin(m, q);
      const MatrixXd mm = mass_matrix(m, kin);
      const VectorXd c = bias_forces(m, kin, qd);
      const MatrixXd j = contact_jacobian(kin, support);
      const VectorXd jdqd = contact_bias(kin, support, qd);

      // The constraint-rate term against a finite difference of J along qd.
      auto jac_of = [&](const VectorXd& qq) {
        return MatrixXd(contact_jacobian(Kinematics(m, qq), support));
      };
      const double h = 1e-6;
      const MatrixXd jdot_fd = (jac_of(q + h * qd) - jac_of(q - h * qd)) / (2 * h);
      CHECK((jdot_fd * qd - jdqd).norm() < 1e-5);

      const ConstrainedAccel ca = constrained_acceleration(m, {q, qd}, u, support, alpha);
      CHECK((mm * ca.qdd + c - m.input_map() * u - j.transpose() * ca.contact_force).norm() < 1e-8);
      CHECK((j * ca.qdd + jdqd + 2 * alpha * (j * qd)).norm() < 1e-8);

      // The support-eliminated form reproduces the exact-constraint flow.
      const ConstrainedAccel ca0 = constrained_acceleration(m, {q, qd}, u, support, 0.0);
      const ReducedDynamics rd = reduced_dynamics(m, kin, qd, support);
      CHECK((mm * ca0.qdd + rd.cbar - rd.Bbar * u).norm() < 1e-8);
    }
  }
}

TEST_CASE("ballistic touchdown is located to microsecond accuracy") {
  RobotModel m = biped5();
  const double h0 = 0.13, g = 9.81;
  VectorXd q = VectorXd::Zero(m.nq());
  q[2] = 0.35 + h0;
  const GeneralizedState s0{q, VectorXd::Zero(m.nq())};
  auto no_input = [&](double, const GeneralizedState&) { return VectorXd::Zero(m.n()); };
  const double t_star = std::sqrt(2 * h0 / g);

  PhaseResult free_run = integrate_free(m, s0, 0.0, 0.25, no_input);
  auto ev = detect_switch(m, free_run.trajectory, Side::left);
  REQUIRE(ev.has_value());
  CHECK(std::abs(ev->t - t_star) < 1e-6);
  double z, zdot;
  swing_foot_height(m, ev->state, Side::left, &z, &zdot);
  CHECK(std::abs(z) < 1e-8);
  CHECK(std::abs(zdot + g * t_star) < 1e-6);

  IntegrateOptions opt;
  opt.detect_touchdown = true;
  opt.swing = Side::left;
  PhaseResult stopped = integrate_free(m, s0, 0.0, 0.25, no_input, opt);
  REQUIRE(stopped.event.has_value());
  CHECK(std::abs(stopped.event->t - t_star) < 1e-6);
  CHECK(stopped.trajectory.samples.back().t == Catch::Approx(stopped.event->t));

  // Arming suppresses an immediate scuff crossing.
  VectorXd q_low = shift_onto_ground(m, VectorXd::Zero(m.nq()), Side::left);
  q_low[2] += 1e-4;
  VectorXd qd_down = VectorXd::Zero(m.nq());
  qd_down[2] = -0.05;
  PhaseResult scuff = integrate_free(m, {q_low, qd_down}, 0.0, 0.3, no_input, opt);
  REQUIRE(scuff.event.has_value());
  CHECK(scuff.event->t < 0.01);
  IntegrateOptions guarded = opt;
  guarded.arm_height = 10.0;
  guarded.arm_after = 1.0;
  PhaseResult held = integrate_free(m, {q_low, qd_down}, 0.0, 0.3, no_input, guarded);
  CHECK(!held.event.has_value());

  // A foot tossed above arm_height arms the guard and lands normally.
  VectorXd qd_up = VectorXd::Zero(m.nq());
  qd_up[2] = 0.8;
  IntegrateOptions by_height = opt;
  by_height.arm_height = 0.02;
  by_height.arm_after = 1.0;
  PhaseResult toss = integrate_free(m, {q_low, qd_up}, 0.0, 0.4, no_input, by_height);
  REQUIRE(toss.event.has_value());
  CHECK(toss.event->t > 0.1);
}

TEST_CASE("free flight conserves energy") {
  RobotModel m = biped5();
  std::mt19937_64 rng(74);
  VectorXd q = random_q(m, rng);
  q[2] = 2.0;
  const GeneralizedState s0{q, random_qd(m, rng, 0.5)};
  auto no_input = [&](double, const GeneralizedState&) { return VectorXd::Zero(m.n()); };
  auto energy = [&](const GeneralizedState& s) {
    Kinematics kin(m, s.q);
    return kinetic_energy(m, kin, s.qd) + potential_energy(m, kin);
  };
  PhaseResult run = integrate_free(m, s0, 0.0, 0.3, no_input);
  CHECK(std::abs(energy(run.final_state) - energy(s0)) < 1e-8);
}

TEST_CASE("integration error contracts at fourth order") {
  RobotModel m = biped5();
  VectorXd q = VectorXd::Zero(m.nq());
  q[6] = -0.25;
  q[7] = 0.5;
  q[8] = -0.1;
  q[9] = 0.3;
  const VectorXd q_on = shift_onto_ground(m, q, Side::left);
  VectorXd qd = VectorXd::Zero(m.nq());
  qd[6] = 0.2;
  qd[7] = -0.1;
  const GeneralizedState s0{q_on, qd};

  auto controller = [&](double t, const GeneralizedState&) {
    VectorXd u(m.n());
    for (int i = 0; i < m.n(); ++i) u[i] = 0.08 * std::sin(5 * t + 0.7 * i);
    return u;
  };
  auto run = [&](double dt) {
    IntegrateOptions opt;
    opt.dt = dt;
    opt.continuous_control = true;
    return integrate_phase(m, Side::left, s0, 0.0, 0.2, controller, opt).final_state;
  };
  const GeneralizedState ref = run(5e-4);
  const double e_coarse = (run(8e-3).q - ref.q).norm();
  const double e_fine = (run(4e-3).q - ref.q).norm();
  REQUIRE(e_fine > 0);
  const double ratio = e_coarse / e_fine;
  CHECK(ratio > 12.0);
  CHECK(ratio < 20.0);
}
