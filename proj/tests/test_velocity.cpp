#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "helpers.hpp"
#include "kpl/velocity.hpp"

using namespace kpl;
using namespace test;

namespace {

KeyframePosture straight_step_biped5(const RobotModel& m) {
  const KeyframePosture nominal = nominal_stance(m);
  return solve_keyframe_ik(m, {0, 0, 0, 0}, Side::right, {0.08, 0, 0, 0.4}, nominal.q);
}

// Exact Euclidean projection onto at most two halfspaces by trying every
// candidate active set.
VectorXd project_halfspaces(const MatrixXd& g, const VectorXd& h, const VectorXd& y0) {
  const int m = static_cast<int>(g.rows());
  VectorXd best;
  double best_d = std::numeric_limits<double>::infinity();
  for (int mask = 0; mask < (1 << m); ++mask) {
    std::vector<int> act;
    for (int i = 0; i < m; ++i)
      if (mask & (1 << i)) act.push_back(i);
    VectorXd cand = y0;
    bool ok = true;
    if (!act.empty()) {
      MatrixXd gs(act.size(), g.cols());
      VectorXd hs(act.size());
      for (size_t k = 0; k < act.size(); ++k) {
        gs.row(static_cast<int>(k)) = g.row(act[k]);
        hs[static_cast<int>(k)] = h[act[k]];
      }
      Eigen::FullPivLU<MatrixXd> lu(gs * gs.transpose());
      if (!lu.isInvertible()) continue;
      const VectorXd nu = lu.solve(gs * y0 - hs);
      ok = (nu.array() >= -1e-10).all();
      cand = y0 - gs.transpose() * nu;
    }
    for (int i = 0; i < m && ok; ++i) ok = g.row(i).dot(cand) <= h[i] + 1e-10;
    if (!ok) continue;
    const double d = (cand - y0).norm();
    if (d < best_d) {
      best_d = d;
      best = cand;
    }
  }
  REQUIRE(best.size() == y0.size());
  return best;
}

}  // namespace

TEST_CASE("average step velocity is the planar displacement over the interval") {
  const Vector3d a = average_step_velocity({0, 0, 0, 0}, {0.2, 0, 0, 0.5});
  CHECK((a - Vector3d(0.4, 0, 0)).norm() < 1e-15);
  const Vector3d b = average_step_velocity({0.1, -0.2, 0.7, 2.0}, {0.1, -0.2, 0.7, 3.0});
  CHECK(b.norm() < 1e-15);
  const Vector3d c = average_step_velocity({0, 0, 0, 0}, {0, 0, 0.3, 0.6});
  CHECK(c.z() == Catch::Approx(0.5).margin(1e-12));
  CHECK_THROWS_AS(average_step_velocity({0, 0, 0, 1.0}, {0.1, 0, 0, 1.0}), VelocityError);
}

TEST_CASE("the reduction reproduces the two-sided cost and contact rows") {
  RobotModel m = biped12();
  const KeyframePosture nominal = nominal_stance(m);
  const KeyframePosture kp =
      solve_keyframe_ik(m, {0, 0, 0, 0}, Side::right, {0.12, 0.14, 0.1, 0.6}, nominal.q);
  const Vector3d v_avg(0.2, 0.1, 0.05);
  VelocityOptions opt;
  opt.q_weight.diagonal() << 1.0, 2.0, 0.5;
  opt.p_weight.diagonal() << 0.7, 0.7, 1.3;
  const VelocityQp qp = reduce_to_qp(m, kp, v_avg, opt);

  Kinematics kin(m, kp.q);
  const MatrixXd j2 = contact_jacobian(kin, kp.trailing());
  const MatrixXd j1 = contact_jacobian(kin, kp.leading);

  CHECK((qp.a_eq.topRows(j2.rows()) - j2).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((qp.a_eq.bottomRows(j1.rows()) - j1 * qp.r).cwiseAbs().maxCoeff() < 1e-14);
  // The post-impact rows vanish: the impact itself makes the landing
  // sole static, so the condition costs no freedom.
  CHECK(qp.a_eq.bottomRows(j1.rows()).cwiseAbs().maxCoeff() < 1e-9);

  std::mt19937_64 rng(7);
  std::normal_distribution<double> dist(0.0, 0.8);
  for (int trial = 0; trial < 10; ++trial) {
    VectorXd x(m.nq());
    for (int i = 0; i < x.size(); ++i) x[i] = dist(rng);
    const Vector3d pre = qp.s * x - v_avg;
    const Vector3d post = qp.s * (qp.r * x) - v_avg;
    const double direct = pre.dot(opt.q_weight * pre) + post.dot(opt.p_weight * post);
    CHECK(qp.cost(x, v_avg) == Catch::Approx(direct).margin(1e-10 * (1 + std::abs(direct))));
    CHECK(((qp.a_eq * x).head(j2.rows()) - j2 * x).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(((qp.a_eq * x).tail(j1.rows()) - j1 * (qp.r * x)).cwiseAbs().maxCoeff() < 1e-11);
  }
}

TEST_CASE("equality rank equals the stance constraint count") {
  auto svd_rank = [](const MatrixXd& a) {
    Eigen::JacobiSVD<MatrixXd> svd(a);
    const VectorXd s = svd.singularValues();
    int r = 0;
    for (int i = 0; i < s.size(); ++i)
      if (s[i] > 1e-10 * s[0]) ++r;
    return r;
  };

  RobotModel m5 = biped5();
  const VelocityQp qp5 = reduce_to_qp(m5, straight_step_biped5(m5), {0.2, 0, 0});
  CHECK(qp5.eq_rank == 3);
  CHECK(qp5.eq_rank == svd_rank(qp5.a_eq));

  RobotModel m12 = biped12();
  const KeyframePosture nominal = nominal_stance(m12);
  const KeyframePosture kp =
      solve_keyframe_ik(m12, {0, 0, 0, 0}, Side::right, {0.12, 0.14, 0.1, 0.6}, nominal.q);
  const VelocityQp qp12 = reduce_to_qp(m12, kp, {0.2, 0.1, 0.05});
  CHECK(qp12.eq_rank == 6);
  CHECK(qp12.eq_rank == svd_rank(qp12.a_eq));
  CHECK(qp12.eq_rank <= 12);
}

TEST_CASE("a rest target with relaxed margins admits the zero velocity") {
  RobotModel m = biped5();
  VelocityOptions relaxed;
  relaxed.v_min = 0;
  relaxed.eps_fwd = 0;
  const KeyframeVelocities kv =
      assign_velocities(m, straight_step_biped5(m), Vector3d::Zero(), relaxed);
  CHECK(kv.qd_minus.cwiseAbs().maxCoeff() < 1e-12);
  CHECK(kv.qd_plus.cwiseAbs().maxCoeff() < 1e-12);
  CHECK(kv.impulse.cwiseAbs().maxCoeff() < 1e-12);

  // The default margins exclude the rest state: the swing foot has to
  // arrive with downward speed even for a zero average velocity.
  const KeyframeVelocities moving = assign_velocities(m, straight_step_biped5(m), Vector3d::Zero());
  CHECK(moving.qd_minus.cwiseAbs().maxCoeff() > 1e-3);
}

namespace {

void audit_kkt(const VelocityQp& qp, const VelocityQpSolution& sol, const Vector3d& v_avg) {
  const VectorXd g = qp.g_map * v_avg;
  const VectorXd stat = qp.h * sol.x + g + qp.a_eq.transpose() * sol.lambda +
                        qp.a_in.transpose() * sol.mu;
  CHECK(stat.cwiseAbs().maxCoeff() < 1e-8);
  CHECK((qp.a_eq * sol.x).cwiseAbs().maxCoeff() < 1e-9);
  for (int i = 0; i < qp.a_in.rows(); ++i) {
    const double slack = qp.a_in.row(i).dot(sol.x) - qp.b_in[i];
    CHECK(slack < 1e-9);
    CHECK(sol.mu[i] >= 0);
    CHECK(std::abs(sol.mu[i] * slack) < 1e-8);
  }
}

// Accelerated projected-gradient solves from random feasible starts.
// Checks that no feasible sample beats the solver and returns the best
// cost the oracle reaches.
double oracle_best_cost(const VelocityQp& qp, const Vector3d& v_avg, double solver_cost,
                        int starts, int iters) {
  const VectorXd g = qp.g_map * v_avg;
  Eigen::ColPivHouseholderQR<MatrixXd> qr(qp.a_eq.transpose());
  const MatrixXd z = MatrixXd(qr.householderQ()).rightCols(qp.h.cols() - qr.rank());
  const MatrixXd hr = z.transpose() * qp.h * z;
  const VectorXd gr = z.transpose() * g;
  const MatrixXd gz = qp.a_in * z;
  const double lip = Eigen::SelfAdjointEigenSolver<MatrixXd>(hr).eigenvalues().maxCoeff();
  REQUIRE(lip > 1e-12);

  std::mt19937_64 rng(11);
  std::normal_distribution<double> dist(0.0, 0.5);
  double best = std::numeric_limits<double>::infinity();
  for (int start = 0; start < starts; ++start) {
    VectorXd y(z.cols());
    for (int i = 0; i < y.size(); ++i) y[i] = dist(rng);
    y = project_halfspaces(gz, qp.b_in, y);
    CHECK(qp.cost(z * y, v_avg) >= solver_cost - 1e-9);
    VectorXd w = y, y_prev = y;
    double t = 1;
    for (int it = 0; it < iters; ++it) {
      y = project_halfspaces(gz, qp.b_in, w - (hr * w + gr) / lip);
      const double t_next = 0.5 * (1 + std::sqrt(1 + 4 * t * t));
      w = y + ((t - 1) / t_next) * (y - y_prev);
      y_prev = y;
      t = t_next;
    }
    best = std::min(best, qp.cost(z * y, v_avg));
  }
  return best;
}

}  // namespace

TEST_CASE("assignment satisfies first-order optimality against an oracle") {
  RobotModel m = biped5();
  const KeyframePosture kp = straight_step_biped5(m);
  const Vector3d v_avg = average_step_velocity({0, 0, 0, 0}, {0.08, 0, 0, 0.4});

  SECTION("default margins leave both conditions slack") {
    const VelocityQp qp = reduce_to_qp(m, kp, v_avg);
    const VelocityQpSolution sol = solve_velocity_qp(qp, v_avg);
    audit_kkt(qp, sol, v_avg);
    CHECK(sol.active.empty());
    const double solver_cost = qp.cost(sol.x, v_avg);
    const double oracle = oracle_best_cost(qp, v_avg, solver_cost, 100, 3000);
    CHECK(solver_cost <= oracle + 1e-9);
    CHECK(oracle < 1e-4);  // both reach the interior minimum, cost ~0
  }

  SECTION("a forward margin above the commanded speed binds") {
    // Joint velocities are cost-free, so the descent margin can never
    // conflict with the objective; the forward-progress margin can,
    // because it pushes the post-impact base speed off its target.
    VelocityOptions opt;
    opt.eps_fwd = 0.5;
    const VelocityQp qp = reduce_to_qp(m, kp, v_avg, opt);
    const VelocityQpSolution sol = solve_velocity_qp(qp, v_avg);
    audit_kkt(qp, sol, v_avg);
    REQUIRE(sol.active == std::vector<int>{1});
    CHECK(sol.mu[1] > 1e-6);
    CHECK(sol.x[0] == Catch::Approx(0.2).margin(1e-6));  // pre-impact stays on target
    const double solver_cost = qp.cost(sol.x, v_avg);
    CHECK(solver_cost == Catch::Approx(0.09).margin(1e-6));  // (0.5 - 0.2)^2
    const double oracle = oracle_best_cost(qp, v_avg, solver_cost, 100, 10000);
    CHECK(solver_cost <= oracle + 1e-9);
    CHECK(std::abs(solver_cost - oracle) <= 0.02 * std::abs(oracle));
  }
}

TEST_CASE("scaling both weights by a common factor keeps the argmin") {
  RobotModel m = biped5();
  const KeyframePosture kp = straight_step_biped5(m);
  const Vector3d v_avg(0.2, 0, 0);
  VelocityOptions scaled;
  scaled.q_weight *= 7.3;
  scaled.p_weight *= 7.3;
  const KeyframeVelocities a = assign_velocities(m, kp, v_avg);
  const KeyframeVelocities b = assign_velocities(m, kp, v_avg, scaled);
  CHECK((a.qd_minus - b.qd_minus).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("assigned velocities are impact-consistent across postures") {
  RobotModel m = biped12();
  const KeyframePosture nominal = nominal_stance(m);
  const KeyframePosture kps[2] = {
      solve_keyframe_ik(m, {0, 0, 0, 0}, Side::right, {0.12, 0.14, 0.1, 0.6}, nominal.q),
      solve_keyframe_ik(m, {0, 0, 0, 0}, Side::left, {0.10, -0.12, -0.05, 0.6}, nominal.q)};

  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (const KeyframePosture& kp : kps) {
    Kinematics kin(m, kp.q);
    const MatrixXd j2 = contact_jacobian(kin, kp.trailing());
    const MatrixXd j1 = contact_jacobian(kin, kp.leading);
    for (int trial = 0; trial < 5; ++trial) {
      Vector3d v_avg(0.1 + 0.2 * std::abs(u(rng)), u(rng), u(rng));
      const KeyframeVelocities kv = assign_velocities(m, kp, v_avg);

      const ImpactResult imp = impact_map(m, {kp.q, kv.qd_minus}, kp.leading);
      CHECK((imp.qd_plus - kv.qd_plus).cwiseAbs().maxCoeff() < 1e-9);
      CHECK((kv.impulse.head(imp.impulse.size()) - imp.impulse).cwiseAbs().maxCoeff() < 1e-9);

      CHECK((j2 * kv.qd_minus).cwiseAbs().maxCoeff() < 1e-9);
      CHECK((j1 * kv.qd_plus).cwiseAbs().maxCoeff() < 1e-9);
      CHECK(j1.row(2).dot(kv.qd_minus) <= -0.05 + 1e-9);
      const Eigen::Vector2d dir = v_avg.head<2>().normalized();
      CHECK(dir.x() * kv.qd_plus[0] + dir.y() * kv.qd_plus[1] >= 0.01 - 1e-9);
    }
  }
}

TEST_CASE("a pure turn drops the undefined travel direction condition") {
  RobotModel m = biped12();
  const KeyframePosture nominal = nominal_stance(m);
  const KeyframePosture kp =
      solve_keyframe_ik(m, {0, 0, 0, 0}, Side::right, {0.0, 0.14, 0.2, 0.6}, nominal.q);
  const Vector3d v_avg(0, 0, 0.4);
  const VelocityQp qp = reduce_to_qp(m, kp, v_avg);
  REQUIRE(qp.ineq_names.size() == 1);
  CHECK(qp.a_in.rows() == 1);

  const KeyframeVelocities kv = assign_velocities(m, kp, v_avg);
  Kinematics kin(m, kp.q);
  CHECK(contact_jacobian(kin, kp.leading).row(2).dot(kv.qd_minus) <= -0.05 + 1e-9);
  CHECK((kv.qd_plus - impact_velocity_map(m, kp.q, kp.leading) * kv.qd_minus)
            .cwiseAbs()
            .maxCoeff() < 1e-12);
}

TEST_CASE("a posture that cannot drop its swing sole is reported infeasible") {
  RobotModel m = biped5();
  // Coincident soles with straight legs: every stance-compatible motion
  // leaves the swing sole exactly on the ground, so no descent margin
  // can be met.
  KeyframePosture kp;
  kp.q = nominal_stance(m).q;
  kp.relative_step = Vector3d::Zero();
  kp.leading = Side::left;
  CHECK_THROWS_WITH(assign_velocities(m, kp, Vector3d(0.2, 0, 0)),
                    Catch::Matchers::ContainsSubstring("infeasible-qp"));

  VelocityOptions relaxed;
  relaxed.v_min = 0;
  relaxed.eps_fwd = 0;
  const KeyframeVelocities kv = assign_velocities(m, kp, Vector3d::Zero(), relaxed);
  CHECK(kv.qd_minus.cwiseAbs().maxCoeff() < 1e-12);
}
