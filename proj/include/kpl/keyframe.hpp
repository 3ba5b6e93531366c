#pragma once

#include <atomic>
#include <optional>
#include <thread>

#include "kpl/kinematics.hpp"

namespace kpl {

struct KeyframeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Planar pose and landing time of one footstep.
struct Footstep {
  double x = 0, y = 0, yaw = 0, t = 0;
};

struct FootstepSequence {
  Side first = Side::left;  // which foot takes steps[0]
  std::vector<Footstep> steps;

  Side side_of(size_t i) const {
    const bool even = i % 2 == 0;
    return even == (first == Side::left) ? Side::left : Side::right;
  }
  size_t size() const { return steps.size(); }
};

// Distance from the base origin down to a sole in the zero configuration,
// used as the scale for reachability checks.
inline double leg_length(const RobotModel& m) {
  VectorXd q = VectorXd::Zero(m.nq());
  m.clamp_to_limits(q);
  Kinematics kin(m, q);
  const double zl = kin.sole_position(Side::left).z();
  const double zr = kin.sole_position(Side::right).z();
  return std::max(-std::min(zl, zr), 0.05);
}

inline double reachable_stride(const RobotModel& m) { return 1.5 * leg_length(m); }

inline void validate_sequence(const RobotModel& m, const FootstepSequence& seq) {
  const double stride_max = reachable_stride(m);
  for (size_t i = 0; i + 1 < seq.steps.size(); ++i) {
    const Footstep& a = seq.steps[i];
    const Footstep& b = seq.steps[i + 1];
    if (!(b.t > a.t))
      throw KeyframeError("footstep timestamps must strictly increase (steps " +
                          std::to_string(i) + ", " + std::to_string(i + 1) + ")");
    const double sep = std::hypot(b.x - a.x, b.y - a.y);
    if (sep > stride_max)
      throw KeyframeError("infeasible-step: separation " + detail::dtos(sep) +
                          " m exceeds reachable stride " + detail::dtos(stride_max) + " m");
  }
}

// Relative planar pose of the leading footstep expressed in the trailing
// sole frame.
inline Vector3d relative_step_of(const Footstep& trailing, const Footstep& leading) {
  const double c = std::cos(trailing.yaw), s = std::sin(trailing.yaw);
  const double dx = leading.x - trailing.x, dy = leading.y - trailing.y;
  return {c * dx + s * dy, -s * dx + c * dy, wrap_angle(leading.yaw - trailing.yaw)};
}

// Rigid planar displacement of a whole configuration: base position and
// yaw compose with (x, y, yaw); everything else is invariant.
inline VectorXd apply_planar_transform(VectorXd q, double x, double y, double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double qx = q[0], qy = q[1];
  q[0] = c * qx - s * qy + x;
  q[1] = s * qx + c * qy + y;
  q[5] = wrap_angle(q[5] + yaw);
  return q;
}

// Double-support configuration at a landing instant.
struct KeyframePosture {
  VectorXd q;
  Vector3d relative_step = Vector3d::Zero();
  Side leading = Side::left;
  int iterations = 0;

  Side trailing() const { return other_side(leading); }
};

struct IkOptions {
  double damping = 1e-3;       // added to the Gauss-Newton normal matrix
  double guess_weight = 1e-2;  // nullspace pull toward the initial guess
  int max_iter = 100;
  double tol = 1e-8;
  double step_cap = 0.5;
};

namespace detail {

inline void foot_pose_residual(const Kinematics& kin, Side s, const Footstep& target,
                               VectorXd& r, MatrixXd& j, int row) {
  const Foot& f = kin.model().foot(s);
  const Vector3d p = kin.sole_position(s);
  r.segment<3>(row) = Vector3d(target.x, target.y, 0) - p;
  j.middleRows(row, 3) = kin.point_jacobian(f.link, p);
  if (f.contact == ContactType::flat) {
    r.segment<3>(row + 3) = rotation_log(rot_z(target.yaw) * kin.sole_rotation(s).transpose());
    j.middleRows(row + 3, 3) = kin.angular_jacobian(f.link);
  }
}

}  // namespace detail

// Damped least-squares IK for a double-support posture: the trailing and
// leading soles are driven onto the two footstep poses while the redundant
// directions relax toward the initial guess.  The result is always
// re-verified through forward kinematics.
inline KeyframePosture solve_keyframe_ik(const RobotModel& m, const Footstep& trailing,
                                         Side trailing_side, const Footstep& leading,
                                         const VectorXd& guess, const IkOptions& opt = {}) {
  const Side leading_side = other_side(trailing_side);
  const double sep = std::hypot(leading.x - trailing.x, leading.y - trailing.y);
  if (sep > reachable_stride(m))
    throw KeyframeError("infeasible-step: separation " + detail::dtos(sep) +
                        " m exceeds reachable stride " + detail::dtos(reachable_stride(m)) + " m");

  const int nq = m.nq();
  if (guess.size() != nq) throw KeyframeError("bad IK guess size");
  const int rows = m.foot(trailing_side).constraint_rows() + m.foot(leading_side).constraint_rows();
  const int lead_row = m.foot(trailing_side).constraint_rows();

  VectorXd q = guess;
  m.clamp_to_limits(q);
  const VectorXd q_ref = q;

  VectorXd r(rows);
  MatrixXd j(rows, nq);
  int used = 0;
  double rinf = 0;
  for (int it = 0; it <= opt.max_iter; ++it) {
    Kinematics kin(m, q);
    detail::foot_pose_residual(kin, trailing_side, trailing, r, j, 0);
    detail::foot_pose_residual(kin, leading_side, leading, r, j, lead_row);
    rinf = r.cwiseAbs().maxCoeff();
    if (rinf < opt.tol) {
      used = it;
      break;
    }
    if (it == opt.max_iter) {
      throw KeyframeError("ik-no-convergence: residual " + detail::dtos(rinf) + " after " +
                          std::to_string(opt.max_iter) + " iterations");
    }
    // Damping shrinks with the residual: near a straight-leg singularity
    // the height error is second order in the joint error, and a fixed
    // floor would freeze the step along the small-singular-value
    // direction exactly where Gauss-Newton still contracts it.
    const MatrixXd jtj = j.transpose() * j;
    const double lambda2 = opt.damping * std::min(1.0, rinf);
    const MatrixXd a = jtj + lambda2 * MatrixXd::Identity(nq, nq);
    Eigen::LLT<MatrixXd> llt(a);
    VectorXd dq = llt.solve(j.transpose() * r);
    // Secondary objective projected onto the exact task nullspace, so the
    // guess pull cannot hold the sole residual away from zero. The weight
    // is capped by the residual norm: nullspace motion curves the task
    // error at second order, and an undecayed pull would balance the
    // damped contraction well above tol.
    Eigen::ColPivHouseholderQR<MatrixXd> qr(j.transpose());
    const MatrixXd qfull = qr.householderQ();
    const MatrixXd range = qfull.leftCols(qr.rank());
    const VectorXd e = q_ref - q;
    dq += std::min(opt.guess_weight, rinf) * (e - range * (range.transpose() * e));
    const double dmax = dq.cwiseAbs().maxCoeff();
    if (dmax > opt.step_cap) dq *= opt.step_cap / dmax;
    q += dq;
    m.clamp_to_limits(q);
  }

  KeyframePosture out;
  out.q = q;
  out.relative_step = relative_step_of(trailing, leading);
  out.leading = leading_side;
  out.iterations = used;

  // Trust only forward kinematics for the posture invariants.
  Kinematics kin(m, q);
  for (Side s : {trailing_side, leading_side}) {
    const Footstep& tgt = s == trailing_side ? trailing : leading;
    const Vector3d p = kin.sole_position(s);
    double err = (p - Vector3d(tgt.x, tgt.y, 0)).cwiseAbs().maxCoeff();
    if (m.foot(s).contact == ContactType::flat) {
      const Vector3d e = rotation_log(rot_z(tgt.yaw) * kin.sole_rotation(s).transpose());
      err = std::max(err, e.cwiseAbs().maxCoeff());
    }
    if (err > 1e-6)
      throw KeyframeError("ik-no-convergence: verified sole error " + detail::dtos(err));
  }
  m.validate_state({q, VectorXd::Zero(nq)});
  return out;
}

// A flat double-support stance near the zero configuration, used to seed
// library construction.
inline KeyframePosture nominal_stance(const RobotModel& m) {
  VectorXd q = VectorXd::Zero(m.nq());
  m.clamp_to_limits(q);
  Kinematics kin0(m, q);
  q[2] -= std::max(kin0.sole_position(Side::left).z(), kin0.sole_position(Side::right).z());
  Kinematics kin(m, q);
  const Vector3d pr = kin.sole_position(Side::right);
  const Vector3d pl = kin.sole_position(Side::left);
  const Footstep right{pr.x(), pr.y(), yaw_of(kin.sole_rotation(Side::right)), 0};
  const Footstep left{pl.x(), pl.y(), yaw_of(kin.sole_rotation(Side::left)), 0};
  return solve_keyframe_ik(m, right, Side::right, left, q);
}

// Inclusive range [lo, hi] sampled every `step`.
struct GridAxis {
  double lo = 0, hi = 0, step = 0;

  std::vector<double> values() const {
    std::vector<double> v;
    if (step <= 0 || hi <= lo + 1e-12) {
      v.push_back(lo);
      return v;
    }
    const int n = static_cast<int>(std::floor((hi - lo) / step + 1.5));
    for (int i = 0; i < n; ++i) v.push_back(lo + i * step);
    return v;
  }
};

struct GridSpec {
  GridAxis dx{-0.05, 0.20, 0.05};
  GridAxis dy{0.10, 0.30, 0.05};
  GridAxis dphi{-0.3, 0.3, 0.15};
};

struct SkippedCell {
  Vector3d key;
  Side leading = Side::left;
  std::string reason;
};

struct KeyframeLibrary {
  uint64_t model_hash = 0;
  GridSpec grid;
  std::vector<KeyframePosture> entries;
  std::vector<SkippedCell> skipped;
};

// Weighted nearest-neighbor metric over relative steps; yaw is scaled to
// meters so all three coordinates carry comparable weight.
inline double step_distance2(const Vector3d& a, const Vector3d& b) {
  const double dyaw = 0.3 * wrap_angle(a.z() - b.z());
  return (a.x() - b.x()) * (a.x() - b.x()) + (a.y() - b.y()) * (a.y() - b.y()) + dyaw * dyaw;
}

struct BuildOptions {
  GridSpec grid;
  IkOptions ik;
  int threads = 0;  // 0 = hardware concurrency
};

inline KeyframeLibrary build_library(const RobotModel& m, const BuildOptions& opt = {}) {
  KeyframeLibrary lib;
  lib.model_hash = model_hash(m);
  lib.grid = opt.grid;

  const KeyframePosture nominal = nominal_stance(m);
  const std::vector<double> xs = opt.grid.dx.values();
  const std::vector<double> ys = opt.grid.dy.values();
  const std::vector<double> phis = opt.grid.dphi.values();

  struct Slice {
    Side leading;
    double phi;
    std::vector<KeyframePosture> entries;
    std::vector<SkippedCell> skipped;
  };
  std::vector<Slice> slices;
  for (Side leading : {Side::left, Side::right})
    for (double phi : phis) slices.push_back({leading, phi, {}, {}});

  auto run_slice = [&](Slice& sl) {
    // Landing on `leading` means the other sole anchors the frame.
    const Side trailing_side = other_side(sl.leading);
    const Kinematics kin(m, nominal.q);
    const Vector3d anchor = kin.sole_position(trailing_side);
    const VectorXd seed_q = apply_planar_transform(nominal.q, -anchor.x(), -anchor.y(), 0.0);
    const double mirror = sl.leading == Side::left ? 1.0 : -1.0;

    VectorXd row_carry = seed_q;
    for (size_t iy = 0; iy < ys.size(); ++iy) {
      VectorXd guess = row_carry;
      bool row_seeded = false;
      for (size_t ix = 0; ix < xs.size(); ++ix) {
        const Vector3d key(xs[ix], mirror * ys[iy], mirror * sl.phi);
        const Footstep trailing{0, 0, 0, 0};
        const Footstep leading{key.x(), key.y(), key.z(), 0};
        try {
          KeyframePosture kp = solve_keyframe_ik(m, trailing, trailing_side, leading, guess, opt.ik);
          guess = kp.q;
          if (!row_seeded) {
            row_carry = kp.q;
            row_seeded = true;
          }
          sl.entries.push_back(std::move(kp));
        } catch (const KeyframeError& e) {
          sl.skipped.push_back({key, sl.leading, e.what()});
        }
      }
    }
  };

  unsigned thread_count = opt.threads > 0 ? opt.threads : std::thread::hardware_concurrency();
  thread_count = std::max(1u, std::min<unsigned>(thread_count, slices.size()));
  if (thread_count <= 1) {
    for (Slice& sl : slices) run_slice(sl);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < thread_count; ++w)
      pool.emplace_back([&] {
        for (size_t i = next++; i < slices.size(); i = next++) run_slice(slices[i]);
      });
    for (std::thread& th : pool) th.join();
  }

  for (Slice& sl : slices) {
    for (KeyframePosture& kp : sl.entries) lib.entries.push_back(std::move(kp));
    for (SkippedCell& sc : sl.skipped) lib.skipped.push_back(std::move(sc));
  }
  if (lib.entries.empty()) throw KeyframeError("empty library: no feasible grid cell");
  return lib;
}

// Indices of the two entries closest to the target step, ties resolved
// toward the lower index.  `required` restricts the scan to entries that
// land on one side.
inline std::pair<int, int> query_two_nearest(const KeyframeLibrary& lib, const Vector3d& target,
                                             std::optional<Side> required = std::nullopt) {
  int best = -1, second = -1;
  double db = 0, ds = 0;
  for (size_t i = 0; i < lib.entries.size(); ++i) {
    if (required && lib.entries[i].leading != *required) continue;
    const double d = step_distance2(lib.entries[i].relative_step, target);
    if (best < 0 || d < db) {
      second = best;
      ds = db;
      best = static_cast<int>(i);
      db = d;
    } else if (second < 0 || d < ds) {
      second = static_cast<int>(i);
      ds = d;
    }
  }
  if (second < 0) throw KeyframeError("library-too-small: need at least two entries");
  return {best, second};
}

// Circular-aware midpoint of two configurations: positions average
// linearly, every angle averages along the shorter arc.
inline VectorXd average_posture(const VectorXd& a, const VectorXd& b) {
  VectorXd q = a;
  for (int i = 0; i < q.size(); ++i) {
    if (i < 3)
      q[i] = 0.5 * (a[i] + b[i]);
    else
      q[i] = wrap_angle(a[i] + 0.5 * wrap_angle(b[i] - a[i]));
  }
  return q;
}

// Desired posture for the landing that ends the step from footstep i to
// i+1: two nearest library entries vote for the guess, and IK refines it
// against the actual footstep pair.
inline KeyframePosture interpolate_posture(const KeyframeLibrary& lib, const RobotModel& m,
                                           const FootstepSequence& seq, size_t i,
                                           const IkOptions& ik = {}) {
  if (i + 1 >= seq.steps.size()) throw KeyframeError("footstep index out of range");
  if (lib.model_hash != model_hash(m))
    throw KeyframeError("library was built for a different model");
  const Footstep& trailing = seq.steps[i];
  const Footstep& leading = seq.steps[i + 1];
  const Side leading_side = seq.side_of(i + 1);
  if (seq.side_of(i) != other_side(leading_side))
    throw KeyframeError("consecutive footsteps must alternate feet");

  const Vector3d target = relative_step_of(trailing, leading);
  const auto [n0, n1] = query_two_nearest(lib, target, leading_side);
  const VectorXd mid = average_posture(lib.entries[n0].q, lib.entries[n1].q);
  const VectorXd guess = apply_planar_transform(mid, trailing.x, trailing.y, trailing.yaw);
  return solve_keyframe_ik(m, trailing, other_side(leading_side), leading, guess, ik);
}

}  // namespace kpl
