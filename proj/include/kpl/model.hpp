#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpl/math.hpp"

namespace kpl {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Side { left = 0, right = 1 };

inline Side other_side(Side s) { return s == Side::left ? Side::right : Side::left; }
inline const char* side_name(Side s) { return s == Side::left ? "left" : "right"; }
inline Side side_from_name(const std::string& s) {
  if (s == "left") return Side::left;
  if (s == "right") return Side::right;
  throw ParseError("unknown foot side '" + s + "'");
}

enum class ContactType { point, flat };

struct Link {
  std::string name;
  double mass = 0.0;
  Vector3d com = Vector3d::Zero();       // in link frame
  Matrix3d inertia = Matrix3d::Zero();   // about com, link frame
  int parent_joint = -1;                 // -1 for the root link
};

struct Joint {
  std::string name;
  int parent = -1;  // link index
  int child = -1;   // link index
  Vector3d origin = Vector3d::Zero();  // child frame origin in parent frame
  Vector3d axis = Vector3d::UnitY();   // in child frame
  double lower = -1e9, upper = 1e9;
  double vel_limit = 1e9;
};

struct Foot {
  int link = -1;
  Vector3d offset = Vector3d::Zero();  // sole frame origin in link frame
  ContactType contact = ContactType::point;
  double half_length = 0.0, half_width = 0.0;  // sole extents, flat feet

  // Contact points in the sole frame: one for point feet, four corners
  // for flat feet.
  std::vector<Vector3d> contact_points() const {
    if (contact == ContactType::point) return {Vector3d::Zero()};
    return {Vector3d(half_length, half_width, 0), Vector3d(half_length, -half_width, 0),
            Vector3d(-half_length, half_width, 0), Vector3d(-half_length, -half_width, 0)};
  }
  // Rows of the holonomic contact constraint: a pinned point for point
  // feet, the full sole frame pose for flat feet.
  int constraint_rows() const { return contact == ContactType::point ? 3 : 6; }
};

// Generalized coordinates: [base position (3), base pitch/roll/yaw,
// joint angles (n)].  Velocities hold the coordinate rates; base angular
// velocity is euler_rate_map(angles) * rates.
struct GeneralizedState {
  VectorXd q;
  VectorXd qd;
};

struct RobotModel {
  std::string name;
  Vector3d gravity = Vector3d(0, 0, -9.81);
  std::vector<Link> links;
  std::vector<Joint> joints;
  Foot feet[2];

  int n() const { return static_cast<int>(joints.size()); }
  int nq() const { return n() + 6; }
  int root_link = 0;

  const Foot& foot(Side s) const { return feet[static_cast<int>(s)]; }

  double total_mass() const {
    double m = 0;
    for (const auto& l : links) m += l.mass;
    return m;
  }

  int link_index(const std::string& nm) const {
    for (size_t i = 0; i < links.size(); ++i)
      if (links[i].name == nm) return static_cast<int>(i);
    return -1;
  }
  int joint_index(const std::string& nm) const {
    for (size_t i = 0; i < joints.size(); ++i)
      if (joints[i].name == nm) return static_cast<int>(i);
    return -1;
  }

  // Input map for the n actuated joints: u enters the joint rows only.
  MatrixXd input_map() const {
    MatrixXd b = MatrixXd::Zero(nq(), n());
    b.bottomRows(n()).setIdentity();
    return b;
  }

  void validate_state(const GeneralizedState& s, bool check_limits = true) const {
    if (s.q.size() != nq() || s.qd.size() != nq())
      throw ModelError("state dimension mismatch (expected " + std::to_string(nq()) + ")");
    if (!s.q.allFinite() || !s.qd.allFinite()) throw ModelError("state has non-finite entries");
    if (std::abs(s.q[3]) > 1.4 || std::abs(s.q[4]) > 1.4)
      throw ModelError("base pitch/roll near gimbal singularity");
    if (check_limits) {
      for (int j = 0; j < n(); ++j) {
        const double a = s.q[6 + j];
        if (a < joints[j].lower - 1e-9 || a > joints[j].upper + 1e-9)
          throw ModelError("joint '" + joints[j].name + "' outside limits");
      }
    }
  }

  void clamp_to_limits(VectorXd& q) const {
    for (int j = 0; j < n(); ++j)
      q[6 + j] = std::clamp(q[6 + j], joints[j].lower, joints[j].upper);
  }
};

namespace detail {

// Shortest decimal that round-trips a binary64 exactly.
inline std::string dtos(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

struct Tokenizer {
  std::vector<std::pair<std::string, int>> tokens;  // token, line
  size_t pos = 0;

  explicit Tokenizer(const std::string& text) {
    int line = 1;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) {
        tokens.emplace_back(cur, line);
        cur.clear();
      }
    };
    for (size_t i = 0; i < text.size(); ++i) {
      char c = text[i];
      if (c == '#') {
        flush();
        while (i < text.size() && text[i] != '\n') ++i;
        ++line;
        continue;
      }
      if (c == '\n') {
        flush();
        ++line;
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        flush();
        continue;
      }
      if (c == '{' || c == '}') {
        flush();
        tokens.emplace_back(std::string(1, c), line);
        continue;
      }
      cur += c;
    }
    flush();
  }

  bool done() const { return pos >= tokens.size(); }
  int line() const {
    return done() ? (tokens.empty() ? 1 : tokens.back().second) : tokens[pos].second;
  }
  const std::string& peek() const {
    if (done()) throw ParseError("unexpected end of file");
    return tokens[pos].first;
  }
  std::string next() {
    if (done()) throw ParseError("unexpected end of file");
    return tokens[pos++].first;
  }
  void expect(const std::string& t) {
    std::string got = next();
    if (got != t)
      throw ParseError("line " + std::to_string(tokens[pos - 1].second) + ": expected '" + t +
                       "', got '" + got + "'");
  }
  double number() {
    std::string t = next();
    size_t used = 0;
    double v;
    try {
      v = std::stod(t, &used);
    } catch (const std::exception&) {
      used = 0;
      v = 0;
    }
    if (used != t.size())
      throw ParseError("line " + std::to_string(tokens[pos - 1].second) + ": expected number, got '" +
                       t + "'");
    return v;
  }
  Vector3d vec3() {
    double x = number(), y = number(), z = number();
    return Vector3d(x, y, z);
  }
};

}  // namespace detail

inline RobotModel parse_model(const std::string& text) {
  detail::Tokenizer tok(text);
  RobotModel m;
  std::map<std::string, int> pending_roots;
  bool saw_links = false, saw_joints = false, saw_feet = false, saw_foot[2] = {false, false};
  std::vector<std::string> root_links;

  while (!tok.done()) {
    std::string key = tok.next();
    if (key == "model") {
      m.name = tok.next();
    } else if (key == "gravity") {
      m.gravity = tok.vec3();
    } else if (key == "links") {
      saw_links = true;
      tok.expect("{");
      while (tok.peek() != "}") {
        Link l;
        l.name = tok.next();
        tok.expect("{");
        Vector3d diag = Vector3d::Zero(), offdiag = Vector3d::Zero();
        bool is_root = false;
        while (tok.peek() != "}") {
          std::string f = tok.next();
          if (f == "mass")
            l.mass = tok.number();
          else if (f == "com")
            l.com = tok.vec3();
          else if (f == "inertia") {
            diag = tok.vec3();
            offdiag = tok.vec3();
          } else if (f == "root")
            is_root = true;
          else
            throw ParseError("line " + std::to_string(tok.line()) + ": unknown link field '" + f +
                             "'");
        }
        tok.expect("}");
        l.inertia << diag.x(), offdiag.x(), offdiag.y(), offdiag.x(), diag.y(), offdiag.z(),
            offdiag.y(), offdiag.z(), diag.z();
        if (m.link_index(l.name) >= 0) throw ParseError("duplicate link '" + l.name + "'");
        if (is_root) root_links.push_back(l.name);
        m.links.push_back(l);
      }
      tok.expect("}");
    } else if (key == "joints") {
      saw_joints = true;
      tok.expect("{");
      while (tok.peek() != "}") {
        Joint j;
        j.name = tok.next();
        tok.expect("{");
        while (tok.peek() != "}") {
          std::string f = tok.next();
          if (f == "parent") {
            j.parent = m.link_index(tok.next());
          } else if (f == "child") {
            j.child = m.link_index(tok.next());
          } else if (f == "origin") {
            j.origin = tok.vec3();
          } else if (f == "axis") {
            j.axis = tok.vec3();
          } else if (f == "limits") {
            j.lower = tok.number();
            j.upper = tok.number();
          } else if (f == "vel_limit") {
            j.vel_limit = tok.number();
          } else {
            throw ParseError("line " + std::to_string(tok.line()) + ": unknown joint field '" + f +
                             "'");
          }
        }
        tok.expect("}");
        if (m.joint_index(j.name) >= 0) throw ParseError("duplicate joint '" + j.name + "'");
        m.joints.push_back(j);
      }
      tok.expect("}");
    } else if (key == "feet") {
      saw_feet = true;
      tok.expect("{");
      while (tok.peek() != "}") {
        Side side = side_from_name(tok.next());
        Foot ft;
        tok.expect("{");
        while (tok.peek() != "}") {
          std::string f = tok.next();
          if (f == "link")
            ft.link = m.link_index(tok.next());
          else if (f == "offset")
            ft.offset = tok.vec3();
          else if (f == "contact") {
            std::string c = tok.next();
            if (c == "point")
              ft.contact = ContactType::point;
            else if (c == "flat")
              ft.contact = ContactType::flat;
            else
              throw ParseError("line " + std::to_string(tok.line()) + ": unknown contact type '" +
                               c + "'");
          } else if (f == "size") {
            ft.half_length = tok.number() / 2;
            ft.half_width = tok.number() / 2;
          } else {
            throw ParseError("line " + std::to_string(tok.line()) + ": unknown foot field '" + f +
                             "'");
          }
        }
        tok.expect("}");
        m.feet[static_cast<int>(side)] = ft;
        saw_foot[static_cast<int>(side)] = true;
      }
      tok.expect("}");
    } else {
      throw ParseError("line " + std::to_string(tok.line()) + ": unknown section '" + key + "'");
    }
  }

  if (!saw_links || m.links.empty()) throw ModelError("model has no links");
  if (!saw_joints) throw ModelError("model has no joints section");
  if (!saw_feet || !saw_foot[0] || !saw_foot[1]) throw ModelError("model must define both feet");
  if (root_links.size() != 1) throw ModelError("model must declare exactly one root link");
  m.root_link = m.link_index(root_links[0]);

  // Structural checks: every joint references known links, the parent link
  // appears earlier in the kinematic ordering, and each link has at most
  // one parent joint (tree).
  std::vector<bool> reached(m.links.size(), false);
  reached[m.root_link] = true;
  for (int ji = 0; ji < m.n(); ++ji) {
    auto& j = m.joints[ji];
    if (j.parent < 0 || j.child < 0)
      throw ModelError("joint '" + j.name + "' references unknown link");
    if (!reached[j.parent])
      throw ModelError("joint '" + j.name + "' listed before its parent link is reachable");
    if (reached[j.child]) throw ModelError("link '" + m.links[j.child].name + "' has two parents");
    if (j.axis.norm() < 1e-12) throw ModelError("joint '" + j.name + "' has zero axis");
    j.axis.normalize();
    if (j.lower > j.upper) throw ModelError("joint '" + j.name + "' has inverted limits");
    reached[j.child] = true;
    m.links[j.child].parent_joint = ji;
  }
  for (size_t li = 0; li < m.links.size(); ++li)
    if (!reached[li]) throw ModelError("link '" + m.links[li].name + "' is not connected");

  for (const auto& l : m.links) {
    if (l.mass <= 0) throw ModelError("link '" + l.name + "' must have positive mass");
    Eigen::SelfAdjointEigenSolver<Matrix3d> es(l.inertia);
    if ((l.inertia - l.inertia.transpose()).norm() > 1e-12 || es.eigenvalues().minCoeff() <= 0)
      throw ModelError("link '" + l.name + "' inertia must be symmetric positive definite");
  }
  for (int s = 0; s < 2; ++s) {
    if (m.feet[s].link < 0) throw ModelError("foot references unknown link");
    if (m.feet[s].contact == ContactType::flat &&
        (m.feet[s].half_length <= 0 || m.feet[s].half_width <= 0))
      throw ModelError("flat foot needs a positive sole size");
  }
  if (m.feet[0].link == m.feet[1].link) throw ModelError("feet must sit on distinct links");
  return m;
}

inline RobotModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open model file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_model(ss.str());
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  } catch (const ModelError& e) {
    throw ModelError(path + ": " + e.what());
  }
}

// Canonical text dump used for hashing; independent of source formatting.
inline std::string canonical_model_text(const RobotModel& m) {
  using detail::dtos;
  std::string out = "model " + m.name + "\n";
  out += "gravity " + dtos(m.gravity.x()) + " " + dtos(m.gravity.y()) + " " + dtos(m.gravity.z()) +
         "\n";
  for (const auto& l : m.links) {
    out += "link " + l.name + " " + dtos(l.mass);
    for (int i = 0; i < 3; ++i) out += " " + dtos(l.com[i]);
    out += " " + dtos(l.inertia(0, 0)) + " " + dtos(l.inertia(1, 1)) + " " + dtos(l.inertia(2, 2)) +
           " " + dtos(l.inertia(0, 1)) + " " + dtos(l.inertia(0, 2)) + " " + dtos(l.inertia(1, 2));
    if (&l - m.links.data() == m.root_link) out += " root";
    out += "\n";
  }
  for (const auto& j : m.joints) {
    out += "joint " + j.name + " " + m.links[j.parent].name + " " + m.links[j.child].name;
    for (int i = 0; i < 3; ++i) out += " " + dtos(j.origin[i]);
    for (int i = 0; i < 3; ++i) out += " " + dtos(j.axis[i]);
    out += " " + dtos(j.lower) + " " + dtos(j.upper) + " " + dtos(j.vel_limit) + "\n";
  }
  for (int s = 0; s < 2; ++s) {
    const Foot& f = m.feet[s];
    out += std::string("foot ") + side_name(static_cast<Side>(s)) + " " + m.links[f.link].name;
    for (int i = 0; i < 3; ++i) out += " " + dtos(f.offset[i]);
    out += std::string(" ") + (f.contact == ContactType::point ? "point" : "flat");
    out += " " + dtos(f.half_length) + " " + dtos(f.half_width) + "\n";
  }
  return out;
}

inline uint64_t model_hash(const RobotModel& m) {
  return detail::fnv1a64(canonical_model_text(m));
}

}  // namespace kpl
