#include "kpl/model.hpp"

#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace kpl;

TEST_CASE("fixture models load and expose expected structure") {
  RobotModel m5 = test::biped5();
  CHECK(m5.n() == 4);
  CHECK(m5.nq() == 10);
  CHECK(m5.links.size() == 5);
  CHECK(m5.foot(Side::left).contact == ContactType::point);
  CHECK(m5.total_mass() == Catch::Approx(1.7));

  RobotModel m12 = test::biped12();
  CHECK(m12.n() == 12);
  CHECK(m12.nq() == 18);
  CHECK(m12.foot(Side::left).contact == ContactType::flat);
  CHECK(m12.foot(Side::right).contact_points().size() == 4);
  CHECK(m12.joint_index("r_knee") >= 0);
}

TEST_CASE("model hash ignores formatting but tracks content") {
  RobotModel a = parse_model(
      "model t\ngravity 0 0 -9.81\n"
      "links { b { root mass 1 com 0 0 0 inertia 1e-3 1e-3 1e-3 0 0 0 }\n"
      "  c { mass 0.5 com 0 0 -0.1 inertia 1e-4 1e-4 1e-4 0 0 0 }\n"
      "  d { mass 0.5 com 0 0 -0.1 inertia 1e-4 1e-4 1e-4 0 0 0 } }\n"
      "joints { j { parent b child c origin 0 0 -0.1 axis 0 1 0 limits -1 1 vel_limit 5 }\n"
      "  k { parent b child d origin 0 0 -0.1 axis 0 1 0 limits -1 1 vel_limit 5 } }\n"
      "feet { left { link c offset 0 0 -0.1 contact point }\n"
      "  right { link d offset 0 0 -0.1 contact point } }\n");
  RobotModel b = parse_model(
      "model t\n# comment\ngravity   0 0 -9.81\n"
      "links {\n b { root mass 1.0 com 0 0 0 inertia 1e-3 1e-3 1e-3 0 0 0 }\n"
      " c { mass 0.5 com 0 0 -0.1 inertia 1e-4 1e-4 1e-4 0 0 0 }\n"
      " d { mass 0.5 com 0 0 -0.1 inertia 1e-4 1e-4 1e-4 0 0 0 }\n}\n"
      "joints { j { parent b child c origin 0 0 -0.1 axis 0 1 0 limits -1 1 vel_limit 5 }\n"
      "  k { parent b child d origin 0 0 -0.1 axis 0 1 0 limits -1 1 vel_limit 5 } }\n"
      "feet { left { link c offset 0 0 -0.1 contact point }\n"
      "  right { link d offset 0 0 -0.1 contact point } }\n");
  CHECK(model_hash(a) == model_hash(b));

  b.links[1].mass = 0.51;
  CHECK(model_hash(a) != model_hash(b));
  CHECK(model_hash(test::biped5()) != model_hash(test::biped12()));
}

TEST_CASE("malformed models are rejected") {
  const std::string ok =
      "model t\nlinks { b { root mass 1 com 0 0 0 inertia 1e-3 1e-3 1e-3 0 0 0 }\n"
      "c { mass 0.5 com 0 0 0 inertia 1e-4 1e-4 1e-4 0 0 0 }\n"
      "d { mass 0.5 com 0 0 0 inertia 1e-4 1e-4 1e-4 0 0 0 } }\n"
      "joints { j { parent b child c origin 0 0 -0.1 axis 0 1 0 }\n"
      "k { parent b child d origin 0 0 -0.1 axis 0 1 0 } }\n"
      "feet { left { link c offset 0 0 -0.1 contact point }\n"
      "right { link d offset 0 0 -0.1 contact point } }\n";
  CHECK_NOTHROW(parse_model(ok));

  SECTION("negative mass") {
    std::string bad = ok;
    bad.replace(bad.find("mass 0.5"), 8, "mass -.5");
    CHECK_THROWS_AS(parse_model(bad), ModelError);
  }
  SECTION("indefinite inertia") {
    std::string bad = ok;
    bad.replace(bad.find("inertia 1e-4"), 12, "inertia -1e-4");
    CHECK_THROWS_AS(parse_model(bad), ModelError);
  }
  SECTION("unknown parent link") {
    std::string bad = ok;
    bad.replace(bad.find("parent b child c"), 16, "parent x child c");
    CHECK_THROWS_AS(parse_model(bad), ModelError);
  }
  SECTION("missing foot") {
    std::string bad = ok.substr(0, ok.find("right"));
    bad += "}\n";
    CHECK_THROWS_AS(parse_model(bad), ModelError);
  }
  SECTION("feet on the same link") {
    std::string bad = ok;
    bad.replace(bad.find("right { link d"), 14, "right { link c");
    CHECK_THROWS_AS(parse_model(bad), ModelError);
  }
  SECTION("number expected") {
    std::string bad = ok;
    bad.replace(bad.find("mass 1"), 6, "mass x");
    CHECK_THROWS_WITH(parse_model(bad), Catch::Matchers::ContainsSubstring("line"));
  }
  SECTION("two roots") {
    std::string bad = ok;
    bad.replace(bad.find("c { mass"), 8, "c { root mass");
    CHECK_THROWS_AS(parse_model(bad), ModelError);
  }
}

TEST_CASE("state validation enforces sizes, limits, and gimbal margin") {
  RobotModel m = test::biped5();
  GeneralizedState s;
  s.q = VectorXd::Zero(m.nq());
  s.qd = VectorXd::Zero(m.nq());
  s.q[2] = 0.35;
  CHECK_NOTHROW(m.validate_state(s));

  GeneralizedState bad = s;
  bad.q = VectorXd::Zero(m.nq() + 1);
  CHECK_THROWS_AS(m.validate_state(bad), ModelError);

  bad = s;
  bad.q[6] = 3.0;  // beyond the hip limit
  CHECK_THROWS_AS(m.validate_state(bad), ModelError);
  m.clamp_to_limits(bad.q);
  CHECK(bad.q[6] == Catch::Approx(2.0));

  bad = s;
  bad.q[3] = 1.5;
  CHECK_THROWS_AS(m.validate_state(bad), ModelError);

  bad = s;
  bad.qd[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(m.validate_state(bad), ModelError);
}
