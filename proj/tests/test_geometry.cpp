#include <catch2/catch_amalgamated.hpp>

#include "carlab/geometry.hpp"
#include "carlab/trajectory.hpp"

using namespace carlab;

TEST_CASE("channel domain at h=1/64 satisfies the nesting invariants") {
  DomainSpec dom = build_domain({"channel", 1.0 / 64});
  REQUIRE(dom.has_gamma0);

  bool any_gamma0 = false;
  for (auto& b : dom.boundary_omega) any_gamma0 |= b.on_gamma0;
  CHECK(any_gamma0);

  // every Omega node is an O node
  for (int flat : dom.grid.omega_interior) CHECK(dom.grid.in_O[flat] == 1);

  // nested margins: total w_tilde -> w margin at least 2h
  CHECK(nesting_margin(dom.w_tilde, dom.w_hat) > 0);
  CHECK(nesting_margin(dom.w_hat, dom.w) > 0);
  CHECK(nesting_margin(dom.w_tilde, dom.w) >= 2 * dom.grid.h);
  CHECK(region_shape_clearance(dom.w, dom.omega) >= 2 * dom.grid.h);
}

TEST_CASE("annular domain has empty Gamma0") {
  DomainSpec dom = build_domain({"annular", 1.0 / 64});
  CHECK_FALSE(dom.has_gamma0);
  for (auto& b : dom.boundary_omega) CHECK_FALSE(b.on_gamma0);
  CHECK(dom.connected_components_K == 1);
  CHECK(nesting_margin(dom.w_tilde, dom.w) >= 2 * dom.grid.h);
}

TEST_CASE("too-coarse resolution is rejected") {
  CHECK_THROWS_AS(build_domain({"channel", 0.25}), std::invalid_argument);
  CHECK_THROWS_AS(build_domain({"nonsense", 0.01}), std::invalid_argument);
}

TEST_CASE("boundary classification for the rightward channel flow") {
  DomainSpec dom = build_domain({"channel", 1.0 / 64});
  auto vel = [](double, Vec2) { return Vec2{1.0, 0.0}; };
  CHECK(classify_boundary_point(dom, vel, 0.0, {0.0, 0.5}) ==
        BoundarySide::inflow);
  CHECK(classify_boundary_point(dom, vel, 0.0, {1.0, 0.5}) ==
        BoundarySide::outflow);
  CHECK(classify_boundary_point(dom, vel, 0.0, {0.5, 1.0}) ==
        BoundarySide::tangential);
  CHECK_THROWS_AS(classify_boundary_point(dom, vel, 0.0, {0.5, 0.5}),
                  std::invalid_argument);
}

TEST_CASE("box and disc signed distances are exact") {
  Shape box = Shape::make_box({0, 0}, {1, 1});
  CHECK(box.sdf({0.5, 0.5}) == Catch::Approx(-0.5));
  CHECK(box.sdf({1.2, 0.5}) == Catch::Approx(0.2));
  CHECK(box.sdf({1.3, 1.4}) == Catch::Approx(0.5));
  CHECK(box.sdf({0.5, 0.0}) == Catch::Approx(0.0).margin(1e-15));

  Shape disc = Shape::make_disc({0.5, 0.5}, 0.4);
  CHECK(disc.sdf({0.5, 0.5}) == Catch::Approx(-0.4));
  CHECK(disc.sdf({1.0, 0.5}) == Catch::Approx(0.1));
  Vec2 gn = disc.sdf_grad({0.9, 0.5});
  CHECK(gn.x == Catch::Approx(1.0));
  CHECK(gn.y == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("sector region distance and containment") {
  Region s = Region::make_sector({0, 0}, 1.0, 2.0, M_PI / 2, M_PI);
  CHECK(s.contains({-1.0, 1.0}));
  CHECK_FALSE(s.contains({1.0, 1.0}));
  CHECK(s.dist({-3.0, 0.0}) == Catch::Approx(1.0));
  CHECK(s.dist({-0.5, 0.5}) ==
        Catch::Approx(1.0 - std::sqrt(0.5)).epsilon(1e-12));
  CHECK(s.inner_clearance({-1.2, 1.2}) > 0);
}
