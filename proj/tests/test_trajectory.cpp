#include <catch2/catch_amalgamated.hpp>

#include "carlab/geometry.hpp"
#include "carlab/trajectory.hpp"

using namespace carlab;

namespace {
const DomainSpec& channel() {
  static DomainSpec d = build_domain({"channel", 1.0 / 64});
  return d;
}
const DomainSpec& annular() {
  static DomainSpec d = build_domain({"annular", 1.0 / 64});
  return d;
}
}  // namespace

TEST_CASE("extension equals the target on closure(Omega)") {
  TrajectoryConfig cfg;
  cfg.U = 2.0;
  auto tr = build_target_trajectory(cfg, channel());
  const Grid& g = channel().grid;
  for (int flat : g.omega_interior) {
    Vec2 p = g.node(flat % g.nx, flat / g.nx);
    Vec2 d = tr.ybar_e(0.3, p) - tr.ybar(0.3, p);
    REQUIRE(norm(d) == 0.0);
  }
  // and on the Omega boundary itself
  for (auto& b : channel().boundary_omega) {
    Vec2 d = tr.ybar_e(0.7, b.pos) - tr.ybar(0.7, b.pos);
    REQUIRE(norm(d) == 0.0);
  }
}

TEST_CASE("extension vanishes identically on w_tilde") {
  for (const DomainSpec* dom : {&channel(), &annular()}) {
    TrajectoryConfig cfg;
    auto tr = build_target_trajectory(cfg, *dom);
    const Grid& g = dom->grid;
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        Vec2 p = g.node(i, j);
        if (!dom->w_tilde.contains(p)) continue;
        REQUIRE(norm(tr.ybar_e(0.4, p)) == 0.0);
      }
  }
}

TEST_CASE("extension points outward on dO away from tangential contact") {
  TrajectoryConfig cfg;
  cfg.U = 2.0;
  auto tr = build_target_trajectory(cfg, channel());
  double floor_bound = std::min(tr.gamma / 3.0, 1.0);
  for (auto& b : channel().boundary_O) {
    double vn = dot(tr.ybar_e(0.5, b.pos), b.normal);
    bool tangential_contact =
        channel().dist_omega(b.pos) < 1e-9 && !channel().gamma0(b.pos);
    if (tangential_contact) continue;  // box-edge contact, documented deviation
    CHECK(vn > 0.0);
    // the uniform paper bound holds on Gamma0 and outside the blend collar
    if (channel().gamma0(b.pos) || channel().dist_omega(b.pos) >= tr.blend_d)
      CHECK(vn >= floor_bound - 1e-9);
  }
}

TEST_CASE("annular extension satisfies the uniform outward bound on all of dO") {
  TrajectoryConfig cfg;
  cfg.U = 2.0;
  auto tr = build_target_trajectory(cfg, annular());
  for (auto& b : annular().boundary_O) {
    double vn = dot(tr.ybar_e(0.25, b.pos), b.normal);
    CHECK(vn >= 1.0 - 1e-3);  // m.n = 1 up to the crossing-point offset
  }
}

TEST_CASE("ramped profile vanishes at both ends and plateaus at 1") {
  TrajectoryConfig cfg;
  cfg.velocity = VelocityKind::ramped;
  cfg.U = 4.0;
  cfg.T = 1.0;
  auto tr = build_target_trajectory(cfg, annular());
  CHECK(norm(tr.ybar(0.0, {0, 0})) == 0.0);
  CHECK(norm(tr.ybar(1.0, {0, 0})) == 0.0);
  CHECK(tr.ybar(0.5, {0, 0}).x == Catch::Approx(4.0));
  // displacement consistent with a quadrature of the ramp
  int n = 20000;
  double acc = 0;
  for (int k = 0; k < n; ++k) acc += time_bump((k + 0.5) / n) / n;
  CHECK(tr.ybar_displacement(1.0).x == Catch::Approx(4.0 * acc).epsilon(1e-8));
}

TEST_CASE("ramped flow with nonempty Gamma0 is rejected (no uniform gamma)") {
  TrajectoryConfig cfg;
  cfg.velocity = VelocityKind::ramped;
  CHECK_THROWS_AS(build_target_trajectory(cfg, channel()),
                  std::invalid_argument);
  cfg.velocity = VelocityKind::constant;
  cfg.U = -1.0;
  CHECK_THROWS_AS(build_target_trajectory(cfg, channel()),
                  std::invalid_argument);
  CHECK_NOTHROW(build_target_trajectory(cfg, annular()));  // Gamma0 empty
}

TEST_CASE("transported sigma stays positive and solves the transport identity") {
  TrajectoryConfig cfg;
  cfg.sigma = SigmaKind::sin_product;
  cfg.U = 2.0;
  auto tr = build_target_trajectory(cfg, channel());
  const Grid& g = channel().grid;
  double inf_sigma = 1e300;
  for (int flat : g.O_interior) {
    Vec2 p = g.node(flat % g.nx, flat / g.nx);
    for (double t : {0.0, 0.33, 0.8})
      inf_sigma = std::min(inf_sigma, tr.sigma(t, p));
  }
  CHECK(inf_sigma > 0.0);

  // d_t sigma + ybar . grad sigma = 0 via finite differences
  double dt = 1e-6;
  Vec2 p{0.37, 0.52};
  double t = 0.4;
  double lhs = (tr.sigma(t + dt, p) - tr.sigma(t - dt, p)) / (2 * dt) +
               dot(tr.ybar(t, p), tr.grad_sigma(t, p));
  CHECK(std::abs(lhs) < 1e-6);
}

TEST_CASE("grad sigma is consistent with finite differences of sigma") {
  TrajectoryConfig cfg;
  cfg.sigma = SigmaKind::sin_product;
  auto tr = build_target_trajectory(cfg, channel());
  Vec2 p{0.3, 0.6};
  double t = 0.21, d = 1e-6;
  Vec2 fd{(tr.sigma(t, {p.x + d, p.y}) - tr.sigma(t, {p.x - d, p.y})) / (2 * d),
          (tr.sigma(t, {p.x, p.y + d}) - tr.sigma(t, {p.x, p.y - d})) / (2 * d)};
  Vec2 an = tr.grad_sigma(t, p);
  CHECK(norm(fd - an) < 1e-8);
}
