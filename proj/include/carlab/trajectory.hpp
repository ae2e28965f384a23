#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "carlab/geometry.hpp"

namespace carlab {

/// Quintic smoothstep: 0 at 0, 1 at 1, first two derivatives vanish at ends.
inline double smoothstep5(double s) {
  if (s <= 0) return 0;
  if (s >= 1) return 1;
  return s * s * s * (10 + s * (-15 + 6 * s));
}
inline double smoothstep5_d(double s) {
  if (s <= 0 || s >= 1) return 0;
  return 30 * s * s * (1 - s) * (1 - s);
}

/// Time bump: 0 at s=0 and s=1, 1 on [1/3, 2/3], C^2.
inline double time_bump(double s) {
  if (s <= 1.0 / 3) return smoothstep5(3 * s);
  if (s >= 2.0 / 3) return smoothstep5(3 * (1 - s));
  return 1.0;
}
inline double time_bump_d(double s) {
  if (s < 1.0 / 3) return 3 * smoothstep5_d(3 * s);
  if (s > 2.0 / 3) return -3 * smoothstep5_d(3 * (1 - s));
  return 0.0;
}
/// Integral of time_bump over [0, s].
inline double time_bump_int(double s) {
  auto int_ss5 = [](double u) {  // integral of smoothstep5 on [0, u], u in [0,1]
    u = std::clamp(u, 0.0, 1.0);
    double u4 = u * u * u * u;
    return u4 * (2.5 * u - 3 * u * u + u * u * u);  // 2.5u^5 - 3u^6 + u^7
  };
  s = std::clamp(s, 0.0, 1.0);
  const double full = int_ss5(1.0) / 3;  // area of each ramp
  if (s <= 1.0 / 3) return int_ss5(3 * s) / 3;
  if (s <= 2.0 / 3) return full + (s - 1.0 / 3);
  return full + 1.0 / 3 + (full - int_ss5(3 * (1 - s)) / 3);
}

enum class SigmaKind { constant_one, sin_product };
enum class VelocityKind { constant, ramped };

struct TrajectoryConfig {
  SigmaKind sigma = SigmaKind::constant_one;
  VelocityKind velocity = VelocityKind::constant;
  double U = 2.0;
  double nu = 0.1;
  double T = 1.0;
};

/// Analytic target trajectory (sigma_bar, y_bar) together with the global
/// extension y_bar_e used for all characteristic computations.
///
/// The extension field m is radial from a center c* inside w_tilde,
/// scaled so that m.n = 1 on dO, and C^2-cut to zero on w_tilde. Radial
/// monotonicity keeps every trajectory outside w_tilde moving away from it,
/// which the transported weight function needs.
struct TargetTrajectory {
  TrajectoryConfig cfg;
  const DomainSpec* dom = nullptr;

  Vec2 cstar{};       // ray center inside w_tilde
  double d0 = 0;      // dist(w_tilde, Omega)
  double d1 = 0;      // boundary sweep distance, see build notes
  double blend_d = 0; // min(d0, d1): cutoff support width
  double cut_w = 0;   // ramp width for the w_tilde cut
  double gamma = 0;   // inf over Gamma0 x [0,T] of ybar.n

  // --- target velocity (space-constant built-ins, defined on the plane) ---
  double ramp(double t) const {
    return cfg.velocity == VelocityKind::ramped ? time_bump(t / cfg.T) : 1.0;
  }
  Vec2 ybar(double t, Vec2) const { return {cfg.U * ramp(t), 0.0}; }
  Vec2 ybar_dt(double t, Vec2) const {
    if (cfg.velocity != VelocityKind::ramped) return {0, 0};
    return {cfg.U * time_bump_d(t / cfg.T) / cfg.T, 0.0};
  }
  // grad ybar = 0 for the built-in fields
  Vec2 ybar_displacement(double t) const {  // integral of ybar over [0,t]
    if (cfg.velocity == VelocityKind::ramped)
      return {cfg.U * cfg.T * time_bump_int(t / cfg.T), 0.0};
    return {cfg.U * t, 0.0};
  }

  // --- density: transported analytically along the constant-in-space flow ---
  double sigma0(Vec2 p) const {
    if (cfg.sigma == SigmaKind::constant_one) return 1.0;
    return 1.0 + 0.2 * std::sin(M_PI * p.x) * std::sin(M_PI * p.y);
  }
  double sigma(double t, Vec2 p) const {
    if (cfg.sigma == SigmaKind::constant_one) return 1.0;
    return sigma0(p - ybar_displacement(t));
  }
  Vec2 grad_sigma(double t, Vec2 p) const {
    if (cfg.sigma == SigmaKind::constant_one) return {0, 0};
    Vec2 q = p - ybar_displacement(t);
    return {0.2 * M_PI * std::cos(M_PI * q.x) * std::sin(M_PI * q.y),
            0.2 * M_PI * std::sin(M_PI * q.x) * std::cos(M_PI * q.y)};
  }
  bool sigma_constant() const { return cfg.sigma == SigmaKind::constant_one; }

  // --- extension machinery ---

  /// Exit point of the ray from cstar through p on dO, and its length.
  void ray_exit(Vec2 p, Vec2& exit, double& L) const {
    Vec2 d = p - cstar;
    double r = norm(d);
    Vec2 u = r > 1e-14 ? (1.0 / r) * d : Vec2{1, 0};
    const Shape& O = dom->O;
    if (O.kind == Shape::Kind::disc) {
      Vec2 w = cstar - O.center;
      double b = dot(w, u);
      double c = dot(w, w) - O.radius * O.radius;
      double t = -b + std::sqrt(std::max(b * b - c, 0.0));
      L = t;
      exit = cstar + t * u;
      return;
    }
    double t = 1e300;
    if (u.x > 1e-14) t = std::min(t, (O.hi.x - cstar.x) / u.x);
    if (u.x < -1e-14) t = std::min(t, (O.lo.x - cstar.x) / u.x);
    if (u.y > 1e-14) t = std::min(t, (O.hi.y - cstar.y) / u.y);
    if (u.y < -1e-14) t = std::min(t, (O.lo.y - cstar.y) / u.y);
    L = t;
    exit = cstar + t * u;
  }

  /// zeta = |p - cstar| / ray length, in [0,1] on O, >1 outside.
  double zeta(Vec2 p) const {
    Vec2 e;
    double L;
    ray_exit(p, e, L);
    return norm(p - cstar) / L;
  }

  double cut_wtilde(Vec2 p) const {
    return smoothstep5(dom->w_tilde.dist(p) / cut_w);
  }

  /// m: radial from cstar with unit normal trace on dO, zero on w_tilde.
  Vec2 m_field(Vec2 p) const {
    Vec2 d = p - cstar;
    double r = norm(d);
    if (r < 1e-14) return {0, 0};
    Vec2 u = (1.0 / r) * d;
    Vec2 e;
    double L;
    ray_exit(p, e, L);
    double cosE = dot(u, dom->O.sdf_grad(e));
    cosE = std::max(cosE, 0.2);  // star-shaped built-ins keep this large
    return (cut_wtilde(p) / cosE) * u;
  }

  double eta_cut(Vec2 p) const {
    return 1.0 - smoothstep5(dom->dist_omega(p) / blend_d);
  }

  /// The global extension: eta*ybar + (1-eta)*m.
  Vec2 ybar_e(double t, Vec2 p) const {
    double eta = eta_cut(p);
    Vec2 m = eta < 1.0 ? m_field(p) : Vec2{0, 0};
    return eta * ybar(t, p) + (1.0 - eta) * m;
  }
};

inline TargetTrajectory build_target_trajectory(const TrajectoryConfig& cfg,
                                                const DomainSpec& dom) {
  TargetTrajectory tr;
  tr.cfg = cfg;
  tr.dom = &dom;
  if (cfg.T <= 0) throw std::invalid_argument("trajectory: T must be positive");
  if (cfg.nu <= 0) throw std::invalid_argument("trajectory: nu must be positive");

  // gamma = inf over [0,T] x Gamma0 of ybar.n; with Gamma0 present it must be
  // uniformly positive (the uniform-inf reading of the outflow condition).
  if (dom.has_gamma0) {
    double g = 1e300;
    for (const auto& b : dom.boundary_omega) {
      if (!b.on_gamma0) continue;
      for (int k = 0; k <= 16; ++k) {
        double t = cfg.T * k / 16.0;
        g = std::min(g, dot(tr.ybar(t, b.pos), b.normal));
      }
    }
    tr.gamma = g;
    if (!(g > 0))
      throw std::invalid_argument(
          "trajectory: ybar.n not uniformly positive on Gamma0 "
          "(needs U > 0 and an unramped profile when Gamma0 is nonempty)");
  } else {
    tr.gamma = 0;
  }

  // ray center: centroid of w_tilde, snapped to the lattice so the weight
  // bump peaks exactly on a grid node
  if (dom.w_tilde.kind == Region::Kind::box)
    tr.cstar = 0.5 * (dom.w_tilde.lo + dom.w_tilde.hi);
  else {
    double rm = 0.5 * (dom.w_tilde.r0 + dom.w_tilde.r1);
    double am = 0.5 * (dom.w_tilde.a0 + dom.w_tilde.a1);
    tr.cstar = dom.w_tilde.center + Vec2{rm * std::cos(am), rm * std::sin(am)};
  }
  {
    const Grid& g = dom.grid;
    Vec2 snapped{g.origin.x + std::round((tr.cstar.x - g.origin.x) / g.h) * g.h,
                 g.origin.y + std::round((tr.cstar.y - g.origin.y) / g.h) * g.h};
    if (dom.w_tilde.contains(snapped)) tr.cstar = snapped;
  }

  tr.d0 = region_shape_clearance(dom.w_tilde, dom.omega);

  // d1: largest sweep distance d such that every dO point within distance d
  // of Omega keeps ybar.n >= gamma/3; tangential-contact points (box edges
  // shared between dOmega and dO where ybar.n vanishes identically) are
  // excluded, as the smooth-domain construction has none.
  double d1 = 10.0;
  double gref = dom.has_gamma0 ? tr.gamma : 1.0;
  for (const auto& b : dom.boundary_O) {
    double vmax = 0, vmin = 1e300;
    for (int k = 0; k <= 16; ++k) {
      double t = cfg.T * k / 16.0;
      double vn = dot(tr.ybar(t, b.pos), b.normal);
      vmax = std::max(vmax, std::abs(vn));
      vmin = std::min(vmin, vn);
    }
    if (vmax <= gref / 10) continue;  // tangential contact
    if (vmin < gref / 3) d1 = std::min(d1, dom.dist_omega(b.pos));
  }
  tr.d1 = d1;
  tr.blend_d = std::min(tr.d0, tr.d1);
  if (tr.blend_d <= 0)
    throw std::invalid_argument("trajectory: degenerate blend distance");

  double wt_to_bnd = 1e300;
  for (const Vec2& p : dom.w_tilde.boundary_samples())
    wt_to_bnd = std::min(wt_to_bnd, -dom.O.sdf(p));
  tr.cut_w = 0.45 * std::min(tr.d0, wt_to_bnd);
  return tr;
}

}  // namespace carlab
