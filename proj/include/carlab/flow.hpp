#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "carlab/geometry.hpp"
#include "carlab/trajectory.hpp"

namespace carlab {

constexpr double kDefaultFlowSteps = 2000;  // dt_flow = T / 2000

template <class Vel>
Vec2 rk4_step(Vel&& vel, double t, Vec2 x, double dt) {
  Vec2 k1 = vel(t, x);
  Vec2 k2 = vel(t + 0.5 * dt, x + (0.5 * dt) * k1);
  Vec2 k3 = vel(t + 0.5 * dt, x + (0.5 * dt) * k2);
  Vec2 k4 = vel(t + dt, x + dt * k3);
  return x + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4);
}

/// X(t_target, tau, x): fixed-step RK4 in either time direction.
template <class Vel>
Vec2 flow_map(Vel&& vel, double t_target, double tau, Vec2 x, double dt_flow) {
  double span = t_target - tau;
  if (span == 0) return x;
  int n = std::max(1, int(std::ceil(std::abs(span) / dt_flow)));
  double dt = span / n;
  double t = tau;
  for (int k = 0; k < n; ++k) {
    x = rk4_step(vel, t, x, dt);
    t = tau + (k + 1) * dt;
  }
  return x;
}

struct ExitTimes {
  double t_in = 0;
  double t_out = 0;
  Vec2 x_out{};      // exit point when t_out < T
  bool exits = false;  // false means the "never" marker (t_out = T)
};

namespace detail {

// Locates the first sign change of sdf along the trajectory from (t0, x)
// marching with step dt (signed) until t_end; returns crossing time via
// 40 bisection steps inside the bracketing interval.
template <class Vel, class Sdf>
bool march_to_crossing(Vel&& vel, Sdf&& sdf, double t0, Vec2 x, double t_end,
                       double dt, double& t_cross, Vec2& x_cross) {
  double t = t0;
  Vec2 xa = x;
  double fa = sdf(xa);
  bool fwd = dt > 0;
  while (fwd ? t < t_end - 1e-15 : t > t_end + 1e-15) {
    double step = fwd ? std::min(dt, t_end - t) : std::max(dt, t_end - t);
    Vec2 xb = rk4_step(vel, t, xa, step);
    double fb = sdf(xb);
    if ((fa <= 0) != (fb <= 0)) {
      double lo = 0, hi = step;  // bisect the substep from (t, xa)
      for (int it = 0; it < 40; ++it) {
        double mid = 0.5 * (lo + hi);
        Vec2 xm = rk4_step(vel, t, xa, mid);
        if ((sdf(xm) <= 0) == (fa <= 0))
          lo = mid;
        else
          hi = mid;
      }
      t_cross = t + 0.5 * (lo + hi);
      x_cross = rk4_step(vel, t, xa, 0.5 * (lo + hi));
      return true;
    }
    t += step;
    xa = xb;
    fa = fb;
  }
  return false;
}

}  // namespace detail

/// Entry/exit times of the anchor (t, x) for a level-set domain under the
/// given velocity, with the conventions sup{} = 0 and inf{} = T.
template <class Vel, class Sdf>
ExitTimes exit_times(Vel&& vel, Sdf&& sdf, double t, Vec2 x, double T,
                     double dt_flow) {
  ExitTimes et;
  double tc;
  Vec2 xc;
  if (t < T && detail::march_to_crossing(vel, sdf, t, x, T, dt_flow, tc, xc)) {
    et.t_out = tc;
    et.x_out = xc;
    et.exits = true;
  } else {
    et.t_out = T;
    et.exits = false;
  }
  if (t > 0 && detail::march_to_crossing(vel, sdf, t, x, 0.0, -dt_flow, tc, xc))
    et.t_in = tc;
  else
    et.t_in = 0;
  return et;
}

enum class OccupiedKind { from_zero, to_T };

/// Mask over Omega grid nodes whose whole backward (resp. forward)
/// trajectory stays in Omega; equals {t_in = 0} (resp. {t_out = T}).
template <class Vel>
std::vector<uint8_t> occupied_set(const DomainSpec& dom, Vel&& vel, double t,
                                  double T, OccupiedKind kind,
                                  double dt_flow) {
  const Grid& g = dom.grid;
  std::vector<uint8_t> mask(g.in_omega.size(), 0);
  auto sdf = [&](Vec2 p) { return dom.omega.sdf(p); };
  for (int flat : g.omega_interior) {
    Vec2 p = g.node(flat % g.nx, flat / g.nx);
    double tc;
    Vec2 xc;
    bool crossed;
    if (kind == OccupiedKind::from_zero)
      crossed = t > 0 && detail::march_to_crossing(vel, sdf, t, p, 0.0,
                                                   -dt_flow, tc, xc);
    else
      crossed =
          t < T && detail::march_to_crossing(vel, sdf, t, p, T, dt_flow, tc, xc);
    if (!crossed) mask[flat] = 1;
  }
  return mask;
}

struct OutflowCertificate {
  bool holds = false;
  double epsilon = 0;      // largest ladder clearance that passed
  double T0_star = 0, T1_star = 0;
  Vec2 worst_point{};      // argmin over samples of max_t d(X(t,T0,x), Omega)
  double worst_clearance = 0;  // that max_t distance at the worst point
};

namespace detail {

template <class Vel>
double min_max_clearance(const DomainSpec& dom, Vel&& vel, double T0,
                         double t_end, double dt_flow, Vec2& worst) {
  double global_min = std::numeric_limits<double>::infinity();
  std::vector<Vec2> samples;
  const Grid& g = dom.grid;
  for (int flat : g.omega_interior)
    samples.push_back(g.node(flat % g.nx, flat / g.nx));
  for (const auto& b : dom.boundary_omega) samples.push_back(b.pos);
  for (const Vec2& p0 : samples) {
    double best = dom.omega.dist(p0);
    Vec2 x = p0;
    double t = T0;
    while (t < t_end - 1e-15) {
      double step = std::min(dt_flow, t_end - t);
      x = rk4_step(vel, t, x, step);
      t += step;
      best = std::max(best, dom.omega.dist(x));
    }
    // ties resolved toward the deepest interior point
    if (best < global_min - 1e-15 ||
        (best <= global_min + 1e-15 &&
         dom.omega.sdf(p0) < dom.omega.sdf(worst))) {
      global_min = std::min(global_min, best);
      worst = p0;
    }
  }
  return global_min;
}

}  // namespace detail

/// Searches the clearance ladder {0.1, 0.05, 0.02, 0.01} and margins
/// {T/20, T/40}; reports the largest passing combination.
inline OutflowCertificate certify_outflow(const DomainSpec& dom,
                                          const TargetTrajectory& traj,
                                          double T, double dt_flow = -1) {
  if (dt_flow <= 0) dt_flow = T / kDefaultFlowSteps;
  auto vel = [&](double t, Vec2 p) { return traj.ybar_e(t, p); };
  const double eps_ladder[] = {0.1, 0.05, 0.02, 0.01};
  OutflowCertificate best;
  bool have_worst = false;
  for (double Tm : {T / 20, T / 40}) {
    double T0 = Tm, T1 = Tm;
    Vec2 worst;
    double clearance =
        detail::min_max_clearance(dom, vel, T0, T - 2 * T1, dt_flow, worst);
    if (!have_worst || clearance < best.worst_clearance) {
      best.worst_point = worst;
      best.worst_clearance = clearance;
      have_worst = true;
    }
    for (double eps : eps_ladder) {
      if (clearance >= 2 * eps && (!best.holds || eps > best.epsilon)) {
        best.holds = true;
        best.epsilon = eps;
        best.T0_star = T0;
        best.T1_star = T1;
      }
    }
  }
  return best;
}

/// Direct verification at a working (T0, T1): largest admissible clearance.
inline double outflow_clearance_at(const DomainSpec& dom,
                                   const TargetTrajectory& traj, double T,
                                   double T0, double T1, double dt_flow = -1) {
  if (dt_flow <= 0) dt_flow = T / kDefaultFlowSteps;
  auto vel = [&](double t, Vec2 p) { return traj.ybar_e(t, p); };
  Vec2 worst;
  return detail::min_max_clearance(dom, vel, T0, T - 2 * T1, dt_flow, worst);
}

struct FlowDeviationReport {
  double max_dev = 0;
  double gronwall_bound = 0;
  double lipschitz_L = 0;
  bool within_bound = false;
};

/// Compares the perturbed flow against the target flow on sample anchors and
/// checks the Gronwall envelope sqrt(T) e^{LT} ||uhat||_{L2(0,T;Linf)}.
template <class UhatFn>
FlowDeviationReport flow_deviation(const DomainSpec& dom,
                                   const TargetTrajectory& traj, UhatFn&& uhat,
                                   double T,
                                   const std::vector<std::pair<double, Vec2>>&
                                       anchors,
                                   double dt_flow = -1) {
  if (dt_flow <= 0) dt_flow = T / kDefaultFlowSteps;
  auto base = [&](double t, Vec2 p) { return traj.ybar_e(t, p); };
  auto pert = [&](double t, Vec2 p) { return traj.ybar_e(t, p) + uhat(t, p); };

  FlowDeviationReport rep;
  // L = ||grad ybar||_inf by centered differences over Omega nodes
  const Grid& g = dom.grid;
  double L = 0;
  for (int flat : g.omega_interior) {
    Vec2 p = g.node(flat % g.nx, flat / g.nx);
    for (int k = 0; k <= 4; ++k) {
      double t = T * k / 4.0;
      Vec2 dx = traj.ybar(t, {p.x + g.h, p.y}) - traj.ybar(t, {p.x - g.h, p.y});
      Vec2 dy = traj.ybar(t, {p.x, p.y + g.h}) - traj.ybar(t, {p.x, p.y - g.h});
      L = std::max({L, std::abs(dx.x) / (2 * g.h), std::abs(dx.y) / (2 * g.h),
                    std::abs(dy.x) / (2 * g.h), std::abs(dy.y) / (2 * g.h)});
    }
  }
  rep.lipschitz_L = L;

  // ||uhat||_{L2(0,T;Linf)} by trapezoid over 200 time samples, sup over
  // Omega nodes
  int nt = 200;
  double accum = 0;
  for (int k = 0; k <= nt; ++k) {
    double t = T * k / nt;
    double sup = 0;
    for (int flat : g.omega_interior) {
      Vec2 p = g.node(flat % g.nx, flat / g.nx);
      sup = std::max(sup, norm(uhat(t, p)));
    }
    double w = (k == 0 || k == nt) ? 0.5 : 1.0;
    accum += w * sup * sup * (T / nt);
  }
  rep.gronwall_bound = std::sqrt(T) * std::exp(L * T) * std::sqrt(accum);

  for (const auto& [t_anchor, x] : anchors) {
    for (int k = 0; k <= 8; ++k) {
      double tau = T * k / 8.0;
      Vec2 a = flow_map(base, tau, t_anchor, x, dt_flow);
      Vec2 b = flow_map(pert, tau, t_anchor, x, dt_flow);
      rep.max_dev = std::max(rep.max_dev, norm(a - b));
    }
  }
  rep.within_bound = rep.max_dev <= rep.gronwall_bound * 1.01 + 1e-14;
  return rep;
}

}  // namespace carlab
