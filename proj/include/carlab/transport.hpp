#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "carlab/fields.hpp"
#include "carlab/flow.hpp"
#include "carlab/geometry.hpp"
#include "carlab/trajectory.hpp"
#include "carlab/weights.hpp"

namespace carlab {

/// Per-anchor characteristic data of the perturbed flow: entry/exit times
/// of Omega, forward/backward source integrals, transported indicator.
struct CharacteristicSample {
  double t_in = 0, t_out = 0;
  double rho_f = 0, rho_b = 0;
  uint8_t chi = 0;
  Vec2 foot{};  // X(0, t, x), meaningful when t_in = 0
};

/// One backward and one forward march from (t, x) with trapezoid
/// accumulation of uhat . grad sigma along the trajectory; crossings by
/// bisection. vel_pert and src_pert are usually the same uhat; they are
/// split so the linearity oracle can freeze the flow.
template <class VelPert, class SrcPert, class Rho0Fn>
CharacteristicSample density_characteristic(const DomainSpec& dom,
                                            const TargetTrajectory& traj,
                                            VelPert&& vel_pert,
                                            SrcPert&& src_pert, Rho0Fn&& rho0,
                                            double T, double T0, double t,
                                            Vec2 x, double dt_char) {
  auto vel = [&](double tt, Vec2 p) {
    return traj.ybar_e(tt, p) + vel_pert(tt, p);
  };
  auto src = [&](double tt, Vec2 p) {
    return dot(src_pert(tt, p), traj.grad_sigma(tt, p));
  };
  auto sdf = [&](Vec2 p) { return dom.omega.sdf(p); };

  CharacteristicSample cs;

  auto march = [&](double direction, double t_limit, double& t_stop,
                   Vec2& p_stop, double& integral) {
    double tt = t;
    Vec2 p = x;
    double f_prev = src(tt, p);
    integral = 0;
    while (direction * (t_limit - tt) > 1e-15) {
      double step = std::min(dt_char, direction * (t_limit - tt)) * direction;
      Vec2 p1 = rk4_step(vel, tt, p, step);
      if (sdf(p1) > 0) {
        double lo = 0, hi = step;
        for (int it = 0; it < 40; ++it) {
          double mid = 0.5 * (lo + hi);
          if (sdf(rk4_step(vel, tt, p, mid)) <= 0)
            lo = mid;
          else
            hi = mid;
        }
        double sub = 0.5 * (lo + hi);
        Vec2 pc = rk4_step(vel, tt, p, sub);
        integral += 0.5 * (f_prev + src(tt + sub, pc)) * std::abs(sub);
        t_stop = tt + sub;
        p_stop = pc;
        return true;
      }
      double f_here = src(tt + step, p1);
      integral += 0.5 * (f_prev + f_here) * std::abs(step);
      f_prev = f_here;
      p = p1;
      tt += step;
    }
    t_stop = t_limit;
    p_stop = p;
    return false;
  };

  double integral, t_stop;
  Vec2 p_stop;
  // backward: the accumulated integral equals int_{t_stop}^{t} src d tau
  bool crossed_back = march(-1.0, 0.0, t_stop, p_stop, integral);
  if (!crossed_back) {
    cs.t_in = 0;
    cs.foot = p_stop;
    cs.rho_f = rho0(p_stop) - integral;
  } else {
    cs.t_in = t_stop;
    cs.rho_f = -integral;  // zero inflow trace
  }
  cs.chi = (t < T0 || cs.t_in < T0) ? 1 : 0;

  // forward: integral equals int_{t}^{t_out} src along the path. Solving
  // the backward problem (rho_b(t_out) = 0, d rho_b/dt = -src along the
  // characteristic) gives rho_b(t) = + int_{t}^{t_out} src.
  bool crossed_fwd = march(1.0, T, t_stop, p_stop, integral);
  cs.t_out = crossed_fwd ? t_stop : T;
  cs.rho_b = integral;
  return cs;
}

struct DensityControlResult {
  FieldSeries rho, rho_f, rho_b, chi;
  double terminal_norm = 0;  // Linf over Omega at the last time node
};

struct TransportOptions {
  double dt_char = -1;  // default: the time-grid step
  bool certificate_ok = false;
  double tol_terminal = 1e-8;  // split by the sigma regime at the call site
};

/// Forward/backward/glue construction of the controlled density on the
/// whole time grid; rho = (1 - chi) rho_b + chi rho_f pointwise.
template <class UhatFn>
DensityControlResult solve_density(const DomainSpec& dom,
                                   const TargetTrajectory& traj,
                                   UhatFn&& uhat, const Field& rho0,
                                   const TimeGrid& tg, double T0,
                                   const TransportOptions& opt) {
  if (!opt.certificate_ok)
    throw std::runtime_error(
        "solve_density: outflow certificate absent, rho(T) = 0 cannot be "
        "guaranteed");
  const Grid& g = dom.grid;
  const double T = traj.cfg.T;
  double dt_char = opt.dt_char > 0 ? opt.dt_char : tg.dt;
  auto r0 = [&](Vec2 p) { return rho0.interp(p); };

  DensityControlResult out;
  out.rho = FieldSeries(g, tg);
  out.rho_f = FieldSeries(g, tg);
  out.rho_b = FieldSeries(g, tg);
  out.chi = FieldSeries(g, tg);

  for (int k = 0; k <= tg.nt; ++k) {
    double t = tg.t(k);
    for (int flat : g.omega_interior) {
      Vec2 x = g.node(flat % g.nx, flat / g.nx);
      CharacteristicSample cs = density_characteristic(
          dom, traj, uhat, uhat, r0, T, T0, t, x, dt_char);
      out.rho_f.at[k].v[flat] = cs.rho_f;
      out.rho_b.at[k].v[flat] = cs.rho_b;
      out.chi.at[k].v[flat] = cs.chi;
      out.rho.at[k].v[flat] = cs.chi ? cs.rho_f : cs.rho_b;
    }
  }
  out.terminal_norm = linf_norm(out.rho.at[tg.nt], g.omega_interior);
  if (out.terminal_norm > opt.tol_terminal)
    throw std::runtime_error("solve_density: terminal norm " +
                             std::to_string(out.terminal_norm) +
                             " above tolerance");
  return out;
}

/// Pointwise glued density (exact along its characteristic), for residual
/// probes and oracles.
template <class UhatFn, class Rho0Fn>
double density_pointwise(const DomainSpec& dom, const TargetTrajectory& traj,
                         UhatFn&& uhat, Rho0Fn&& rho0, double T0, double t,
                         Vec2 x, double dt_char) {
  CharacteristicSample cs = density_characteristic(
      dom, traj, uhat, uhat, rho0, traj.cfg.T, T0, t, x, dt_char);
  return cs.chi ? cs.rho_f : cs.rho_b;
}

// individual operation views over the shared characteristic core

template <class UhatFn>
Field solve_rho_forward(const DomainSpec& dom, const TargetTrajectory& traj,
                        UhatFn&& uhat, const Field& rho0, double T0, double t,
                        double dt_char) {
  Field out(dom.grid);
  const Grid& g = dom.grid;
  auto r0 = [&](Vec2 p) { return rho0.interp(p); };
  for (int flat : g.omega_interior) {
    Vec2 x = g.node(flat % g.nx, flat / g.nx);
    out.v[flat] = density_characteristic(dom, traj, uhat, uhat, r0, traj.cfg.T,
                                         T0, t, x, dt_char)
                      .rho_f;
  }
  return out;
}

template <class UhatFn>
Field solve_rho_backward(const DomainSpec& dom, const TargetTrajectory& traj,
                         UhatFn&& uhat, double T0, double t, double dt_char) {
  Field out(dom.grid);
  const Grid& g = dom.grid;
  auto r0 = [](Vec2) { return 0.0; };
  for (int flat : g.omega_interior) {
    Vec2 x = g.node(flat % g.nx, flat / g.nx);
    out.v[flat] = density_characteristic(dom, traj, uhat, uhat, r0, traj.cfg.T,
                                         T0, t, x, dt_char)
                      .rho_b;
  }
  return out;
}

template <class UhatFn>
Field solve_chi(const DomainSpec& dom, const TargetTrajectory& traj,
                UhatFn&& uhat, double T0, double t, double dt_char) {
  Field out(dom.grid);
  const Grid& g = dom.grid;
  auto r0 = [](Vec2) { return 0.0; };
  for (int flat : g.omega_interior) {
    Vec2 x = g.node(flat % g.nx, flat / g.nx);
    out.v[flat] = density_characteristic(dom, traj, uhat, uhat, r0, traj.cfg.T,
                                         T0, t, x, dt_char)
                      .chi;
  }
  return out;
}

struct DensityNorms {
  double lhs_l2 = 0;       // ||aleph rho||_{L2(Omega_T)}
  double rhs_l2_u = 0;     // ||aleph uhat||_{L2(Omega_T)}
  double rhs_l2_rho0 = 0;  // e^{s phi*(0)} ||rho0||_{L2}
  double c_emp_l2 = 0;
  double lhs_linf = 0;     // sup e^{E(t)} |rho|
  double rhs_linf_u = 0;   // ||e^{E(t)} uhat||_{L2(0,T;Linf)}
  double rhs_linf_rho0 = 0;
  double c_emp_linf = 0;
};

/// Both sides of the weighted density estimates, evaluated with the
/// kappa-rescaled exponent families (one consistent offset per family).
template <class UhatFn>
DensityNorms density_weighted_norms(const DensityControlResult& res,
                                    const WeightSet& ws, const DomainSpec& dom,
                                    UhatFn&& uhat, const Field& rho0) {
  const Grid& g = dom.grid;
  const TimeGrid& tg = res.rho.tg;
  DensityNorms out;

  // family A: log aleph = resc(phi - phi_min) - 2 log xi, normalized by its
  // max over the space-time grid
  double famA_max = -1e300;
  for (int k = 0; k <= tg.nt; ++k)
    for (int flat : g.omega_interior)
      famA_max = std::max(famA_max,
                          ws.rphi_at(k, flat) - 2 * ws.log_xi_at(k, flat));
  auto wA = [&](int k, int flat) {
    return std::exp(ws.rphi_at(k, flat) - 2 * ws.log_xi_at(k, flat) - famA_max);
  };

  double l2r = 0, l2u = 0;
  for (int k = 0; k <= tg.nt; ++k) {
    double sr = 0, su = 0;
    for (int flat : g.omega_interior) {
      double w = wA(k, flat);
      Vec2 x = g.node(flat % g.nx, flat / g.nx);
      double r = res.rho.at[k].v[flat];
      Vec2 uh = uhat(tg.t(k), x);
      sr += w * w * r * r;
      su += w * w * dot(uh, uh);
    }
    l2r += tg.quad_w(k) * sr * g.h * g.h * tg.dt;
    l2u += tg.quad_w(k) * su * g.h * g.h * tg.dt;
  }
  out.lhs_l2 = std::sqrt(l2r);
  out.rhs_l2_u = std::sqrt(l2u);
  double w0 = std::exp(ws.rphi_star_at(0) - famA_max);
  out.rhs_l2_rho0 = w0 * l2_norm(rho0, g.omega_interior);
  double denom = out.rhs_l2_u + out.rhs_l2_rho0;
  out.c_emp_l2 = denom > 0 ? out.lhs_l2 / denom : 0.0;

  // family B: E(t) = s lambda e^{6 lambda (m+1)} theta(t) / 2, rescaled with
  // the same factor and normalized by its max
  double capB = ws.p.lambda * std::exp(6 * ws.p.lambda * (ws.p.m + 1)) / 2;
  double Bmax = -1e300;
  for (int k = 0; k <= tg.nt; ++k)
    Bmax = std::max(Bmax, ws.resc * capB * ws.theta_at(k));
  Bmax = std::max(Bmax, ws.resc * capB * 2.0);
  auto wB = [&](double th) { return std::exp(ws.resc * capB * th - Bmax); };
  double linf_lhs = 0, l2u_B = 0;
  for (int k = 0; k <= tg.nt; ++k) {
    double w = wB(ws.theta_at(k));
    double sup_u = 0;
    for (int flat : g.omega_interior) {
      Vec2 x = g.node(flat % g.nx, flat / g.nx);
      linf_lhs = std::max(linf_lhs, w * std::abs(res.rho.at[k].v[flat]));
      sup_u = std::max(sup_u, norm(uhat(tg.t(k), x)));
    }
    l2u_B += tg.quad_w(k) * w * w * sup_u * sup_u * tg.dt;
  }
  out.lhs_linf = linf_lhs;
  out.rhs_linf_u = std::sqrt(l2u_B);
  out.rhs_linf_rho0 = wB(2.0) * linf_norm(rho0, g.omega_interior);
  double denB = out.rhs_linf_u + out.rhs_linf_rho0;
  out.c_emp_linf = denB > 0 ? out.lhs_linf / denB : 0.0;
  return out;
}

}  // namespace carlab
