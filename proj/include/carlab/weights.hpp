#pragma once

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <vector>

#include "carlab/fields.hpp"
#include "carlab/flow.hpp"
#include "carlab/geometry.hpp"
#include "carlab/trajectory.hpp"

namespace carlab {

struct WeightParams {
  double s = 2.0;
  double lambda = 1.0;
  double m = 1.0;
  double T = 1.0;
  double T0 = 0.045;
  double T1 = 0.045;
  double kappa = 20.0;     // rescaled exponent cap for solver weights
  double dt_min_frac = 1e-3;  // dt_min = frac * T; weights are evaluated
                              // on [0, T - dt_min] only

  double dt_min() const { return dt_min_frac * T; }
  double t_check() const { return T - dt_min(); }
  double mu() const {
    return s * lambda * lambda * std::exp(lambda * (6 * m - 4));
  }
  void validate() const {
    if (s < 1 || lambda < 1 || m < 1)
      throw std::invalid_argument("weights: need s, lambda, m >= 1");
    if (T1 > 0.25 || T0 <= 0 || T1 <= 0 || T0 + 2 * T1 >= T)
      throw std::invalid_argument(
          "weights: need T1 <= 1/4 and T0 + 2 T1 < T");
    if (mu() < 2) throw std::invalid_argument("weights: mu < 2");
  }
};

namespace detail {

/// Quintic matching value/first/second derivative at both ends of [0, L].
struct Quintic {
  std::array<double, 6> c{};

  static Quintic hermite(double L, double p0, double v0, double a0, double p1,
                         double v1, double a1) {
    // solve the 6x6 Vandermonde-with-derivatives system directly
    double A[6][7] = {};
    auto fill_row = [&](int r, double x, int der) {
      for (int k = 0; k < 6; ++k) {
        if (k < der) {
          A[r][k] = 0.0;
          continue;
        }
        double coef = 1;
        int e = k;
        for (int d = 0; d < der; ++d) coef *= e--;
        A[r][k] = coef * std::pow(x, e);
      }
    };
    fill_row(0, 0, 0);
    fill_row(1, 0, 1);
    fill_row(2, 0, 2);
    fill_row(3, L, 0);
    fill_row(4, L, 1);
    fill_row(5, L, 2);
    double rhs[6] = {p0, v0, a0, p1, v1, a1};
    for (int r = 0; r < 6; ++r) A[r][6] = rhs[r];
    for (int col = 0; col < 6; ++col) {  // Gaussian elimination, partial pivot
      int piv = col;
      for (int r = col + 1; r < 6; ++r)
        if (std::abs(A[r][col]) > std::abs(A[piv][col])) piv = r;
      for (int k = 0; k < 7; ++k) std::swap(A[col][k], A[piv][k]);
      for (int r = 0; r < 6; ++r) {
        if (r == col) continue;
        double f = A[r][col] / A[col][col];
        for (int k = col; k < 7; ++k) A[r][k] -= f * A[col][k];
      }
    }
    Quintic q;
    for (int k = 0; k < 6; ++k) q.c[k] = A[k][6] / A[k][k];
    return q;
  }

  double value(double x) const {
    double r = 0;
    for (int k = 5; k >= 0; --k) r = r * x + c[k];
    return r;
  }
  double d1(double x) const {
    double r = 0;
    for (int k = 5; k >= 1; --k) r = r * x + k * c[k];
    return r;
  }
  double d2(double x) const {
    double r = 0;
    for (int k = 5; k >= 2; --k) r = r * x + k * (k - 1) * c[k];
    return r;
  }
};

}  // namespace detail

/// Piecewise time weight theta: 1 + (1 - t/T0)^mu on [0, T0], 1 on
/// [T0, T-2T1], (T-t)^{-m} on [T-T1, T), quintic C^2 gluing in between;
/// monotone on the gluing interval (log-space quintic fallback, reject if
/// both blends fail).
struct ThetaWeight {
  WeightParams p;
  detail::Quintic blend;
  bool log_blend = false;

  explicit ThetaWeight(const WeightParams& params) : p(params) {
    p.validate();
    double L = p.T1;  // gluing interval [T-2T1, T-T1]
    double V = std::pow(p.T1, -p.m);
    blend = detail::Quintic::hermite(L, 1.0, 0.0, 0.0, V,
                                     p.m * std::pow(p.T1, -p.m - 1),
                                     p.m * (p.m + 1) * std::pow(p.T1, -p.m - 2));
    if (!monotone_on_blend()) {
      log_blend = true;
      blend = detail::Quintic::hermite(L, 0.0, 0.0, 0.0, p.m * std::log(1 / p.T1),
                                       p.m / p.T1, p.m / (p.T1 * p.T1));
      if (!monotone_on_blend())
        throw std::invalid_argument(
            "theta: non-monotone gluing after log fallback");
    }
  }

  bool monotone_on_blend() const {
    for (int k = 0; k <= 1000; ++k) {
      double x = p.T1 * k / 1000.0;
      double d = log_blend ? blend.d1(x) * std::exp(blend.value(x))
                           : blend.d1(x);
      if (d < -1e-9) return false;
    }
    return true;
  }

  double value(double t) const {
    if (t <= p.T0) {
      double u = 1.0 - t / p.T0;
      return 1.0 + (u > 0 ? std::exp(p.mu() * std::log(u)) : 0.0);
    }
    if (t <= p.T - 2 * p.T1) return 1.0;
    if (t < p.T - p.T1) {
      double x = t - (p.T - 2 * p.T1);
      return log_blend ? std::exp(blend.value(x)) : blend.value(x);
    }
    return std::pow(p.T - t, -p.m);
  }

  double d1(double t) const {
    if (t <= p.T0) {
      double u = 1.0 - t / p.T0;
      double mu = p.mu();
      return u > 0 ? -(mu / p.T0) * std::exp((mu - 1) * std::log(u)) : 0.0;
    }
    if (t <= p.T - 2 * p.T1) return 0.0;
    if (t < p.T - p.T1) {
      double x = t - (p.T - 2 * p.T1);
      if (log_blend) return blend.d1(x) * std::exp(blend.value(x));
      return blend.d1(x);
    }
    return p.m * std::pow(p.T - t, -p.m - 1);
  }

  double d2(double t) const {
    if (t <= p.T0) {
      double u = 1.0 - t / p.T0;
      double mu = p.mu();
      return u > 0 ? (mu * (mu - 1) / (p.T0 * p.T0)) *
                         std::exp((mu - 2) * std::log(u))
                   : 0.0;
    }
    if (t <= p.T - 2 * p.T1) return 0.0;
    if (t < p.T - p.T1) {
      double x = t - (p.T - 2 * p.T1);
      if (log_blend) {
        double g = std::exp(blend.value(x));
        return (blend.d2(x) + blend.d1(x) * blend.d1(x)) * g;
      }
      return blend.d2(x);
    }
    return p.m * (p.m + 1) * std::pow(p.T - t, -p.m - 2);
  }
};

/// Transported weight function: psi_hat follows the characteristics of the
/// extension field, with terminal bump psi_hat_T(x) = Mpeak (1 - zeta(x)^2)
/// whose unique critical point sits at the ray center inside w_tilde.
/// psi_tilde = a psi_hat + b is the [0,1]-normalized version.
struct PsiCache {
  const DomainSpec* dom = nullptr;
  const TargetTrajectory* traj = nullptr;
  TimeGrid tg;
  double T = 1;
  double Mpeak = 2;
  double a = 0, b = 0;

  std::vector<Field> tilde;                 // per time node, on O nodes
  std::vector<std::vector<uint8_t>> cas1;   // 1 = carried to t = T (case 1)
  std::vector<double> level_min, level_max;

  double psi_hat_T(Vec2 x) const {
    // conical profile: gradient magnitude Mpeak |grad zeta| >= Mpeak / L_max
    // everywhere off the apex, which sits on a lattice node inside w_tilde
    return Mpeak * (1.0 - traj->zeta(x));
  }

  /// Exact pointwise evaluation by following the trajectory from (t, x).
  double psi_hat(double t, Vec2 x, double dt_flow = -1, bool* case1 = nullptr) const {
    if (dt_flow <= 0) dt_flow = T / kDefaultFlowSteps;
    auto vel = [&](double tt, Vec2 p) { return traj->ybar_e(tt, p); };
    auto sdf = [&](Vec2 p) { return dom->O.sdf(p); };
    if (dom->O.sdf(x) >= 0) {  // on or outside dO: boundary trace
      if (case1) *case1 = false;
      return t - T;
    }
    double tc;
    Vec2 xc;
    if (t < T &&
        detail_flow_crossing(vel, sdf, t, x, T, dt_flow, tc, xc)) {
      if (case1) *case1 = false;
      return tc - T;
    }
    if (case1) *case1 = true;
    Vec2 xT = flow_map(vel, T, t, x, dt_flow);
    return psi_hat_T(xT);
  }

  template <class Vel, class Sdf>
  static bool detail_flow_crossing(Vel&& vel, Sdf&& sdf, double t, Vec2 x,
                                   double T, double dt, double& tc, Vec2& xc) {
    return detail::march_to_crossing(vel, sdf, t, x, T, dt, tc, xc);
  }

  double psi_tilde_pointwise(double t, Vec2 x, double dt_flow = -1) const {
    return a * psi_hat(t, x, dt_flow) + b;
  }

  double tilde_at(int k, int flat) const { return tilde[k].v[flat]; }
};

struct PsiReport {
  double alpha_min = 0;        // min |grad psi_tilde| off w_tilde
  double sigma_jump = 0;       // worst straddling-pair jump estimate
  double crit_dist = 0;        // max distance of discrete critical pts to w_tilde
  double bc2_deviation = 0;    // max |1 + ybar_e(T).grad psi_hat_T| on outflow dO
  double dpsi_dn_max = 0;      // max inward-minus-boundary violation
  double range_min = 0, range_max = 0;
};

/// Builds the transported weight cache on the time grid. Fast path for the
/// autonomous (constant-velocity) built-ins: one trajectory per node serves
/// every anchor time. Errors follow the construction contract: critical
/// points of psi_hat_T outside w_tilde, or a jump across the exit interface.
inline std::shared_ptr<PsiCache> build_psi(const DomainSpec& dom,
                                           const TargetTrajectory& traj,
                                           const TimeGrid& tg,
                                           PsiReport* report = nullptr) {
  auto pc = std::make_shared<PsiCache>();
  pc->dom = &dom;
  pc->traj = &traj;
  pc->tg = tg;
  pc->T = traj.cfg.T;
  pc->Mpeak = traj.cfg.T;
  pc->a = 1.0 / (pc->T + pc->Mpeak);
  pc->b = pc->a * pc->T;

  const Grid& g = dom.grid;
  const double T = pc->T;
  int nt = tg.nt;
  pc->tilde.assign(nt + 1, Field(g));
  pc->cas1.assign(nt + 1, std::vector<uint8_t>(g.in_O.size(), 0));

  auto vel = [&](double tt, Vec2 p) { return traj.ybar_e(tt, p); };
  auto sdf = [&](Vec2 p) { return dom.O.sdf(p); };
  bool autonomous = traj.cfg.velocity == VelocityKind::constant;
  double dt_fine = tg.dt / 4;

  if (autonomous) {
    // lag-based: trajectory from (0, x); anchor (t_k, x) exits at
    // t_k + tau_exit(x) and reaches T at lag T - t_k
    std::vector<Vec2> lagpos(nt + 2);
    for (int flat : g.O_interior) {
      Vec2 x = g.node(flat % g.nx, flat / g.nx);
      double tau_exit = -1;
      Vec2 x0 = x;
      double lag = 0;
      lagpos[0] = x;
      int rec = 1;
      int steps_per_node = std::max(1, int(std::round(tg.dt / dt_fine)));
      double step = tg.dt / steps_per_node;
      bool outside = false;
      auto advance = [&](double st) {
        Vec2 x1 = rk4_step(vel, lag, x0, st);
        if (!outside && sdf(x1) > 0) {
          double lo = 0, hi = st;
          for (int it = 0; it < 40; ++it) {
            double mid = 0.5 * (lo + hi);
            if (sdf(rk4_step(vel, lag, x0, mid)) <= 0)
              lo = mid;
            else
              hi = mid;
          }
          tau_exit = lag + 0.5 * (lo + hi);
          outside = true;
        }
        x0 = x1;
        lag += st;
      };
      for (int k = 0; k < nt; ++k) {
        for (int ss = 0; ss < steps_per_node; ++ss) advance(step);
        lagpos[rec++] = x0;
      }
      // tail up to lag = T (the time grid stops at T - dt_min)
      double tail = T - tg.horizon();
      if (tail > 0)
        for (int ss = 0; ss < steps_per_node; ++ss) advance(tail / steps_per_node);
      lagpos[nt + 1] = x0;
      for (int k = 0; k <= nt; ++k) {
        double t = tg.t(k);
        double hat;
        bool c1;
        if (tau_exit >= 0 && t + tau_exit < T) {
          hat = t + tau_exit - T;
          c1 = false;
        } else {
          double want = T - t;
          Vec2 xT;
          if (want >= tg.horizon()) {
            double al = tail > 0 ? (want - tg.horizon()) / tail : 0.0;
            xT = (1 - al) * lagpos[nt] + al * lagpos[nt + 1];
          } else {
            double fl = want / tg.dt;
            int j = std::min(int(fl), nt - 1);
            double al = fl - j;
            xT = (1 - al) * lagpos[j] + al * lagpos[j + 1];
          }
          hat = pc->psi_hat_T(xT);
          c1 = true;
        }
        pc->tilde[k].v[flat] = pc->a * hat + pc->b;
        pc->cas1[k][flat] = c1;
      }
    }
  } else {
    for (int k = 0; k <= nt; ++k) {
      double t = tg.t(k);
      for (int flat : g.O_interior) {
        Vec2 x = g.node(flat % g.nx, flat / g.nx);
        bool c1;
        double hat = pc->psi_hat(t, x, dt_fine, &c1);
        pc->tilde[k].v[flat] = pc->a * hat + pc->b;
        pc->cas1[k][flat] = c1;
      }
    }
  }

  pc->level_min.resize(nt + 1);
  pc->level_max.resize(nt + 1);
  for (int k = 0; k <= nt; ++k) {
    double lo = 1e300, hi = -1e300;
    for (int flat : g.O_interior) {
      lo = std::min(lo, pc->tilde[k].v[flat]);
      hi = std::max(hi, pc->tilde[k].v[flat]);
    }
    // the boundary trace a (t - T) + b is the infimum over closure(O)
    double btrace = pc->a * (tg.t(k) - T) + pc->b;
    pc->level_min[k] = std::min(lo, btrace);
    pc->level_max[k] = hi;
  }

  // --- validation ---
  PsiReport rep;

  // critical points of psi_hat_T: discrete gradient small => inside w_tilde
  double gscale = pc->Mpeak;  // typical gradient scale
  for (int flat : g.O_interior) {
    Vec2 p = g.node(flat % g.nx, flat / g.nx);
    double gx = (pc->psi_hat_T({p.x + g.h, p.y}) -
                 pc->psi_hat_T({p.x - g.h, p.y})) / (2 * g.h);
    double gy = (pc->psi_hat_T({p.x, p.y + g.h}) -
                 pc->psi_hat_T({p.x, p.y - g.h})) / (2 * g.h);
    if (std::hypot(gx, gy) < 0.02 * gscale)
      rep.crit_dist = std::max(rep.crit_dist, dom.w_tilde.dist(p));
  }
  if (rep.crit_dist > 0)
    throw std::runtime_error(
        "build_psi: critical point of psi_hat_T outside w_tilde");

  // Jump across the exit interface Sigma_T, measured where it is sharp:
  // at fixed x the regime flips at the anchor time t* with t_out = T;
  // bisect t* between flagged cache levels and compare both one-sided
  // limits of the exact pointwise evaluation (psi_tilde scale).
  {
    std::vector<std::pair<int, int>> flips;  // (k, flat)
    for (int k = 0; k + 1 <= nt; ++k)
      for (int flat : g.O_interior)
        if (pc->cas1[k][flat] != pc->cas1[k + 1][flat])
          flips.push_back({k, flat});
    size_t stride = std::max<size_t>(1, flips.size() / 160);
    double dtf = tg.dt / 4;
    for (size_t idx = 0; idx < flips.size(); idx += stride) {
      auto [k, flat] = flips[idx];
      Vec2 x = g.node(flat % g.nx, flat / g.nx);
      double lo = tg.t(k), hi = tg.t(k + 1);
      bool clo;
      pc->psi_hat(lo, x, dtf, &clo);
      for (int it = 0; it < 30; ++it) {
        double mid = 0.5 * (lo + hi);
        bool cm;
        pc->psi_hat(mid, x, dtf, &cm);
        if (cm == clo)
          lo = mid;
        else
          hi = mid;
      }
      double delta = 1e-6 * T;
      double va = pc->psi_hat(std::max(0.0, lo - delta), x, dtf);
      double vb = pc->psi_hat(std::min(T, hi + delta), x, dtf);
      rep.sigma_jump = std::max(rep.sigma_jump, pc->a * std::abs(va - vb));
    }
  }
  if (rep.sigma_jump > 1e-3)
    throw std::runtime_error(
        "build_psi: psi_hat discontinuity across the exit interface "
        "(compatibility conditions violated)");

  // |grad psi_tilde| >= alpha off w_tilde, one-sided at mask edges
  rep.alpha_min = 1e300;
  for (int k = 0; k <= nt; ++k) {
    const Field& f = pc->tilde[k];
    double btrace = pc->a * (tg.t(k) - T) + pc->b;
    // value at a neighbor slot: interior cache value, or the boundary trace
    // when the neighbor crosses a transversal outflow piece of dO
    auto val = [&](int i, int j, bool& ok) {
      if (g.valid(i, j) && g.in_O[g.idx(i, j)]) {
        ok = true;
        return f.v[g.idx(i, j)];
      }
      Vec2 q = g.node(i, j);
      if (g.valid(i, j) && dom.O.sdf(q) < 3 * g.h) {
        Vec2 nrm = dom.O.sdf_grad(q);
        if (dot(traj.ybar_e(tg.t(k), q), nrm) > 0.05) {
          ok = true;
          return btrace;
        }
      }
      ok = false;
      return 0.0;
    };
    for (int flat : g.O_interior) {
      Vec2 p = g.node(flat % g.nx, flat / g.nx);
      if (dom.w_tilde.dist(p) < g.h) continue;
      int i = flat % g.nx, j = flat / g.nx;
      bool e, w, n, s;
      double fe = val(i + 1, j, e), fw = val(i - 1, j, w);
      double fn = val(i, j + 1, n), fs = val(i, j - 1, s);
      double fc = f.v[flat];
      double gx = 0, gy = 0;
      if (e && w)
        gx = (fe - fw) / (2 * g.h);
      else if (e)
        gx = (fe - fc) / g.h;
      else if (w)
        gx = (fc - fw) / g.h;
      if (n && s)
        gy = (fn - fs) / (2 * g.h);
      else if (n)
        gy = (fn - fc) / g.h;
      else if (s)
        gy = (fc - fs) / g.h;
      rep.alpha_min = std::min(rep.alpha_min, std::hypot(gx, gy));
    }
  }

  // second compatibility condition, reported: ybar_e(T).grad psi_hat_T vs -1
  for (const auto& bp : dom.boundary_O) {
    Vec2 v = traj.ybar_e(T, bp.pos);
    if (dot(v, bp.normal) < 0.05) continue;  // tangential contact excluded
    Vec2 q = bp.pos - (2 * g.h) * bp.normal;
    double d = 2 * g.h;
    double slope = (pc->psi_hat_T(bp.pos) - pc->psi_hat_T(q)) / d;
    Vec2 gradT = slope * bp.normal;  // tangential derivative vanishes on dO
    rep.bc2_deviation =
        std::max(rep.bc2_deviation, std::abs(1.0 + dot(v, gradT)));
  }

  // boundary monotonicity: psi_tilde must not decrease inward
  for (int k = 0; k <= nt; ++k) {
    double t = tg.t(k);
    double btrace = pc->a * (t - T) + pc->b;
    for (const auto& bp : dom.boundary_O) {
      Vec2 v = traj.ybar_e(t, bp.pos);
      if (dot(v, bp.normal) < 0.05) continue;
      Vec2 q = bp.pos - (1.5 * g.h) * bp.normal;
      if (dom.O.sdf(q) >= 0) continue;
      double inner = pc->tilde[k].interp(q);
      rep.dpsi_dn_max = std::max(rep.dpsi_dn_max, btrace - inner);
    }
  }

  rep.range_min = *std::min_element(pc->level_min.begin(), pc->level_min.end());
  rep.range_max = *std::max_element(pc->level_max.begin(), pc->level_max.end());
  if (report) *report = rep;
  return pc;
}

/// Full weight family at given parameters; exact values where representable
/// and logs always. phi in the compensated product form keeps precision.
struct WeightSet {
  WeightParams p;
  ThetaWeight theta;
  std::shared_ptr<const PsiCache> psi;
  double phi_cap = 0;      // lambda e^{6 lambda (m+1)}
  double phi_min = 0, phi_max = 0, resc = 0;  // resc * (phi - phi_min) in [0,kappa]

  WeightSet(const WeightParams& params, std::shared_ptr<const PsiCache> pc)
      : p(params), theta(params), psi(std::move(pc)) {
    phi_cap = p.lambda * std::exp(6 * p.lambda * (p.m + 1));
    // phi decreasing in psi: extremes from the cached levels and theta range
    phi_min = 1e300;
    phi_max = -1e300;
    for (int k = 0; k <= psi->tg.nt; ++k) {
      double th = theta.value(psi->tg.t(k));
      for (double pt : {psi->level_min[k], psi->level_max[k]}) {
        double v = phi_of(th, pt);
        phi_min = std::min(phi_min, v);
        phi_max = std::max(phi_max, v);
      }
    }
    resc = p.kappa / std::max(phi_max - phi_min, 1e-300);
  }

  double psi_of_tilde(double tilde) const { return tilde + 6 * p.m; }
  double phi_of(double th, double tilde) const {
    double psi_v = psi_of_tilde(tilde);
    double expo = p.lambda * psi_v - 6 * p.lambda * (p.m + 1) - std::log(p.lambda);
    return th * phi_cap * (1.0 - std::exp(expo));
  }
  double log_xi_of(double th, double tilde) const {
    return std::log(th) + p.lambda * psi_of_tilde(tilde);
  }

  // cached access on the time grid
  double tilde_at(int k, int flat) const { return psi->tilde[k].v[flat]; }
  double theta_at(int k) const { return theta.value(psi->tg.t(k)); }
  double phi_at(int k, int flat) const {
    return phi_of(theta_at(k), tilde_at(k, flat));
  }
  double log_xi_at(int k, int flat) const {
    return log_xi_of(theta_at(k), tilde_at(k, flat));
  }
  double phi_star_at(int k) const {  // max over x, attained at min psi
    return phi_of(theta_at(k), psi->level_min[k]);
  }
  double phi_hat_at(int k) const {  // min over x
    return phi_of(theta_at(k), psi->level_max[k]);
  }
  double log_xi_star_at(int k) const {  // min over x
    return log_xi_of(theta_at(k), psi->level_min[k]);
  }
  double log_xi_hat_at(int k) const {  // max over x
    return log_xi_of(theta_at(k), psi->level_max[k]);
  }

  /// kappa-rescaled exponent standing in for s*phi.
  double rphi_at(int k, int flat) const {
    return resc * (phi_at(k, flat) - phi_min);
  }
  double rphi_star_at(int k) const { return resc * (phi_star_at(k) - phi_min); }
  double rphi_hat_at(int k) const { return resc * (phi_hat_at(k) - phi_min); }

  /// log aleph = s phi - 2 log xi, true parameters, log domain.
  double log_aleph_at(int k, int flat) const {
    return p.s * phi_at(k, flat) - 2 * log_xi_at(k, flat);
  }

  struct PointEval {
    double theta, psi, phi, xi, log_xi, s_phi;
  };
  /// Pointwise evaluation (exact transported psi); t must stay below T - dt_min.
  PointEval eval(double t, Vec2 x, double dt_flow = -1) const {
    if (t > p.T - p.dt_min() + 1e-12)
      throw std::invalid_argument("weights: t beyond T - dt_min");
    double tilde = psi->psi_tilde_pointwise(t, x, dt_flow);
    double th = theta.value(t);
    PointEval e;
    e.theta = th;
    e.psi = psi_of_tilde(tilde);
    e.phi = phi_of(th, tilde);
    e.log_xi = log_xi_of(th, tilde);
    e.xi = std::exp(e.log_xi);
    e.s_phi = p.s * e.phi;
    return e;
  }
};

struct AlephReport {
  double max_log_ratio_regime1 = -1e300;
  double max_log_ratio_regime2 = -1e300;
  double est_dt_phistar_C = 0;     // empirical C in dphi*/dt <= C lambda xi*^{1+1/m}
  double est_varphi4_excess = -1e300;  // log xi-ratio minus log theta-ratio
  int samples = 0;
  bool pass(double budget_log) const {
    return max_log_ratio_regime1 <= budget_log &&
           max_log_ratio_regime2 <= budget_log;
  }
};

/// Monotonicity of aleph along the perturbed flow over regime-respecting
/// random triples, evaluated with the true parameters in log space. The
/// trajectory segment is clipped to the stay-inside-Omega window, which is
/// where the transport estimates use it.
template <class UhatFn>
AlephReport verify_weight_inequalities(const WeightSet& ws,
                                       const DomainSpec& dom,
                                       const TargetTrajectory& traj,
                                       UhatFn&& uhat, int n_samples,
                                       uint64_t seed) {
  AlephReport rep;
  const double T = ws.p.T;
  const double tc = ws.p.t_check();
  auto vel = [&](double t, Vec2 p) { return traj.ybar_e(t, p) + uhat(t, p); };
  auto sdfOm = [&](Vec2 p) { return dom.omega.sdf(p); };
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ur(0, 1);
  const Grid& g = dom.grid;
  double dtf = T / kDefaultFlowSteps;

  auto log_aleph = [&](double t, Vec2 x) {
    double tilde = ws.psi->psi_tilde_pointwise(t, x, dtf);
    double th = ws.theta.value(t);
    return ws.p.s * ws.phi_of(th, tilde) - 2 * ws.log_xi_of(th, tilde);
  };

  int made = 0;
  while (made < n_samples) {
    int flat = g.omega_interior[size_t(ur(rng) * g.omega_interior.size())];
    Vec2 x = g.node(flat % g.nx, flat / g.nx);
    bool regime1 = ur(rng) < 0.5;
    double t, tau;
    if (regime1) {
      t = ur(rng) * (T - 2 * ws.p.T1);
      tau = ur(rng) * t;
    } else {
      t = ws.p.T0 + ur(rng) * (tc - ws.p.T0);
      tau = t + ur(rng) * (tc - t);
    }
    // clip tau to the inside-Omega window of the trajectory through (t, x)
    ExitTimes et = exit_times(vel, sdfOm, t, x, T, dtf);
    double lo = std::max(std::min(t, tau), et.t_in);
    double hi = std::min(std::max(t, tau), et.exits ? et.t_out : T);
    tau = std::clamp(tau, lo, hi);
    Vec2 xt = flow_map(vel, tau, t, x, dtf);
    double diff = log_aleph(t, x) - log_aleph(tau, xt);
    if (regime1)
      rep.max_log_ratio_regime1 = std::max(rep.max_log_ratio_regime1, diff);
    else
      rep.max_log_ratio_regime2 = std::max(rep.max_log_ratio_regime2, diff);

    // EstVarphi4 piece in regime 2: log xi(tau,X) - log xi(t,x) <= log theta
    // ratio + small
    if (!regime1) {
      double lx_tau = ws.log_xi_of(ws.theta.value(tau),
                                   ws.psi->psi_tilde_pointwise(tau, xt, dtf));
      double lx_t = ws.log_xi_of(ws.theta.value(t),
                                 ws.psi->psi_tilde_pointwise(t, x, dtf));
      double excess = (lx_tau - lx_t) -
                      (std::log(ws.theta.value(tau)) - std::log(ws.theta.value(t)));
      rep.est_varphi4_excess = std::max(rep.est_varphi4_excess, excess);
    }
    ++made;
  }
  rep.samples = made;

  // EstDtPhistar by finite differences over the cached levels
  const TimeGrid& tg = ws.psi->tg;
  for (int k = 0; k + 1 <= tg.nt; ++k) {
    double dphi = (ws.phi_star_at(k + 1) - ws.phi_star_at(k)) / tg.dt;
    double lxs = 0.5 * (ws.log_xi_star_at(k) + ws.log_xi_star_at(k + 1));
    double denom = ws.p.lambda * std::exp((1.0 + 1.0 / ws.p.m) * lxs);
    rep.est_dt_phistar_C = std::max(rep.est_dt_phistar_C, dphi / denom);
  }
  return rep;
}

}  // namespace carlab
