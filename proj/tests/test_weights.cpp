#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "carlab/weights.hpp"

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

struct Setup {
  TargetTrajectory traj;
  std::shared_ptr<PsiCache> psi;
  PsiReport rep;
};

Setup& channel_setup() {
  static Setup s = [] {
    TrajectoryConfig cfg;
    cfg.U = 2.0;
    Setup su{build_target_trajectory(cfg, channel()), nullptr, {}};
    WeightParams wp;
    int nt = 100;
    TimeGrid tg{wp.t_check() / nt, nt};
    su.psi = build_psi(channel(), su.traj, tg, &su.rep);
    return su;
  }();
  return s;
}

WeightParams params(double s, double lambda, double m) {
  WeightParams p;
  p.s = s;
  p.lambda = lambda;
  p.m = m;
  return p;
}

}  // namespace

TEST_CASE("theta endpoint values") {
  WeightParams p = params(2, 1, 1);
  ThetaWeight th(p);
  CHECK(th.value(0.0) == Catch::Approx(2.0));
  CHECK(th.value(p.T0) == Catch::Approx(1.0));
  CHECK(th.value(0.5) == 1.0);

  // theta(T - T1) = T1^{-m}: T1 = 0.1, m = 5 -> 1e5
  WeightParams q = params(2, 1, 5);
  q.T1 = 0.1;
  q.T0 = 0.1;
  ThetaWeight th5(q);
  CHECK(th5.value(q.T - q.T1) == Catch::Approx(1e5).epsilon(1e-9));

  // (1 - t/T0)^mu with mu = 50 at t = T0/2 -> 2^-50, so theta = 1 + 8.9e-16
  WeightParams r = params(50.0 / std::exp(2.0), 1, 1);
  CHECK(r.mu() == Catch::Approx(50.0));
  ThetaWeight thr(r);
  CHECK(thr.value(r.T0 / 2) - 1.0 ==
        Catch::Approx(std::pow(2.0, -50.0)).epsilon(1e-10));
}

TEST_CASE("theta is C2 across the gluing nodes and monotone on the blend") {
  for (double m : {1.0, 5.0}) {
    for (double lambda : {1.0, 2.0}) {
      WeightParams p = params(2, lambda, m);
      ThetaWeight th(p);
      for (double tj : {p.T0, p.T - 2 * p.T1, p.T - p.T1}) {
        double eps = 1e-7;
        // C0/C1 across the junction: both one-sided Taylor expansions match
        double v = th.value(tj), d = th.d1(tj), dd = th.d2(tj);
        for (double sgn : {-1.0, 1.0}) {
          double defect = th.value(tj + sgn * eps) - v - sgn * eps * d;
          CHECK(std::abs(defect) <=
                eps * eps * std::abs(dd) + 1e-9 * std::max(1.0, v));
        }
        // C2: two-sided FD second derivative agrees to O(h_t), where the
        // O(h_t) constant carries the one-sided third-derivative scale
        double fd2 = (th.value(tj + eps) - 2 * v + th.value(tj - eps)) /
                     (eps * eps);
        double delta = 1e-4;
        double d3s = (std::abs(th.d2(tj + delta) - dd) +
                      std::abs(th.d2(tj - delta) - dd)) / delta;
        CHECK(std::abs(fd2 - dd) <=
              2 * eps * d3s + 1e-6 * std::max(1.0, std::abs(dd)) + 1e-2);
      }
      for (int k = 0; k <= 1000; ++k) {
        double t = (p.T - 2 * p.T1) + p.T1 * k / 1000.0;
        REQUIRE(th.d1(t) >= -1e-9);
      }
    }
  }
}

TEST_CASE("psi_tilde spans [0,1] with boundary infimum") {
  Setup& su = channel_setup();
  CHECK(su.rep.range_min >= 0.0);
  CHECK(su.rep.range_min <= 0.05);
  CHECK(su.rep.range_max >= 0.95);
  CHECK(su.rep.range_max <= 1.0 + 1e-12);

  const Grid& g = channel().grid;
  const TimeGrid& tg = su.psi->tg;
  for (int k = 0; k <= tg.nt; k += 10) {
    double btrace = su.psi->a * (tg.t(k) - su.psi->T) + su.psi->b;
    for (int flat : g.O_interior)
      REQUIRE(su.psi->tilde[k].v[flat] >= btrace - 1e-9);
  }
}

TEST_CASE("psi_tilde is transported along the extension characteristics") {
  Setup& su = channel_setup();
  auto vel = [&](double t, Vec2 p) { return su.traj.ybar_e(t, p); };
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ur(0, 1);
  const double T = 1.0, dtf = T / 2000;
  double worst = 0;
  int used = 0;
  for (int k = 0; k < 300 && used < 150; ++k) {
    Vec2 x{0.05 + 0.9 * ur(rng), 0.05 + 0.9 * ur(rng)};
    double tau = 0.8 * ur(rng);
    double t = tau + (0.99 - tau) * ur(rng) * 0.9;
    if (channel().O.sdf(x) >= -0.02) continue;
    Vec2 xt = flow_map(vel, t, tau, x, dtf);
    if (channel().O.sdf(xt) >= -1e-6) continue;  // exited: trace regime
    double a = su.psi->psi_tilde_pointwise(tau, x, dtf);
    double b = su.psi->psi_tilde_pointwise(t, xt, dtf);
    worst = std::max(worst, std::abs(a - b));
    ++used;
  }
  CHECK(used >= 100);
  CHECK(worst <= 1e-4);
}

TEST_CASE("psi_hat boundary trace and terminal bump vanish together") {
  Setup& su = channel_setup();
  for (const auto& bp : channel().boundary_O)
    CHECK(std::abs(su.psi->psi_hat_T(bp.pos)) < 1e-9);
  Vec2 x{0.99, 0.5};
  double v = su.psi->psi_hat(0.999, x);
  CHECK(std::abs(v) < 0.02);
}

TEST_CASE("gradient floor alpha and inward monotonicity hold off w_tilde") {
  Setup& su = channel_setup();
  CHECK(su.rep.alpha_min >= 0.05);
  CHECK(su.rep.dpsi_dn_max <= 1e-6);
  CHECK(su.rep.sigma_jump <= 1e-3);

  TrajectoryConfig cfg;
  cfg.U = 2.0;
  auto tra = build_target_trajectory(cfg, annular());
  WeightParams wp;
  TimeGrid tg{wp.t_check() / 60, 60};
  PsiReport repa;
  auto psia = build_psi(annular(), tra, tg, &repa);
  CHECK(repa.alpha_min >= 0.05);
  CHECK(repa.sigma_jump <= 1e-3);
}

TEST_CASE("phi bounds and the closed-form xi evaluation") {
  Setup& su = channel_setup();
  for (double lambda : {1.0, 2.0}) {
    for (double m : {1.0, 5.0}) {
      WeightSet ws(params(2, lambda, m), su.psi);
      double cap_num = lambda * std::exp(6 * lambda * (m + 1));
      for (int k = 0; k <= ws.psi->tg.nt; k += 9) {
        double th = ws.theta_at(k);
        for (int flat : channel().grid.O_interior) {
          double ratio = ws.phi_at(k, flat) / (th * cap_num);
          REQUIRE(ratio >= 0.75 - 1e-12);
          REQUIRE(ratio <= 1.0);
        }
      }
    }
  }
  WeightSet ws(params(2, 1, 1), su.psi);
  CHECK(std::exp(ws.log_xi_of(1.0, 0.0)) == Catch::Approx(std::exp(6.0)));
  CHECK(ws.phi_of(1.0, 0.0) ==
        Catch::Approx(std::exp(12.0) - std::exp(6.0)).epsilon(1e-12));
  CHECK(std::exp(6.0) == Catch::Approx(403.4287935).epsilon(1e-8));
  CHECK(std::exp(12.0) - std::exp(6.0) == Catch::Approx(162351.3).epsilon(1e-5));
}

TEST_CASE("phi-star and xi-star are the boundary extremes") {
  Setup& su = channel_setup();
  WeightSet ws(params(2, 1, 1), su.psi);
  const Grid& g = channel().grid;
  for (int k = 0; k <= ws.psi->tg.nt; k += 25) {
    double mx = -1e300, mn = 1e300, lximn = 1e300;
    for (int flat : g.O_interior) {
      mx = std::max(mx, ws.phi_at(k, flat));
      mn = std::min(mn, ws.phi_at(k, flat));
      lximn = std::min(lximn, ws.log_xi_at(k, flat));
    }
    CHECK(ws.phi_star_at(k) >= mx - 1e-9 * std::abs(mx));
    CHECK(ws.phi_hat_at(k) <= mn + 1e-9 * std::abs(mn));
    CHECK(ws.log_xi_star_at(k) <= lximn + 1e-12 * std::abs(lximn));
  }
}

TEST_CASE("weight evaluation rejects times at the blow-up edge") {
  Setup& su = channel_setup();
  WeightSet ws(params(2, 1, 1), su.psi);
  CHECK_THROWS_AS(ws.eval(1.0 - 1e-9, {0.5, 0.5}), std::invalid_argument);
  auto e = ws.eval(0.5, {0.5, 0.5});
  CHECK(e.theta == 1.0);
  CHECK(e.xi == Catch::Approx(std::exp(e.log_xi)));
  CHECK(e.s_phi == Catch::Approx(2 * e.phi));
}

TEST_CASE("aleph stays monotone along the flow within the ln 8 budget") {
  Setup& su = channel_setup();
  WeightSet ws(params(2, 1, 1), su.psi);
  auto zero = [](double, Vec2) { return Vec2{0, 0}; };
  AlephReport rep = verify_weight_inequalities(ws, channel(), su.traj, zero,
                                               2000, 424242);
  CHECK(rep.samples == 2000);
  CHECK(rep.max_log_ratio_regime1 <= std::log(8.0));
  CHECK(rep.max_log_ratio_regime2 <= std::log(8.0));
  CHECK(rep.est_varphi4_excess <= 0.01);
  CHECK(rep.est_dt_phistar_C > 0);

  auto pert = [](double t, Vec2) {
    return Vec2{0.005 * std::sin(2 * M_PI * t), 0.003};
  };
  AlephReport rep2 = verify_weight_inequalities(ws, channel(), su.traj, pert,
                                                1000, 99);
  CHECK(rep2.max_log_ratio_regime1 <= std::log(16.0));
  CHECK(rep2.max_log_ratio_regime2 <= std::log(16.0));
}

TEST_CASE("rescaled exponents span [0, kappa]") {
  Setup& su = channel_setup();
  WeightParams p = params(2, 1, 1);
  p.kappa = 12.0;
  WeightSet ws(p, su.psi);
  double lo = 1e300, hi = -1e300;
  for (int k = 0; k <= ws.psi->tg.nt; ++k) {
    for (int flat : channel().grid.O_interior) {
      double r = ws.rphi_at(k, flat);
      lo = std::min(lo, r);
      hi = std::max(hi, r);
    }
    lo = std::min({lo, ws.rphi_star_at(k), ws.rphi_hat_at(k)});
    hi = std::max({hi, ws.rphi_star_at(k), ws.rphi_hat_at(k)});
  }
  CHECK(lo >= -1e-9);
  CHECK(hi <= 12.0 + 1e-9);
  CHECK(hi >= 11.0);
}

TEST_CASE("invalid weight parameters are rejected") {
  WeightParams p = params(2, 1, 1);
  p.T1 = 0.3;
  CHECK_THROWS_AS(ThetaWeight(p), std::invalid_argument);
  WeightParams q = params(2, 1, 1);
  q.T0 = 0.5;
  q.T1 = 0.25;
  CHECK_THROWS_AS(ThetaWeight(q), std::invalid_argument);
  WeightParams r = params(0.5, 1, 1);
  CHECK_THROWS_AS(ThetaWeight(r), std::invalid_argument);
}
