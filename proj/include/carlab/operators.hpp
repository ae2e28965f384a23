#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "carlab/fields.hpp"
#include "carlab/geometry.hpp"
#include "carlab/trajectory.hpp"

namespace carlab {

// ---------------------------------------------------------------------------
// masked stencil operators (homogeneous Dirichlet ghosts outside the mask)
// ---------------------------------------------------------------------------

/// Mask bookkeeping: compact ordering of active nodes chosen to keep the
/// banded matrices narrow (traverse the shorter lattice direction fastest).
struct MaskOps {
  const Grid* g = nullptr;
  std::vector<uint8_t> mask;       // lattice size
  std::vector<int> nodes;          // flat indices in compact order
  std::vector<int32_t> comp;       // flat -> compact index or -1
  int band = 0;

  MaskOps() = default;
  MaskOps(const Grid& grid, const std::vector<uint8_t>& m) : g(&grid), mask(m) {
    comp.assign(m.size(), -1);
    bool col_major = grid.nx >= grid.ny;
    if (col_major) {
      for (int i = 0; i < grid.nx; ++i)
        for (int j = 0; j < grid.ny; ++j)
          if (m[grid.idx(i, j)]) nodes.push_back(grid.idx(i, j));
    } else {
      for (int j = 0; j < grid.ny; ++j)
        for (int i = 0; i < grid.nx; ++i)
          if (m[grid.idx(i, j)]) nodes.push_back(grid.idx(i, j));
    }
    for (size_t k = 0; k < nodes.size(); ++k) comp[nodes[k]] = int32_t(k);
    for (size_t k = 0; k < nodes.size(); ++k) {
      int flat = nodes[k];
      int i = flat % grid.nx, j = flat / grid.nx;
      for (auto [di, dj] : {std::pair{1, 0}, {0, 1}}) {
        if (!grid.valid(i + di, j + dj)) continue;
        int32_t c = comp[grid.idx(i + di, j + dj)];
        if (c >= 0) band = std::max(band, std::abs(int(c) - int(k)));
      }
    }
  }
  int n() const { return int(nodes.size()); }
  bool active(int flat) const { return comp[flat] >= 0; }
};

namespace stencil {

/// 5-point Laplacian, out = lap(u) on mask nodes; self-transpose.
inline void laplacian(const MaskOps& M, const Field& u, Field& out) {
  const Grid& g = *M.g;
  double ih2 = 1.0 / (g.h * g.h);
  std::fill(out.v.begin(), out.v.end(), 0.0);
  for (int flat : M.nodes) {
    double uc = u.v[flat];
    double s = -4.0 * uc;
    if (M.active(flat + 1)) s += u.v[flat + 1];
    if (M.active(flat - 1)) s += u.v[flat - 1];
    if (M.active(flat + g.nx)) s += u.v[flat + g.nx];
    if (M.active(flat - g.nx)) s += u.v[flat - g.nx];
    out.v[flat] = s * ih2;
  }
}

/// Centered d/dx on mask nodes (O(h^2) interior).
inline void ddx(const MaskOps& M, const Field& u, Field& out) {
  const Grid& g = *M.g;
  double i2h = 0.5 / g.h;
  std::fill(out.v.begin(), out.v.end(), 0.0);
  for (int flat : M.nodes) {
    double e = M.active(flat + 1) ? u.v[flat + 1] : 0.0;
    double w = M.active(flat - 1) ? u.v[flat - 1] : 0.0;
    out.v[flat] = (e - w) * i2h;
  }
}
inline void ddy(const MaskOps& M, const Field& u, Field& out) {
  const Grid& g = *M.g;
  double i2h = 0.5 / g.h;
  std::fill(out.v.begin(), out.v.end(), 0.0);
  for (int flat : M.nodes) {
    double n = M.active(flat + g.nx) ? u.v[flat + g.nx] : 0.0;
    double s = M.active(flat - g.nx) ? u.v[flat - g.nx] : 0.0;
    out.v[flat] = (n - s) * i2h;
  }
}
/// Exact transposes of the centered differences above.
inline void ddx_T(const MaskOps& M, const Field& u, Field& out) {
  const Grid& g = *M.g;
  double i2h = 0.5 / g.h;
  std::fill(out.v.begin(), out.v.end(), 0.0);
  for (int flat : M.nodes) {
    double w = M.active(flat - 1) ? u.v[flat - 1] : 0.0;
    double e = M.active(flat + 1) ? u.v[flat + 1] : 0.0;
    out.v[flat] = (w - e) * i2h;
  }
}
inline void ddy_T(const MaskOps& M, const Field& u, Field& out) {
  const Grid& g = *M.g;
  double i2h = 0.5 / g.h;
  std::fill(out.v.begin(), out.v.end(), 0.0);
  for (int flat : M.nodes) {
    double s = M.active(flat - g.nx) ? u.v[flat - g.nx] : 0.0;
    double n = M.active(flat + g.nx) ? u.v[flat + g.nx] : 0.0;
    out.v[flat] = (s - n) * i2h;
  }
}

/// Forward differences for the Leray pair; divergence below is -transpose.
inline void grad_fwd(const MaskOps& M, const Field& q, Field& gx, Field& gy) {
  const Grid& g = *M.g;
  double ih = 1.0 / g.h;
  std::fill(gx.v.begin(), gx.v.end(), 0.0);
  std::fill(gy.v.begin(), gy.v.end(), 0.0);
  for (int flat : M.nodes) {
    double qc = q.v[flat];
    double qe = M.active(flat + 1) ? q.v[flat + 1] : 0.0;
    double qn = M.active(flat + g.nx) ? q.v[flat + g.nx] : 0.0;
    gx.v[flat] = (qe - qc) * ih;
    gy.v[flat] = (qn - qc) * ih;
  }
}
inline void div_bwd(const MaskOps& M, const Field& wx, const Field& wy,
                    Field& out) {
  const Grid& g = *M.g;
  double ih = 1.0 / g.h;
  std::fill(out.v.begin(), out.v.end(), 0.0);
  for (int flat : M.nodes) {
    double ax = wx.v[flat] - (M.active(flat - 1) ? wx.v[flat - 1] : 0.0);
    double ay = wy.v[flat] - (M.active(flat - g.nx) ? wy.v[flat - g.nx] : 0.0);
    out.v[flat] = (ax + ay) * ih;
  }
}

}  // namespace stencil

inline void divergence(const MaskOps& M, const VField& u, Field& out) {
  Field tmp(*M.g);
  stencil::ddx(M, u.x, out);
  stencil::ddy(M, u.y, tmp);
  for (int flat : M.nodes) out.v[flat] += tmp.v[flat];
}
inline void curl(const MaskOps& M, const VField& u, Field& out) {
  Field tmp(*M.g);
  stencil::ddx(M, u.y, out);
  stencil::ddy(M, u.x, tmp);
  for (int flat : M.nodes) out.v[flat] -= tmp.v[flat];
}
inline void perp_grad(const MaskOps& M, const Field& z, VField& out) {
  stencil::ddy(M, z, out.x);
  for (int flat : M.nodes) out.x.v[flat] = -out.x.v[flat];
  stencil::ddx(M, z, out.y);
}

// ---------------------------------------------------------------------------
// banded Cholesky (exact solves keep the discrete transposes exact)
// ---------------------------------------------------------------------------

struct BandCholesky {
  int n = 0, band = 0;
  std::vector<double> L;  // row-major, L[r*(band+1) + (r - j)], j in [r-band, r]

  double& at(int r, int j) { return L[size_t(r) * (band + 1) + (r - j)]; }
  double at(int r, int j) const { return L[size_t(r) * (band + 1) + (r - j)]; }

  /// rows: for each compact row r, entries (col <= r, value).
  void factor(int n_, int band_,
              const std::function<void(int, std::vector<std::pair<int, double>>&)>&
                  lower_row) {
    n = n_;
    band = band_;
    L.assign(size_t(n) * (band + 1), 0.0);
    std::vector<std::pair<int, double>> row;
    for (int r = 0; r < n; ++r) {
      row.clear();
      lower_row(r, row);
      for (auto [j, a] : row) at(r, j) = a;
      int kmin = std::max(0, r - band);
      for (int j = kmin; j <= r; ++j) {
        double s = at(r, j);
        int k0 = std::max(kmin, j - band);
        for (int k = k0; k < j; ++k) s -= at(r, k) * at(j, k);
        if (j < r) {
          at(r, j) = s / at(j, j);
        } else {
          if (s <= 0) throw std::runtime_error("BandCholesky: not SPD");
          at(r, r) = std::sqrt(s);
        }
      }
    }
  }

  void solve(std::vector<double>& b) const {
    for (int r = 0; r < n; ++r) {
      double s = b[r];
      int k0 = std::max(0, r - band);
      for (int k = k0; k < r; ++k) s -= at(r, k) * b[k];
      b[r] = s / at(r, r);
    }
    for (int r = n - 1; r >= 0; --r) {
      double s = b[r];
      int k1 = std::min(n - 1, r + band);
      for (int k = r + 1; k <= k1; ++k) s -= at(k, r) * b[k];
      b[r] = s / at(r, r);
    }
  }
};

// ---------------------------------------------------------------------------
// conjugate gradient (matrix-free, optional Jacobi preconditioner)
// ---------------------------------------------------------------------------

struct CGResult {
  int iterations = 0;
  double rel_residual = 0;
  bool converged = false;
};

template <class ApplyFn>
CGResult conjugate_gradient(ApplyFn&& A, const std::vector<double>& b,
                            std::vector<double>& x, double rel_tol,
                            int max_iter,
                            const std::vector<double>* jacobi = nullptr) {
  size_t n = b.size();
  std::vector<double> r(n), z(n), p(n), Ap(n);
  A(x, Ap);
  double b2 = 0;
  for (size_t i = 0; i < n; ++i) {
    r[i] = b[i] - Ap[i];
    b2 += b[i] * b[i];
  }
  double bnorm = std::sqrt(b2);
  if (bnorm == 0) {
    std::fill(x.begin(), x.end(), 0.0);
    return {0, 0.0, true};
  }
  auto precond = [&](const std::vector<double>& in, std::vector<double>& out) {
    if (jacobi)
      for (size_t i = 0; i < n; ++i) out[i] = in[i] / (*jacobi)[i];
    else
      out = in;
  };
  precond(r, z);
  p = z;
  double rz = 0;
  for (size_t i = 0; i < n; ++i) rz += r[i] * z[i];
  CGResult res;
  for (int it = 0; it < max_iter; ++it) {
    A(p, Ap);
    double pAp = 0;
    for (size_t i = 0; i < n; ++i) pAp += p[i] * Ap[i];
    if (pAp <= 0) break;
    double alpha = rz / pAp;
    double r2 = 0;
    for (size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * Ap[i];
      r2 += r[i] * r[i];
    }
    res.iterations = it + 1;
    res.rel_residual = std::sqrt(r2) / bnorm;
    if (res.rel_residual <= rel_tol) {
      res.converged = true;
      return res;
    }
    precond(r, z);
    double rz_new = 0;
    for (size_t i = 0; i < n; ++i) rz_new += r[i] * z[i];
    double beta = rz_new / rz;
    rz = rz_new;
    for (size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  return res;
}

// ---------------------------------------------------------------------------
// Poisson solve and Leray projection
// ---------------------------------------------------------------------------

/// Solves -lap(u) = -rhs i.e. lap(u) = rhs with Dirichlet data g on the
/// ghost ring (nodes outside the mask adjacent to it), by CG on the SPD
/// 5-point system. rel residual 1e-10, error on stagnation.
inline Field poisson_dirichlet(const MaskOps& M, const Field& rhs,
                               const std::function<double(Vec2)>& bc) {
  const Grid& g = *M.g;
  double ih2 = 1.0 / (g.h * g.h);
  std::vector<double> b(M.n()), x(M.n(), 0.0);
  for (int k = 0; k < M.n(); ++k) {
    int flat = M.nodes[k];
    int i = flat % g.nx, j = flat / g.nx;
    double acc = -rhs.v[flat];  // solve (-lap) u = -rhs
    for (auto [di, dj] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
      int nb = g.idx(i + di, j + dj);
      if (!g.valid(i + di, j + dj) || !M.active(nb))
        acc += bc(g.node(i + di, j + dj)) * ih2;
    }
    b[k] = acc;
  }
  auto apply = [&](const std::vector<double>& in, std::vector<double>& out) {
    for (int k = 0; k < M.n(); ++k) {
      int flat = M.nodes[k];
      double s = 4.0 * in[k];
      int i = flat % g.nx, j = flat / g.nx;
      for (auto [di, dj] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
        if (!g.valid(i + di, j + dj)) continue;
        int32_t c = M.comp[g.idx(i + di, j + dj)];
        if (c >= 0) s -= in[c];
      }
      out[k] = s * ih2;
    }
  };
  CGResult cg = conjugate_gradient(apply, b, x, 1e-10, 10 * M.n());
  if (!cg.converged)
    throw std::runtime_error("poisson_dirichlet: CG did not converge");
  Field out(g);
  for (int k = 0; k < M.n(); ++k) out.v[M.nodes[k]] = x[k];
  return out;
}

/// Poisson with constant boundary value fixed by the zero-mean gauge over
/// the region (solve with c = 0, then shift). Returns the shifted field and
/// the constant.
inline std::pair<Field, double> poisson_gauged(const MaskOps& M,
                                               const Field& rhs,
                                               const Region& gauge_region) {
  Field z = poisson_dirichlet(M, rhs, [](Vec2) { return 0.0; });
  const Grid& g = *M.g;
  double sum = 0;
  int count = 0;
  for (int flat : M.nodes) {
    Vec2 p = g.node(flat % g.nx, flat / g.nx);
    if (gauge_region.contains(p)) {
      sum += z.v[flat];
      ++count;
    }
  }
  if (count == 0) throw std::runtime_error("poisson_gauged: empty gauge region");
  double c = -sum / count;
  for (int flat : M.nodes) z.v[flat] += c;
  return {z, c};
}

/// Discrete Leray projector P = I + G A^{-1} D built on the forward/backward
/// difference pair (D = -G^T), so P is symmetric, idempotent, and the
/// projected divergence vanishes exactly. The factorization is cached.
struct LerayProjector {
  const MaskOps* M = nullptr;
  BandCholesky chol;

  explicit LerayProjector(const MaskOps& mops) : M(&mops) {
    const Grid& g = *M->g;
    double ih2 = 1.0 / (g.h * g.h);
    // A = -D G: diag 2 + (W active) + (S active), off -1 per active neighbor,
    // scaled by 1/h^2; lower rows only
    chol.factor(M->n(), M->band, [&](int r, auto& row) {
      int flat = M->nodes[r];
      int i = flat % g.nx, j = flat / g.nx;
      double diag = 2.0;
      for (auto [di, dj] : {std::pair{-1, 0}, {0, -1}}) {
        if (g.valid(i + di, j + dj) && M->active(g.idx(i + di, j + dj)))
          diag += 1.0;
      }
      row.push_back({r, diag * ih2});
      for (auto [di, dj] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
        if (!g.valid(i + di, j + dj)) continue;
        int32_t c = M->comp[g.idx(i + di, j + dj)];
        if (c >= 0 && c < r) row.push_back({int(c), -ih2});
      }
    });
  }

  void project(VField& u) const {
    const Grid& g = *M->g;
    Field d(g);
    stencil::div_bwd(*M, u.x, u.y, d);
    std::vector<double> b(M->n());
    for (int k = 0; k < M->n(); ++k) b[k] = d.v[M->nodes[k]];
    chol.solve(b);  // p = A^{-1} D u (sign folded below)
    Field p(g);
    for (int k = 0; k < M->n(); ++k) p.v[M->nodes[k]] = b[k];
    Field gx(g), gy(g);
    stencil::grad_fwd(*M, p, gx, gy);
    for (int flat : M->nodes) {
      u.x.v[flat] += gx.v[flat];  // u + G A^{-1} D u
      u.y.v[flat] += gy.v[flat];
    }
  }

  double divergence_norm(const VField& u) const {
    Field d(*M->g);
    stencil::div_bwd(*M, u.x, u.y, d);
    return linf_norm(d, M->nodes);
  }
};

// ---------------------------------------------------------------------------
// implicit-Euler parabolic steppers with exact transposes
// ---------------------------------------------------------------------------

enum class ParabolicMode { heat, stokes };
enum class SweepDirection { forward, adjoint };

/// sigma and ybar samples per time node / midpoint, on the mask.
struct CoefficientTable {
  std::vector<std::vector<double>> sigma_node;   // [k][compact]
  std::vector<std::vector<double>> sigma_mid;    // [k][compact]
  std::vector<std::vector<Vec2>> ybar_mid;       // [k][compact]
  bool time_independent = true;
};

inline CoefficientTable make_coefficients(const MaskOps& M,
                                          const TargetTrajectory& traj,
                                          const TimeGrid& tg) {
  CoefficientTable ct;
  const Grid& g = *M.g;
  ct.time_independent = traj.sigma_constant() &&
                        traj.cfg.velocity == VelocityKind::constant;
  int nt = tg.nt;
  ct.sigma_node.resize(nt + 1);
  ct.sigma_mid.resize(nt);
  ct.ybar_mid.resize(nt);
  for (int k = 0; k <= nt; ++k) {
    ct.sigma_node[k].resize(M.n());
    for (int c = 0; c < M.n(); ++c) {
      Vec2 p = g.node(M.nodes[c] % g.nx, M.nodes[c] / g.nx);
      ct.sigma_node[k][c] = traj.sigma(tg.t(k), p);
    }
  }
  for (int k = 0; k < nt; ++k) {
    double tm = tg.t(k) + 0.5 * tg.dt;
    ct.sigma_mid[k].resize(M.n());
    ct.ybar_mid[k].resize(M.n());
    for (int c = 0; c < M.n(); ++c) {
      Vec2 p = g.node(M.nodes[c] % g.nx, M.nodes[c] / g.nx);
      ct.sigma_mid[k][c] = traj.sigma(tm, p);
      ct.ybar_mid[k][c] = traj.ybar(tm, p);
    }
  }
  return ct;
}

/// One-step implicit-Euler maps. Heat uses the conservative form
/// (sigma_{k+1} y_{k+1} - sigma_k y_k)/dt - nu lap y_{k+1} = f_{k+1};
/// Stokes uses sigma_mid (du/dt + advection terms) - nu lap u + grad p = f
/// with explicit advection and a Leray projection. Adjoint applications are
/// the exact transposes (Cholesky solves keep them exact to round-off).
struct ParabolicStepper {
  const MaskOps* M = nullptr;
  const TargetTrajectory* traj = nullptr;
  TimeGrid tg;
  double nu = 0;
  ParabolicMode mode;
  CoefficientTable coef;
  std::shared_ptr<LerayProjector> leray;  // stokes only
  std::vector<std::shared_ptr<BandCholesky>> helm;  // per step (or shared)

  ParabolicStepper(const MaskOps& mops, const TargetTrajectory& tr,
                   const TimeGrid& grid, ParabolicMode md)
      : M(&mops), traj(&tr), tg(grid), nu(tr.cfg.nu), mode(md) {
    coef = make_coefficients(mops, tr, grid);
    if (mode == ParabolicMode::stokes)
      leray = std::make_shared<LerayProjector>(mops);
    helm.resize(tg.nt);
    std::shared_ptr<BandCholesky> shared;
    for (int k = 0; k < tg.nt; ++k) {
      if (coef.time_independent && shared) {
        helm[k] = shared;
        continue;
      }
      auto ch = std::make_shared<BandCholesky>();
      const std::vector<double>& sig =
          mode == ParabolicMode::heat ? coef.sigma_node[k + 1]
                                      : coef.sigma_mid[k];
      build_helmholtz(*ch, sig);
      helm[k] = ch;
      if (coef.time_independent) shared = ch;
    }
  }

  void build_helmholtz(BandCholesky& ch, const std::vector<double>& sig) {
    const Grid& g = *M->g;
    double ih2 = nu / (g.h * g.h);
    double idt = 1.0 / tg.dt;
    ch.factor(M->n(), M->band, [&](int r, auto& row) {
      int flat = M->nodes[r];
      int i = flat % g.nx, j = flat / g.nx;
      row.push_back({r, sig[r] * idt + 4.0 * ih2});
      for (auto [di, dj] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
        if (!g.valid(i + di, j + dj)) continue;
        int32_t c = M->comp[g.idx(i + di, j + dj)];
        if (c >= 0 && c < r) row.push_back({int(c), -ih2});
      }
    });
  }

  void helm_solve(int k, Field& f) const {
    std::vector<double> b(M->n());
    for (int c = 0; c < M->n(); ++c) b[c] = f.v[M->nodes[c]];
    helm[k]->solve(b);
    std::fill(f.v.begin(), f.v.end(), 0.0);
    for (int c = 0; c < M->n(); ++c) f.v[M->nodes[c]] = b[c];
  }

  // sigma_mid [ (ybar.grad)u + (u.grad)ybar ] with centered differences;
  // jac is the analytic ybar Jacobian (zero for the built-in fields, kept
  // for generality via finite differences of ybar).
  void advection(int k, const VField& u, VField& out) const {
    const Grid& g = *M->g;
    Field dxx(g), dyx(g), dxy(g), dyy(g);
    stencil::ddx(*M, u.x, dxx);
    stencil::ddy(*M, u.x, dyx);
    stencil::ddx(*M, u.y, dxy);
    stencil::ddy(*M, u.y, dyy);
    double tm = tg.t(k) + 0.5 * tg.dt;
    std::fill(out.x.v.begin(), out.x.v.end(), 0.0);
    std::fill(out.y.v.begin(), out.y.v.end(), 0.0);
    for (int c = 0; c < M->n(); ++c) {
      int flat = M->nodes[c];
      Vec2 yb = coef.ybar_mid[k][c];
      double sg = coef.sigma_mid[k][c];
      Vec2 p = g.node(flat % g.nx, flat / g.nx);
      // ybar Jacobian by centered FD of the analytic field
      double hh = g.h;
      Vec2 ye = traj->ybar(tm, {p.x + hh, p.y}), yw = traj->ybar(tm, {p.x - hh, p.y});
      Vec2 yn = traj->ybar(tm, {p.x, p.y + hh}), ys = traj->ybar(tm, {p.x, p.y - hh});
      double j11 = (ye.x - yw.x) / (2 * hh), j12 = (yn.x - ys.x) / (2 * hh);
      double j21 = (ye.y - yw.y) / (2 * hh), j22 = (yn.y - ys.y) / (2 * hh);
      out.x.v[flat] = sg * (yb.x * dxx.v[flat] + yb.y * dyx.v[flat] +
                            j11 * u.x.v[flat] + j12 * u.y.v[flat]);
      out.y.v[flat] = sg * (yb.x * dxy.v[flat] + yb.y * dyy.v[flat] +
                            j21 * u.x.v[flat] + j22 * u.y.v[flat]);
    }
  }

  void advection_T(int k, const VField& v, VField& out) const {
    const Grid& g = *M->g;
    double tm = tg.t(k) + 0.5 * tg.dt;
    Field ax(g), ay(g), bx(g), by(g);
    std::fill(out.x.v.begin(), out.x.v.end(), 0.0);
    std::fill(out.y.v.begin(), out.y.v.end(), 0.0);
    for (int c = 0; c < M->n(); ++c) {
      int flat = M->nodes[c];
      Vec2 yb = coef.ybar_mid[k][c];
      double sg = coef.sigma_mid[k][c];
      ax.v[flat] = sg * yb.x * v.x.v[flat];
      ay.v[flat] = sg * yb.y * v.x.v[flat];
      bx.v[flat] = sg * yb.x * v.y.v[flat];
      by.v[flat] = sg * yb.y * v.y.v[flat];
      Vec2 p = g.node(flat % g.nx, flat / g.nx);
      double hh = g.h;
      Vec2 ye = traj->ybar(tm, {p.x + hh, p.y}), yw = traj->ybar(tm, {p.x - hh, p.y});
      Vec2 yn = traj->ybar(tm, {p.x, p.y + hh}), ys = traj->ybar(tm, {p.x, p.y - hh});
      double j11 = (ye.x - yw.x) / (2 * hh), j12 = (yn.x - ys.x) / (2 * hh);
      double j21 = (ye.y - yw.y) / (2 * hh), j22 = (yn.y - ys.y) / (2 * hh);
      out.x.v[flat] = sg * (j11 * v.x.v[flat] + j21 * v.y.v[flat]);
      out.y.v[flat] = sg * (j12 * v.x.v[flat] + j22 * v.y.v[flat]);
    }
    Field t1(g), t2(g);
    stencil::ddx_T(*M, ax, t1);
    stencil::ddy_T(*M, ay, t2);
    for (int flat : M->nodes) out.x.v[flat] += t1.v[flat] + t2.v[flat];
    stencil::ddx_T(*M, bx, t1);
    stencil::ddy_T(*M, by, t2);
    for (int flat : M->nodes) out.y.v[flat] += t1.v[flat] + t2.v[flat];
  }

  /// Heat forward step: y_{k+1} from y_k and source f at t_{k+1}.
  void heat_step(int k, const Field& y, const Field& f, Field& out) const {
    double idt = 1.0 / tg.dt;
    out = f;
    for (int c = 0; c < M->n(); ++c) {
      int flat = M->nodes[c];
      out.v[flat] += coef.sigma_node[k][c] * idt * y.v[flat];
    }
    helm_solve(k, out);
  }

  /// Transpose of the heat step with respect to the state slot:
  /// out = (sigma_k/dt) H_k^{-T} v = (sigma_k/dt) H_k^{-1} v.
  void heat_step_T(int k, const Field& v, Field& out) const {
    out = v;
    helm_solve(k, out);
    double idt = 1.0 / tg.dt;
    for (int c = 0; c < M->n(); ++c)
      out.v[M->nodes[c]] *= coef.sigma_node[k][c] * idt;
  }

  /// Stokes forward step u_{k+1} = P H^{-1}[ sigma_mid/dt u - Adv(u) + f ].
  void stokes_step(int k, const VField& u, const VField& f, VField& out) const {
    const Grid& g = *M->g;
    VField adv(g);
    advection(k, u, adv);
    double idt = 1.0 / tg.dt;
    out = f;
    for (int c = 0; c < M->n(); ++c) {
      int flat = M->nodes[c];
      double s = coef.sigma_mid[k][c] * idt;
      out.x.v[flat] += s * u.x.v[flat] - adv.x.v[flat];
      out.y.v[flat] += s * u.y.v[flat] - adv.y.v[flat];
    }
    helm_solve(k, out.x);
    helm_solve(k, out.y);
    leray->project(out);
  }

  /// Transpose of the state slot of stokes_step: out = E_k^T H^{-1} P v.
  void stokes_step_T(int k, const VField& v, VField& out) const {
    const Grid& g = *M->g;
    VField w = v;
    leray->project(w);  // P symmetric
    helm_solve(k, w.x);
    helm_solve(k, w.y);
    VField advT(g);
    advection_T(k, w, advT);
    double idt = 1.0 / tg.dt;
    out = VField(g);
    for (int c = 0; c < M->n(); ++c) {
      int flat = M->nodes[c];
      double s = coef.sigma_mid[k][c] * idt;
      out.x.v[flat] = s * w.x.v[flat] - advT.x.v[flat];
      out.y.v[flat] = s * w.y.v[flat] - advT.y.v[flat];
    }
  }

  /// Source slot transpose for Stokes: out = H^{-1} P v.
  void stokes_source_T(int k, const VField& v, VField& out) const {
    out = v;
    leray->project(out);
    helm_solve(k, out.x);
    helm_solve(k, out.y);
  }

  /// CFL advisory for the explicit advection treatment.
  double cfl_number() const {
    double ymax = 0;
    for (int k = 0; k < tg.nt; ++k)
      for (int c = 0; c < M->n(); ++c)
        ymax = std::max(ymax, norm(coef.ybar_mid[k][c]));
    return tg.dt * ymax / M->g->h;
  }
};

// ---------------------------------------------------------------------------
// named matrix-free handles with exact transposes (test surface)
// ---------------------------------------------------------------------------

struct LinearOperatorHandle {
  std::string name;
  size_t dim_in = 0, dim_out = 0;
  std::function<void(const std::vector<double>&, std::vector<double>&)> apply;
  std::function<void(const std::vector<double>&, std::vector<double>&)> applyT;
};

namespace detail {
inline Field unpack1(const MaskOps& M, const std::vector<double>& x) {
  Field f(*M.g);
  for (int k = 0; k < M.n(); ++k) f.v[M.nodes[k]] = x[k];
  return f;
}
inline void pack1(const MaskOps& M, const Field& f, std::vector<double>& x) {
  x.resize(M.n());
  for (int k = 0; k < M.n(); ++k) x[k] = f.v[M.nodes[k]];
}
inline VField unpack2(const MaskOps& M, const std::vector<double>& x) {
  VField f(*M.g);
  for (int k = 0; k < M.n(); ++k) {
    f.x.v[M.nodes[k]] = x[k];
    f.y.v[M.nodes[k]] = x[k + M.n()];
  }
  return f;
}
inline void pack2(const MaskOps& M, const VField& f, std::vector<double>& x) {
  x.resize(2 * M.n());
  for (int k = 0; k < M.n(); ++k) {
    x[k] = f.x.v[M.nodes[k]];
    x[k + M.n()] = f.y.v[M.nodes[k]];
  }
}
}  // namespace detail

inline std::vector<LinearOperatorHandle> operator_handles(
    const MaskOps& M, const ParabolicStepper* stepper = nullptr) {
  std::vector<LinearOperatorHandle> hs;
  size_t n = M.n();
  auto scalar_op = [&](const std::string& name, auto&& fwd, auto&& bwd) {
    LinearOperatorHandle h;
    h.name = name;
    h.dim_in = h.dim_out = n;
    h.apply = [&M, fwd](const std::vector<double>& x, std::vector<double>& y) {
      Field f = detail::unpack1(M, x), out(*M.g);
      fwd(M, f, out);
      detail::pack1(M, out, y);
    };
    h.applyT = [&M, bwd](const std::vector<double>& x, std::vector<double>& y) {
      Field f = detail::unpack1(M, x), out(*M.g);
      bwd(M, f, out);
      detail::pack1(M, out, y);
    };
    hs.push_back(std::move(h));
  };
  scalar_op("laplacian", stencil::laplacian, stencil::laplacian);
  scalar_op("ddx", stencil::ddx, stencil::ddx_T);
  scalar_op("ddy", stencil::ddy, stencil::ddy_T);

  {  // divergence: R^{2n} -> R^n, transpose is the negative centered grad
    LinearOperatorHandle h;
    h.name = "divergence";
    h.dim_in = 2 * n;
    h.dim_out = n;
    h.apply = [&M](const std::vector<double>& x, std::vector<double>& y) {
      VField u = detail::unpack2(M, x);
      Field out(*M.g);
      divergence(M, u, out);
      detail::pack1(M, out, y);
    };
    h.applyT = [&M](const std::vector<double>& x, std::vector<double>& y) {
      Field f = detail::unpack1(M, x);
      VField out(*M.g);
      stencil::ddx_T(M, f, out.x);
      stencil::ddy_T(M, f, out.y);
      detail::pack2(M, out, y);
    };
    hs.push_back(std::move(h));
  }
  {  // curl
    LinearOperatorHandle h;
    h.name = "curl";
    h.dim_in = 2 * n;
    h.dim_out = n;
    h.apply = [&M](const std::vector<double>& x, std::vector<double>& y) {
      VField u = detail::unpack2(M, x);
      Field out(*M.g);
      curl(M, u, out);
      detail::pack1(M, out, y);
    };
    h.applyT = [&M](const std::vector<double>& x, std::vector<double>& y) {
      Field f = detail::unpack1(M, x);
      VField out(*M.g);
      Field t(*M.g);
      stencil::ddy_T(M, f, t);
      for (int fl : M.nodes) out.x.v[fl] = -t.v[fl];
      stencil::ddx_T(M, f, out.y);
      detail::pack2(M, out, y);
    };
    hs.push_back(std::move(h));
  }
  if (stepper) {
    if (stepper->mode == ParabolicMode::stokes) {
      LinearOperatorHandle h;
      h.name = "leray";
      h.dim_in = h.dim_out = 2 * n;
      auto ap = [&M, stepper](const std::vector<double>& x,
                              std::vector<double>& y) {
        VField u = detail::unpack2(M, x);
        stepper->leray->project(u);
        detail::pack2(M, u, y);
      };
      h.apply = ap;
      h.applyT = ap;  // symmetric
      hs.push_back(std::move(h));

      LinearOperatorHandle s;
      s.name = "stokes_step";
      s.dim_in = s.dim_out = 2 * n;
      s.apply = [&M, stepper](const std::vector<double>& x,
                              std::vector<double>& y) {
        VField u = detail::unpack2(M, x), out(*M.g);
        stepper->stokes_step(0, u, VField(*M.g), out);
        detail::pack2(M, out, y);
      };
      s.applyT = [&M, stepper](const std::vector<double>& x,
                               std::vector<double>& y) {
        VField v = detail::unpack2(M, x), out(*M.g);
        stepper->stokes_step_T(0, v, out);
        detail::pack2(M, out, y);
      };
      hs.push_back(std::move(s));
    } else {
      LinearOperatorHandle s;
      s.name = "heat_step";
      s.dim_in = s.dim_out = n;
      s.apply = [&M, stepper](const std::vector<double>& x,
                              std::vector<double>& y) {
        Field u = detail::unpack1(M, x), out(*M.g);
        stepper->heat_step(0, u, Field(*M.g), out);
        detail::pack1(M, out, y);
      };
      s.applyT = [&M, stepper](const std::vector<double>& x,
                               std::vector<double>& y) {
        Field v = detail::unpack1(M, x), out(*M.g);
        stepper->heat_step_T(0, v, out);
        detail::pack1(M, out, y);
      };
      hs.push_back(std::move(s));
    }
  }
  return hs;
}

}  // namespace carlab
