#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace carlab {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline Vec2 operator*(Vec2 a, double s) { return {s * a.x, s * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::sqrt(dot(a, a)); }
inline Vec2 normalized(Vec2 a) {
  double n = norm(a);
  return n > 0 ? Vec2{a.x / n, a.y / n} : Vec2{0, 0};
}

/// Axis-aligned box or disc given by an exact signed distance function
/// (negative inside).
struct Shape {
  enum class Kind { box, disc } kind = Kind::box;
  Vec2 lo{}, hi{};    // box corners
  Vec2 center{};      // disc
  double radius = 0;  // disc

  static Shape make_box(Vec2 lo, Vec2 hi) {
    Shape s;
    s.kind = Kind::box;
    s.lo = lo;
    s.hi = hi;
    return s;
  }
  static Shape make_disc(Vec2 c, double r) {
    Shape s;
    s.kind = Kind::disc;
    s.center = c;
    s.radius = r;
    return s;
  }

  double sdf(Vec2 p) const {
    if (kind == Kind::disc) return norm(p - center) - radius;
    Vec2 c = 0.5 * (lo + hi);
    Vec2 half = 0.5 * (hi - lo);
    double qx = std::abs(p.x - c.x) - half.x;
    double qy = std::abs(p.y - c.y) - half.y;
    double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
    return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0);
  }

  /// Unit outward normal direction of the level set through p.
  Vec2 sdf_grad(Vec2 p) const {
    if (kind == Kind::disc) {
      Vec2 d = p - center;
      double n = norm(d);
      return n > 1e-14 ? (1.0 / n) * d : Vec2{1, 0};
    }
    Vec2 c = 0.5 * (lo + hi);
    Vec2 half = 0.5 * (hi - lo);
    double sx = p.x < c.x ? -1.0 : 1.0;
    double sy = p.y < c.y ? -1.0 : 1.0;
    double qx = std::abs(p.x - c.x) - half.x;
    double qy = std::abs(p.y - c.y) - half.y;
    if (qx > 0 && qy > 0) return normalized(Vec2{sx * qx, sy * qy});
    if (qx >= qy) return {sx, 0};
    return {0, sy};
  }

  bool inside(Vec2 p) const { return sdf(p) < 0.0; }
  double dist(Vec2 p) const { return std::max(sdf(p), 0.0); }
};

namespace detail {
inline double dist_point_segment(Vec2 p, Vec2 a, Vec2 b) {
  Vec2 ab = b - a;
  double t = dot(p - a, ab) / std::max(dot(ab, ab), 1e-300);
  t = std::clamp(t, 0.0, 1.0);
  return norm(p - (a + t * ab));
}
}  // namespace detail

/// Control subregion: axis-aligned box or an annular sector
/// {r0<=r<=r1, a0<=angle<=a1} around a center.
struct Region {
  enum class Kind { box, annular_sector } kind = Kind::box;
  Vec2 lo{}, hi{};  // box
  Vec2 center{};    // sector
  double r0 = 0, r1 = 0, a0 = 0, a1 = 0;

  static Region make_box(Vec2 lo, Vec2 hi) {
    Region r;
    r.kind = Kind::box;
    r.lo = lo;
    r.hi = hi;
    return r;
  }
  static Region make_sector(Vec2 c, double r0, double r1, double a0, double a1) {
    Region r;
    r.kind = Kind::annular_sector;
    r.center = c;
    r.r0 = r0;
    r.r1 = r1;
    r.a0 = a0;
    r.a1 = a1;
    return r;
  }

  bool contains(Vec2 p) const {
    if (kind == Kind::box)
      return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y;
    Vec2 d = p - center;
    double r = norm(d);
    if (r < r0 || r > r1) return false;
    double a = std::atan2(d.y, d.x);
    if (a < 0) a += 2 * M_PI;
    return a >= a0 && a <= a1;
  }

  /// Distance from p to the region (0 inside).
  double dist(Vec2 p) const {
    if (contains(p)) return 0.0;
    if (kind == Kind::box) {
      double dx = std::max({lo.x - p.x, p.x - hi.x, 0.0});
      double dy = std::max({lo.y - p.y, p.y - hi.y, 0.0});
      return std::sqrt(dx * dx + dy * dy);
    }
    Vec2 d = p - center;
    double r = norm(d);
    double a = std::atan2(d.y, d.x);
    if (a < 0) a += 2 * M_PI;
    double best = 1e300;
    auto ray = [&](double ang) {
      return detail::dist_point_segment(
          p, center + Vec2{r0 * std::cos(ang), r0 * std::sin(ang)},
          center + Vec2{r1 * std::cos(ang), r1 * std::sin(ang)});
    };
    best = std::min(best, ray(a0));
    best = std::min(best, ray(a1));
    if (a >= a0 && a <= a1) {
      best = std::min(best, std::abs(r - r0));
      best = std::min(best, std::abs(r - r1));
    }
    return best;
  }

  /// Clearance from p (inside) to the region boundary; 0 outside.
  double inner_clearance(Vec2 p) const {
    if (!contains(p)) return 0.0;
    if (kind == Kind::box)
      return std::min({p.x - lo.x, hi.x - p.x, p.y - lo.y, hi.y - p.y});
    Vec2 d = p - center;
    double r = norm(d);
    double a = std::atan2(d.y, d.x);
    if (a < 0) a += 2 * M_PI;
    return std::min({r - r0, r1 - r, (a - a0) * r, (a1 - a) * r});
  }

  /// Points sampled along the region boundary, for margin measurements.
  std::vector<Vec2> boundary_samples(int n_per_edge = 400) const {
    std::vector<Vec2> out;
    if (kind == Kind::box) {
      for (int i = 0; i <= n_per_edge; ++i) {
        double t = double(i) / n_per_edge;
        out.push_back({lo.x + t * (hi.x - lo.x), lo.y});
        out.push_back({lo.x + t * (hi.x - lo.x), hi.y});
        out.push_back({lo.x, lo.y + t * (hi.y - lo.y)});
        out.push_back({hi.x, lo.y + t * (hi.y - lo.y)});
      }
      return out;
    }
    for (int i = 0; i <= n_per_edge; ++i) {
      double t = double(i) / n_per_edge;
      double a = a0 + t * (a1 - a0);
      out.push_back(center + Vec2{r0 * std::cos(a), r0 * std::sin(a)});
      out.push_back(center + Vec2{r1 * std::cos(a), r1 * std::sin(a)});
      double r = r0 + t * (r1 - r0);
      out.push_back(center + Vec2{r * std::cos(a0), r * std::sin(a0)});
      out.push_back(center + Vec2{r * std::cos(a1), r * std::sin(a1)});
    }
    return out;
  }
};

/// Smallest distance from the boundary of inner to the boundary of outer,
/// for inner nested inside outer. Returns <= 0 when nesting fails.
inline double nesting_margin(const Region& inner, const Region& outer) {
  double m = 1e300;
  for (const Vec2& p : inner.boundary_samples()) {
    if (!outer.contains(p)) return -outer.dist(p);
    m = std::min(m, outer.inner_clearance(p));
  }
  return m;
}

/// Smallest distance from region boundary to a shape (e.g. omega vs Omega).
inline double region_shape_clearance(const Region& reg, const Shape& shp) {
  double m = 1e300;
  for (const Vec2& p : reg.boundary_samples()) {
    double s = shp.sdf(p);
    if (s < 0) return s;  // region bleeds into the shape
    m = std::min(m, s);
  }
  return m;
}

/// Uniform node-centered lattice covering the bounding box of O (plus a
/// two-cell pad), with inside masks for Omega and O.
struct Grid {
  double h = 0;
  Vec2 origin{};
  int nx = 0, ny = 0;
  std::vector<uint8_t> in_omega, in_O;  // size nx*ny, row-major in j

  int idx(int i, int j) const { return j * nx + i; }
  Vec2 node(int i, int j) const { return {origin.x + i * h, origin.y + j * h}; }
  bool valid(int i, int j) const { return i >= 0 && i < nx && j >= 0 && j < ny; }

  std::vector<int> omega_interior;  // flat indices with in_omega
  std::vector<int> O_interior;      // flat indices with in_O
};

struct BoundaryPoint {
  Vec2 pos;
  Vec2 normal;        // outward unit normal of the owning domain
  bool on_gamma0 = false;
};

struct TrajectorySample;  // fwd

/// Level-set domains Omega in O with boundary partition and nested control
/// regions; immutable after construction.
struct DomainSpec {
  std::string name;
  Shape omega, O;
  Region w_tilde, w_hat, w;  // nested control regions in O \ closure(Omega)
  Grid grid;
  bool has_gamma0 = false;
  int connected_components_K = 1;

  std::vector<BoundaryPoint> boundary_omega;
  std::vector<BoundaryPoint> boundary_O;

  double sdf_omega(Vec2 p) const { return omega.sdf(p); }
  double sdf_O(Vec2 p) const { return O.sdf(p); }
  double dist_omega(Vec2 p) const { return omega.dist(p); }

  bool gamma0(Vec2 p) const {
    if (!has_gamma0) return false;
    // built-in channel: right edge {1} x [0,1]
    return std::abs(p.x - omega.hi.x) < 1e-9 && p.y >= omega.lo.y - 1e-9 &&
           p.y <= omega.hi.y + 1e-9;
  }
};

enum class BoundarySide { inflow, outflow, tangential };

namespace detail {

inline void collect_boundary(const Shape& shp, const DomainSpec& dom,
                             const Grid& g, bool tag_gamma0,
                             std::vector<BoundaryPoint>& out) {
  auto crossing = [&](Vec2 a, Vec2 b) {
    double fa = shp.sdf(a), fb = shp.sdf(b);
    double t = fa / (fa - fb);
    return a + t * (b - a);
  };
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      Vec2 p = g.node(i, j);
      double f = shp.sdf(p);
      if (i + 1 < g.nx) {
        Vec2 q = g.node(i + 1, j);
        double fq = shp.sdf(q);
        if ((f < 0) != (fq < 0)) {
          Vec2 c = crossing(p, q);
          out.push_back({c, shp.sdf_grad(c), tag_gamma0 && dom.gamma0(c)});
        }
      }
      if (j + 1 < g.ny) {
        Vec2 q = g.node(i, j + 1);
        double fq = shp.sdf(q);
        if ((f < 0) != (fq < 0)) {
          Vec2 c = crossing(p, q);
          out.push_back({c, shp.sdf_grad(c), tag_gamma0 && dom.gamma0(c)});
        }
      }
    }
}

}  // namespace detail

struct GeometryConfig {
  std::string geometry = "channel";
  double h = 1.0 / 64;
};

inline DomainSpec build_domain(const GeometryConfig& cfg) {
  DomainSpec dom;
  dom.name = cfg.geometry;
  if (cfg.geometry == "channel") {
    dom.omega = Shape::make_box({0, 0}, {1, 1});
    dom.O = Shape::make_box({-0.5, 0}, {1, 1});
    dom.w = Region::make_box({-0.4, 0.1}, {-0.1, 0.9});
    dom.w_hat = Region::make_box({-0.375, 0.15}, {-0.125, 0.85});
    dom.w_tilde = Region::make_box({-0.35, 0.2}, {-0.15, 0.8});
    dom.has_gamma0 = true;
  } else if (cfg.geometry == "annular") {
    Vec2 c{0.5, 0.5};
    dom.omega = Shape::make_disc(c, 0.4);
    dom.O = Shape::make_disc(c, 0.65);
    auto deg = [](double d) { return d * M_PI / 180.0; };
    dom.w = Region::make_sector(c, 0.44, 0.61, deg(120), deg(240));
    dom.w_hat = Region::make_sector(c, 0.475, 0.575, deg(130), deg(230));
    dom.w_tilde = Region::make_sector(c, 0.51, 0.54, deg(140), deg(220));
    dom.has_gamma0 = false;
  } else {
    throw std::invalid_argument("build_domain: unknown geometry '" +
                                cfg.geometry + "'");
  }

  const double h = cfg.h;
  if (h <= 0) throw std::invalid_argument("build_domain: h must be positive");

  // Nesting: consecutive margins strictly positive, the total
  // w_tilde-to-w margin and the w-to-Omega clearance at least 2h.
  double m1 = nesting_margin(dom.w_tilde, dom.w_hat);
  double m2 = nesting_margin(dom.w_hat, dom.w);
  double m_total = nesting_margin(dom.w_tilde, dom.w);
  double c_omega = region_shape_clearance(dom.w, dom.omega);
  double c_O = 1e300;
  for (const Vec2& p : dom.w.boundary_samples())
    c_O = std::min(c_O, -dom.O.sdf(p));
  if (m1 <= 0 || m2 <= 0)
    throw std::invalid_argument("build_domain: control regions not nested");
  if (m_total < 2 * h || c_omega < 2 * h)
    throw std::invalid_argument(
        "build_domain: nesting margin violated (need >= 2h = " +
        std::to_string(2 * h) + ", got margin " + std::to_string(m_total) +
        ", omega clearance " + std::to_string(c_omega) + ")");
  if (c_O <= 0)
    throw std::invalid_argument("build_domain: omega not inside O");

  // lattice = bbox of O plus a 2-cell pad
  Vec2 blo, bhi;
  if (dom.O.kind == Shape::Kind::box) {
    blo = dom.O.lo;
    bhi = dom.O.hi;
  } else {
    blo = dom.O.center - Vec2{dom.O.radius, dom.O.radius};
    bhi = dom.O.center + Vec2{dom.O.radius, dom.O.radius};
  }
  Grid g;
  g.h = h;
  g.origin = {blo.x - 2 * h, blo.y - 2 * h};
  g.nx = int(std::round((bhi.x - blo.x) / h)) + 5;
  g.ny = int(std::round((bhi.y - blo.y) / h)) + 5;
  g.in_omega.assign(size_t(g.nx) * g.ny, 0);
  g.in_O.assign(size_t(g.nx) * g.ny, 0);
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      Vec2 p = g.node(i, j);
      bool iw = dom.omega.sdf(p) < -1e-12;
      bool iO = dom.O.sdf(p) < -1e-12;
      if (iw && !iO)
        throw std::logic_error("build_domain: Omega mask not inside O mask");
      g.in_omega[g.idx(i, j)] = iw;
      g.in_O[g.idx(i, j)] = iO;
      if (iw) g.omega_interior.push_back(g.idx(i, j));
      if (iO) g.O_interior.push_back(g.idx(i, j));
    }
  dom.grid = g;

  detail::collect_boundary(dom.omega, dom, g, true, dom.boundary_omega);
  detail::collect_boundary(dom.O, dom, g, true, dom.boundary_O);
  if (dom.has_gamma0) {
    bool any = false;
    for (auto& b : dom.boundary_omega) any = any || b.on_gamma0;
    if (!any)
      throw std::logic_error("build_domain: Gamma0 discretization empty");
  }
  return dom;
}

/// Classifies a discrete boundary point of Omega or O by the sign of v.n.
template <class VelocityFn>
BoundarySide classify_boundary_point(const DomainSpec& dom, VelocityFn&& vel,
                                     double t, Vec2 x) {
  constexpr double tol_on = 1e-9;
  constexpr double tol_n = 1e-12;
  const Shape* shp = nullptr;
  if (std::abs(dom.omega.sdf(x)) <= tol_on)
    shp = &dom.omega;
  else if (std::abs(dom.O.sdf(x)) <= tol_on)
    shp = &dom.O;
  else
    throw std::invalid_argument(
        "classify_boundary_point: point not on a discretized boundary");
  double vn = dot(vel(t, x), shp->sdf_grad(x));
  if (vn < -tol_n) return BoundarySide::inflow;
  if (vn > tol_n) return BoundarySide::outflow;
  return BoundarySide::tangential;
}

}  // namespace carlab
