#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "carlab/geometry.hpp"

namespace carlab {

/// Scalar field on the full lattice; entries outside the active mask are
/// kept at zero (homogeneous Dirichlet ghosts).
struct Field {
  const Grid* g = nullptr;
  std::vector<double> v;

  Field() = default;
  explicit Field(const Grid& grid) : g(&grid), v(grid.in_O.size(), 0.0) {}

  double& operator[](int flat) { return v[flat]; }
  double operator[](int flat) const { return v[flat]; }

  /// Bilinear interpolation; zero outside the lattice.
  double interp(Vec2 p) const {
    double fx = (p.x - g->origin.x) / g->h;
    double fy = (p.y - g->origin.y) / g->h;
    int i = int(std::floor(fx)), j = int(std::floor(fy));
    if (i < 0 || j < 0 || i + 1 >= g->nx || j + 1 >= g->ny) return 0.0;
    double ax = fx - i, ay = fy - j;
    const double* row0 = v.data() + size_t(j) * g->nx + i;
    const double* row1 = row0 + g->nx;
    return (1 - ax) * (1 - ay) * row0[0] + ax * (1 - ay) * row0[1] +
           (1 - ax) * ay * row1[0] + ax * ay * row1[1];
  }
};

struct VField {
  Field x, y;
  VField() = default;
  explicit VField(const Grid& g) : x(g), y(g) {}
  Vec2 interp(Vec2 p) const { return {x.interp(p), y.interp(p)}; }
};

inline double l2_norm(const Field& f, const std::vector<int>& mask_idx) {
  double s = 0;
  for (int i : mask_idx) s += f.v[i] * f.v[i];
  return std::sqrt(s * f.g->h * f.g->h);
}
inline double l2_norm(const VField& f, const std::vector<int>& mask_idx) {
  double s = 0;
  for (int i : mask_idx) s += f.x.v[i] * f.x.v[i] + f.y.v[i] * f.y.v[i];
  return std::sqrt(s * f.x.g->h * f.x.g->h);
}
inline double linf_norm(const Field& f, const std::vector<int>& mask_idx) {
  double s = 0;
  for (int i : mask_idx) s = std::max(s, std::abs(f.v[i]));
  return s;
}
inline double dot(const Field& a, const Field& b,
                  const std::vector<int>& mask_idx) {
  double s = 0;
  for (int i : mask_idx) s += a.v[i] * b.v[i];
  return s * a.g->h * a.g->h;
}
inline double dot(const VField& a, const VField& b,
                  const std::vector<int>& mask_idx) {
  return dot(a.x, b.x, mask_idx) + dot(a.y, b.y, mask_idx);
}

/// Uniform time grid t_k = k dt, k = 0..nt; dt = horizon / nt. The horizon
/// is usually T - dt_min so that weight evaluations stay below the theta
/// blow-up time.
struct TimeGrid {
  double dt = 0;
  int nt = 0;
  double t(int k) const { return k * dt; }
  double horizon() const { return nt * dt; }
  double quad_w(int k) const { return (k == 0 || k == nt) ? 0.5 : 1.0; }
};

struct FieldSeries {
  TimeGrid tg;
  std::vector<Field> at;  // size nt+1

  FieldSeries() = default;
  FieldSeries(const Grid& g, const TimeGrid& t) : tg(t) {
    at.assign(t.nt + 1, Field(g));
  }
  double eval(double t, Vec2 p) const {
    double s = std::clamp(t / tg.dt, 0.0, double(tg.nt));
    int k = std::min(int(s), tg.nt - 1);
    double a = s - k;
    return (1 - a) * at[k].interp(p) + a * at[k + 1].interp(p);
  }
};

struct VFieldSeries {
  TimeGrid tg;
  std::vector<VField> at;

  VFieldSeries() = default;
  VFieldSeries(const Grid& g, const TimeGrid& t) : tg(t) {
    at.assign(t.nt + 1, VField(g));
  }
  Vec2 eval(double t, Vec2 p) const {
    if (at.empty()) return {0, 0};
    double s = std::clamp(t / tg.dt, 0.0, double(tg.nt));
    int k = std::min(int(s), tg.nt - 1);
    double a = s - k;
    Vec2 lo = at[k].interp(p), hi = at[k + 1].interp(p);
    return (1 - a) * lo + a * hi;
  }
  bool empty() const { return at.empty(); }
};

/// Space-time L2 norm: trapezoid in time over masked h^2 sums.
inline double l2_norm(const VFieldSeries& f, const std::vector<int>& mask_idx) {
  double s = 0;
  for (int k = 0; k <= f.tg.nt; ++k) {
    double n = l2_norm(f.at[k], mask_idx);
    s += f.tg.quad_w(k) * n * n * f.tg.dt;
  }
  return std::sqrt(s);
}
inline double l2_norm(const FieldSeries& f, const std::vector<int>& mask_idx) {
  double s = 0;
  for (int k = 0; k <= f.tg.nt; ++k) {
    double n = l2_norm(f.at[k], mask_idx);
    s += f.tg.quad_w(k) * n * n * f.tg.dt;
  }
  return std::sqrt(s);
}

// --- CSV export (RFC-4180 line endings, '.' decimal) ---

inline void write_csv_field(const std::string& path, const Field& f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  char buf[64];
  for (int j = 0; j < f.g->ny; ++j) {
    std::string line;
    for (int i = 0; i < f.g->nx; ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", f.v[f.g->idx(i, j)]);
      if (i) line += ',';
      line += buf;
    }
    out << line << "\r\n";
  }
}

inline void write_csv_mask(const std::string& path, const Grid& g,
                           const std::vector<uint8_t>& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  for (int j = 0; j < g.ny; ++j) {
    std::string line;
    for (int i = 0; i < g.nx; ++i) {
      if (i) line += ',';
      line += mask[g.idx(i, j)] ? '1' : '0';
    }
    out << line << "\r\n";
  }
}

inline void write_csv_rows(const std::string& path,
                           const std::string& header,
                           const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  if (!header.empty()) out << header << "\r\n";
  char buf[64];
  for (const auto& r : rows) {
    std::string line;
    for (size_t i = 0; i < r.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", r[i]);
      if (i) line += ',';
      line += buf;
    }
    out << line << "\r\n";
  }
}

}  // namespace carlab
