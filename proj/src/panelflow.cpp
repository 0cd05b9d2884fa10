#include "metaflow/panelflow.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace metaflow {

namespace {

constexpr double kPi = std::numbers::pi;

struct PanelFrame {
  Vec2 a, b;     // endpoints
  Vec2 tang;     // unit tangent a->b
  Vec2 norm;     // unit left normal (tang, norm) right handed
  double len;
};

PanelFrame panel_frame(const Vec2& a, const Vec2& b) {
  PanelFrame f;
  f.a = a;
  f.b = b;
  const double dx = b.x - a.x, dy = b.y - a.y;
  f.len = std::hypot(dx, dy);
  if (f.len < 1e-14) throw NumericError("degenerate zero-length panel");
  f.tang = {dx / f.len, dy / f.len};
  f.norm = {-f.tang.y, f.tang.x};
  return f;
}

/// Velocity at P induced by a unit linear vortex distribution on the panel:
/// returns (va, vb) so the actual velocity is va*gamma_a + vb*gamma_b.
/// self = evaluation at the panel's own midpoint, approached from the
/// flow side (negative local normal).
std::pair<Vec2, Vec2> panel_influence(const PanelFrame& f, const Vec2& p, bool self) {
  const double l = f.len;
  double ua, ub, wa, wb;
  if (self) {
    ua = 0.25;
    ub = 0.25;
    wa = 1.0 / (2.0 * kPi);
    wb = -1.0 / (2.0 * kPi);
  } else {
    const double rx = p.x - f.a.x, ry = p.y - f.a.y;
    const double x = rx * f.tang.x + ry * f.tang.y;
    const double z = rx * f.norm.x + ry * f.norm.y;
    const double r1s = std::max(x * x + z * z, 1e-30);
    const double r2s = std::max((x - l) * (x - l) + z * z, 1e-30);
    const double beta = std::atan2(z * l, x * (x - l) + z * z);
    const double lr = 0.5 * std::log(r2s / r1s);
    const double j1 = x * beta + z * lr;
    const double j2 = -x * lr - l + z * beta;
    ua = -(beta - j1 / l) / (2.0 * kPi);
    ub = -(j1 / l) / (2.0 * kPi);
    wa = (-lr - j2 / l) / (2.0 * kPi);
    wb = (j2 / l) / (2.0 * kPi);
  }
  const Vec2 va{ua * f.tang.x + wa * f.norm.x, ua * f.tang.y + wa * f.norm.y};
  const Vec2 vb{ub * f.tang.x + wb * f.norm.x, ub * f.tang.y + wb * f.norm.y};
  return {va, vb};
}

/// Gaussian elimination with partial pivoting; a is row-major n x n.
void solve_dense(std::vector<double>& a, std::vector<double>& b, std::size_t n) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    double best = std::abs(a[col * n + col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::abs(a[r * n + col]);
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (best < 1e-13)
      throw NumericError("singular influence matrix (degenerate contour)");
    if (piv != col) {
      for (std::size_t c = col; c < n; ++c) std::swap(a[piv * n + c], a[col * n + c]);
      std::swap(b[piv], b[col]);
    }
    const double inv = 1.0 / a[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double factor = a[r * n + col] * inv;
      if (factor == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= factor * a[col * n + c];
      b[r] -= factor * b[col];
    }
  }
  for (std::size_t r = n; r-- > 0;) {
    double acc = b[r];
    for (std::size_t c = r + 1; c < n; ++c) acc -= a[r * n + c] * b[c];
    b[r] = acc / a[r * n + r];
  }
}

std::vector<PanelFrame> contour_frames(const AirfoilContour& contour) {
  const std::size_t m = contour.points.size();
  if (m < 3) throw ConfigError("solve_panels: contour has fewer than 3 points");
  std::vector<PanelFrame> frames;
  frames.reserve(m);
  for (std::size_t i = 0; i < m; ++i)
    frames.push_back(panel_frame(contour.points[i], contour.points[(i + 1) % m]));
  return frames;
}

}  // namespace

bool point_in_contour(const AirfoilContour& contour, const Vec2& p) {
  // even-odd ray casting
  bool inside = false;
  const std::size_t n = contour.points.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2 a = contour.points[i], b = contour.points[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double xint = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
      if (p.x < xint) inside = !inside;
    }
  }
  return inside;
}

PanelSolution solve_panels(const AirfoilContour& contour, const FlowConditions& cond) {
  cond.validate();
  const auto frames = contour_frames(contour);
  const std::size_t m = frames.size();
  const std::size_t n = m + 1;  // node strengths, trailing edge split
  const Vec2 u0 = cond.freestream();

  std::vector<double> a(n * n, 0.0), rhs(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const PanelFrame& fi = frames[i];
    const Vec2 mid{0.5 * (fi.a.x + fi.b.x), 0.5 * (fi.a.y + fi.b.y)};
    // outward normal points into the flow: right of the tangent
    const Vec2 nout{fi.tang.y, -fi.tang.x};
    for (std::size_t j = 0; j < m; ++j) {
      const auto [va, vb] = panel_influence(frames[j], mid, i == j);
      a[i * n + j] += va.x * nout.x + va.y * nout.y;
      a[i * n + j + 1] += vb.x * nout.x + vb.y * nout.y;
    }
    rhs[i] = -(u0.x * nout.x + u0.y * nout.y);
  }
  // Kutta closure: the two trailing-edge strengths cancel
  a[m * n + 0] = 1.0;
  a[m * n + m] = 1.0;
  rhs[m] = 0.0;

  double scale = 0.0;
  for (double v : a) scale = std::max(scale, std::abs(v));

  std::vector<double> mat = a;
  solve_dense(mat, rhs, n);

  PanelSolution sol;
  sol.gamma = std::move(rhs);
  sol.u0 = u0;
  sol.mach = cond.mach;
  sol.contour = contour;
  sol.matrix_scale = scale;
  sol.kutta_residual = std::abs(sol.gamma.front() + sol.gamma.back());

  double circulation = 0.0;
  for (std::size_t j = 0; j < m; ++j)
    circulation += 0.5 * (sol.gamma[j] + sol.gamma[j + 1]) * frames[j].len;
  // counterclockwise-positive circulation lifts downward, hence the sign
  sol.cl = -2.0 * circulation / cond.mach;
  return sol;
}

FlowField evaluate_field(const PanelSolution& sol, const std::vector<Vec2>& points) {
  const auto frames = contour_frames(sol.contour);
  const std::size_t m = frames.size();
  const double pg = 1.0 / std::sqrt(1.0 - sol.mach * sol.mach);
  const double q0 = sol.u0.x * sol.u0.x + sol.u0.y * sol.u0.y;

  FlowField out;
  out.velocity.resize(points.size());
  out.pressure.resize(points.size());
  for (std::size_t p = 0; p < points.size(); ++p) {
    if (point_in_contour(sol.contour, points[p]))
      throw NumericError("evaluate_field: query point " + std::to_string(p) +
                         " lies inside the airfoil");
    Vec2 v = sol.u0;
    for (std::size_t j = 0; j < m; ++j) {
      const auto [va, vb] = panel_influence(frames[j], points[p], false);
      v.x += va.x * sol.gamma[j] + vb.x * sol.gamma[j + 1];
      v.y += va.y * sol.gamma[j] + vb.y * sol.gamma[j + 1];
    }
    out.velocity[p] = v;
    out.pressure[p] = 0.5 * (q0 - (v.x * v.x + v.y * v.y)) * pg;
  }
  return out;
}

FlowField normalize_fields(const FlowField& f, const Vec2& u0) {
  const double mag = std::hypot(u0.x, u0.y);
  if (!(mag > 0.0)) throw NumericError("normalize_fields: zero freestream");
  FlowField out;
  out.velocity.resize(f.velocity.size());
  out.pressure.resize(f.pressure.size());
  for (std::size_t i = 0; i < f.velocity.size(); ++i)
    out.velocity[i] = {f.velocity[i].x / mag, f.velocity[i].y / mag};
  for (std::size_t i = 0; i < f.pressure.size(); ++i)
    out.pressure[i] = f.pressure[i] / (mag * mag);
  return out;
}

}  // namespace metaflow
