#include "metaflow/airfoil.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace metaflow {

namespace {

constexpr double kPi = std::numbers::pi;

double camber_slope(double x, double c, double p) {
  if (c == 0.0) return 0.0;
  if (x < p) return 2.0 * c / (p * p) * (p - x);
  return 2.0 * c / ((1.0 - p) * (1.0 - p)) * (p - x);
}

}  // namespace

double naca4_thickness(double t, double x) {
  // closed trailing edge coefficient set
  return 5.0 * t *
         (0.2969 * std::sqrt(x) - 0.1260 * x - 0.3516 * x * x + 0.2843 * x * x * x -
          0.1036 * x * x * x * x);
}

double naca4_camber(double c, double p, double x) {
  if (c == 0.0) return 0.0;
  if (x < p) return c / (p * p) * (2.0 * p * x - x * x);
  return c / ((1.0 - p) * (1.0 - p)) * ((1.0 - 2.0 * p) + 2.0 * p * x - x * x);
}

void NacaParams::validate() const {
  if (!(camber >= 0.0 && camber <= 0.12))
    throw ConfigError("NACA camber C out of range [0, 0.12]: " + std::to_string(camber));
  if (camber > 0.0 && !(camber_position >= 0.05 && camber_position <= 0.95))
    throw ConfigError("NACA camber position P out of range [0.05, 0.95]: " +
                      std::to_string(camber_position));
  if (!(thickness >= 0.03 && thickness <= 0.35))
    throw ConfigError("NACA thickness T out of range [0.03, 0.35]: " +
                      std::to_string(thickness));
}

void FlowConditions::validate() const {
  if (!(aoa_deg > -30.0 && aoa_deg < 30.0))
    throw ConfigError("angle of attack out of range (-30, 30): " +
                      std::to_string(aoa_deg));
  if (!(mach > 0.0 && mach < 0.7))
    throw ConfigError("Mach number out of range (0, 0.7): " + std::to_string(mach));
}

Vec2 FlowConditions::freestream() const {
  const double a = aoa_deg * kPi / 180.0;
  return {mach * std::cos(a), mach * std::sin(a)};
}

namespace {
// Corner order (i,j) -> (i,j+1) -> (i+1,j+1) -> (i+1,j): counterclockwise
// for a counterclockwise contour with outward radial lines.
double cell_area_from_nodes(const MeshHierarchy& h, std::size_t i, std::size_t j) {
  const std::size_t ni = h.ni0;
  const std::size_t inext = (i + 1) % ni;
  const Vec2 a = h.nodes0[j * ni + i];
  const Vec2 b = h.nodes0[(j + 1) * ni + i];
  const Vec2 c = h.nodes0[(j + 1) * ni + inext];
  const Vec2 d = h.nodes0[j * ni + inext];
  return 0.5 * ((a.x * b.y - b.x * a.y) + (b.x * c.y - c.x * b.y) +
                (c.x * d.y - d.x * c.y) + (d.x * a.y - a.x * d.y));
}
}  // namespace

AirfoilContour naca4_contour(const NacaParams& p, std::size_t n_per_side) {
  p.validate();
  if (n_per_side < 16)
    throw ConfigError("naca4_contour: need at least 16 points per side");

  const std::size_t n = n_per_side;
  std::vector<double> xs(n + 1);
  for (std::size_t i = 0; i <= n; ++i)
    xs[i] = 0.5 * (1.0 - std::cos(kPi * static_cast<double>(i) / static_cast<double>(n)));

  auto surface_point = [&](double x, bool upper) -> Vec2 {
    const double yt = naca4_thickness(p.thickness, x);
    const double yc = naca4_camber(p.camber, p.camber_position, x);
    const double theta = std::atan(camber_slope(x, p.camber, p.camber_position));
    if (upper) return {x - yt * std::sin(theta), yc + yt * std::cos(theta)};
    return {x + yt * std::sin(theta), yc - yt * std::cos(theta)};
  };

  AirfoilContour c;
  c.points.reserve(2 * n);
  // trailing edge -> upper surface -> leading edge -> lower surface
  for (std::size_t i = n; i-- > 0;) c.points.push_back(surface_point(xs[i + 1], true));
  c.points.push_back(surface_point(xs[0], true));  // leading edge (x = 0)
  for (std::size_t i = 1; i < n; ++i) c.points.push_back(surface_point(xs[i], false));

  // exact trailing edge
  c.points.front() = {1.0, 0.0};
  return c;
}

MeshHierarchy build_ogrid(const AirfoilContour& contour, std::size_t radial_layers,
                          double outer_radius, double growth) {
  if (radial_layers < 4) throw ConfigError("build_ogrid: need at least 4 radial layers");
  if (outer_radius < 5.0) throw ConfigError("build_ogrid: outer radius must be >= 5");
  if (growth <= 0.0) throw ConfigError("build_ogrid: growth ratio must be positive");
  const std::size_t ni = contour.points.size();
  if (ni < 3) throw ConfigError("build_ogrid: degenerate contour");

  const Vec2 center{0.5, 0.0};
  // Normalized cumulative geometric spacing from the surface to the circle.
  std::vector<double> t(radial_layers + 1, 0.0);
  {
    double total = 0.0, hstep = 1.0;
    for (std::size_t j = 0; j < radial_layers; ++j) {
      total += hstep;
      t[j + 1] = total;
      hstep *= growth;
    }
    for (auto& v : t) v /= total;
  }

  MeshHierarchy h;
  h.ni0 = ni;
  h.nj0 = radial_layers;
  h.nodes0.resize(ni * (radial_layers + 1));
  for (std::size_t i = 0; i < ni; ++i) {
    const Vec2 s = contour.points[i];
    const double dx = s.x - center.x, dy = s.y - center.y;
    const double r = std::hypot(dx, dy);
    if (r < 1e-12) throw NumericError("build_ogrid: surface point at mesh center");
    const Vec2 outer{center.x + dx / r * outer_radius, center.y + dy / r * outer_radius};
    for (std::size_t j = 0; j <= radial_layers; ++j) {
      h.nodes0[j * ni + i] = {s.x + (outer.x - s.x) * t[j], s.y + (outer.y - s.y) * t[j]};
    }
  }

  // Reject meshes where projecting the surface loop outward folded cells.
  for (std::size_t j = 0; j < radial_layers; ++j)
    for (std::size_t i = 0; i < ni; ++i)
      if (!(cell_area_from_nodes(h, i, j) > 0.0))
        throw NumericError("build_ogrid: folded cell at ring " + std::to_string(j));

  MeshLevel lvl;
  lvl.ni = ni;
  lvl.nj = radial_layers;
  lvl.centroids.resize(ni * radial_layers);
  for (std::size_t j = 0; j < radial_layers; ++j) {
    for (std::size_t i = 0; i < ni; ++i) {
      const std::size_t inext = (i + 1) % ni;
      const Vec2 a = h.nodes0[j * ni + i];
      const Vec2 b = h.nodes0[j * ni + inext];
      const Vec2 c = h.nodes0[(j + 1) * ni + inext];
      const Vec2 d = h.nodes0[(j + 1) * ni + i];
      lvl.centroids[j * ni + i] = {(a.x + b.x + c.x + d.x) / 4.0,
                                   (a.y + b.y + c.y + d.y) / 4.0};
    }
  }
  // shared-edge adjacency: periodic around the loop, bounded radially
  for (std::size_t j = 0; j < radial_layers; ++j) {
    for (std::size_t i = 0; i < ni; ++i) {
      const std::uint32_t id = static_cast<std::uint32_t>(j * ni + i);
      const std::uint32_t right = static_cast<std::uint32_t>(j * ni + (i + 1) % ni);
      lvl.adjacency.emplace_back(id, right);
      if (j + 1 < radial_layers) {
        const std::uint32_t up = static_cast<std::uint32_t>((j + 1) * ni + i);
        lvl.adjacency.emplace_back(id, up);
      }
    }
  }
  h.levels.push_back(std::move(lvl));
  return h;
}

double cell_signed_area(const MeshHierarchy& h, std::size_t i, std::size_t j) {
  return cell_area_from_nodes(h, i, j);
}

void coarsen(MeshHierarchy& h, std::size_t n_levels) {
  if (h.levels.empty()) throw ConfigError("coarsen: empty hierarchy");
  {
    const auto& l0 = h.levels.front();
    const std::size_t div = std::size_t(1) << n_levels;
    if (l0.ni % div != 0 || l0.nj % div != 0)
      throw ConfigError("coarsen: level-0 dimensions " + std::to_string(l0.ni) + "x" +
                        std::to_string(l0.nj) + " not divisible by 2^" +
                        std::to_string(n_levels));
  }
  for (std::size_t lev = 0; lev < n_levels; ++lev) {
    const MeshLevel& fine = h.levels.back();
    MeshLevel coarse;
    coarse.ni = fine.ni / 2;
    coarse.nj = fine.nj / 2;
    coarse.centroids.resize(coarse.ni * coarse.nj);
    for (std::size_t J = 0; J < coarse.nj; ++J) {
      for (std::size_t I = 0; I < coarse.ni; ++I) {
        Vec2 acc{0.0, 0.0};
        for (std::size_t dj = 0; dj < 2; ++dj)
          for (std::size_t di = 0; di < 2; ++di) {
            const Vec2 c = fine.centroids[(2 * J + dj) * fine.ni + (2 * I + di)];
            acc.x += c.x;
            acc.y += c.y;
          }
        coarse.centroids[J * coarse.ni + I] = {acc.x / 4.0, acc.y / 4.0};
      }
    }
    for (std::size_t J = 0; J < coarse.nj; ++J) {
      for (std::size_t I = 0; I < coarse.ni; ++I) {
        const std::uint32_t id = static_cast<std::uint32_t>(J * coarse.ni + I);
        const std::uint32_t right =
            static_cast<std::uint32_t>(J * coarse.ni + (I + 1) % coarse.ni);
        if (coarse.ni > 2 || (coarse.ni == 2 && I == 0))
          coarse.adjacency.emplace_back(id, right);
        if (J + 1 < coarse.nj) {
          const std::uint32_t up = static_cast<std::uint32_t>((J + 1) * coarse.ni + I);
          coarse.adjacency.emplace_back(id, up);
        }
      }
    }
    h.levels.push_back(std::move(coarse));
  }
}

std::vector<NacaParams> sample_shapes(ShapeDist dist, std::size_t n,
                                      std::uint64_t seed) {
  const char* tag = dist == ShapeDist::Train   ? "shapes.train"
                    : dist == ShapeDist::Interp ? "shapes.interp"
                                                : "shapes.ood";
  CounterRng rc(seed, std::string(tag) + ".C");
  CounterRng rp(seed, std::string(tag) + ".P");
  CounterRng rt(seed, std::string(tag) + ".T");
  std::vector<NacaParams> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    NacaParams p;
    p.camber = rc.uniform(i, 0.0, 0.09);
    if (dist == ShapeDist::Ood) {
      p.camber_position = rp.uniform(i, 0.2, 0.8);
      p.thickness = rt.uniform(i, 0.05, 0.10);
    } else {
      p.camber_position = rp.uniform(i, 0.4, 0.6);
      p.thickness = rt.uniform(i, 0.1, 0.3);
    }
    out[i] = p;
  }
  return out;
}

std::vector<FlowConditions> sample_conditions(std::size_t n, std::uint64_t seed) {
  CounterRng ra(seed, "conditions.aoa");
  CounterRng rm(seed, "conditions.mach");
  std::vector<FlowConditions> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].aoa_deg = ra.uniform(i, -22.5, 22.5);
    out[i].mach = rm.uniform(i, 0.03, 0.3);
  }
  return out;
}

}  // namespace metaflow
