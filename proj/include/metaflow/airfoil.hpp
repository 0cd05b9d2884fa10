#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "metaflow/util.hpp"

namespace metaflow {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

/// NACA 4-digit shape parameters, all as fractions of chord.
struct NacaParams {
  double camber = 0.0;          // C
  double camber_position = 0.5; // P
  double thickness = 0.12;      // T

  void validate() const;
};

struct FlowConditions {
  double aoa_deg = 0.0;
  double mach = 0.1;

  void validate() const;
  /// Freestream vector: magnitude mach, direction set by the angle of attack.
  Vec2 freestream() const;
};

/// Closed airfoil contour: trailing edge first, counterclockwise, chord
/// normalized to [0,1] on the x axis.
struct AirfoilContour {
  std::vector<Vec2> points;
};

/// One structured level of the O-grid: ni cells around the loop (periodic),
/// nj cells radially. Cells are indexed j*ni + i.
struct MeshLevel {
  std::size_t ni = 0;
  std::size_t nj = 0;
  std::vector<Vec2> centroids;  // ni*nj
  /// Unordered unique shared-edge cell pairs.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> adjacency;
};

struct MeshHierarchy {
  std::vector<MeshLevel> levels;  // level 0 finest
  /// Grid node coordinates of the finest level, (ni+... ) kept for area checks.
  std::size_t ni0 = 0;
  std::size_t nj0 = 0;
  std::vector<Vec2> nodes0;  // (nj0+1) rings of ni0 points each, periodic in i
};

enum class ShapeDist { Train, Interp, Ood };

/// Standard NACA 4-digit contour with closed (sharp) trailing edge and
/// cosine spacing; 2*n_per_side points.
AirfoilContour naca4_contour(const NacaParams& p, std::size_t n_per_side);

/// Algebraic O-grid between the contour and a circle of radius outer_radius
/// centered at mid-chord. Radial spacing is geometric with the given growth
/// ratio, scaled to span the annulus.
MeshHierarchy build_ogrid(const AirfoilContour& contour, std::size_t radial_layers,
                          double outer_radius, double growth = 1.2);

/// Appends n_levels coarser levels, each merging 2x2 structured cell blocks.
void coarsen(MeshHierarchy& h, std::size_t n_levels);

std::vector<NacaParams> sample_shapes(ShapeDist dist, std::size_t n,
                                      std::uint64_t seed);
std::vector<FlowConditions> sample_conditions(std::size_t n, std::uint64_t seed);

/// Signed area of the quad cell (i,j) of the finest level (positive =
/// counterclockwise).
double cell_signed_area(const MeshHierarchy& h, std::size_t i, std::size_t j);

/// NACA 4-digit half-thickness at chord position x (closed trailing edge).
double naca4_thickness(double t, double x);
/// NACA 4-digit camber line at chord position x.
double naca4_camber(double c, double p, double x);

}  // namespace metaflow
