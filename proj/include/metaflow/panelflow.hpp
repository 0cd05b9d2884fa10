#pragma once

#include <vector>

#include "metaflow/airfoil.hpp"

namespace metaflow {

/// Potential-flow solution: linear-strength vortex panels on the contour
/// with a Kutta closure at the sharp trailing edge.
struct PanelSolution {
  std::vector<double> gamma;  // node strengths; first and last sit at the TE
  Vec2 u0;
  double mach = 0.0;
  double cl = 0.0;
  double kutta_residual = 0.0;
  double matrix_scale = 0.0;  // max-abs entry of the influence matrix
  AirfoilContour contour;
};

struct FlowField {
  std::vector<Vec2> velocity;
  std::vector<double> pressure;
};

PanelSolution solve_panels(const AirfoilContour& contour, const FlowConditions& cond);

/// Velocity and pressure at query points outside the contour. Pressure uses
/// Bernoulli with a Prandtl-Glauert factor on the disturbance.
FlowField evaluate_field(const PanelSolution& sol, const std::vector<Vec2>& points);

/// Dimensionless fields: velocity over |u0|, pressure over |u0|^2.
FlowField normalize_fields(const FlowField& f, const Vec2& u0);

bool point_in_contour(const AirfoilContour& contour, const Vec2& p);

}  // namespace metaflow
