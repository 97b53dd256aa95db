#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "ncf/ncf.hpp"

namespace ncf {

struct ThetaGridResult {
  std::vector<double> angles;                           // isolated stationary angles in [0, 2pi)
  std::vector<std::pair<double, double>> flat;          // arcs where |n'| stays below the flat tolerance
  double scale = 0.0;                                    // max |n'| on the grid

  /// Angular distance (radians, circular) from theta to the nearest stationary
  /// angle or flat arc; +inf when the set is empty.
  double distance(double theta) const;
};

struct ThetaGridOptions {
  int grid = 100000;
  double bisect_tol = 1e-12;
  double flat_tol = 1e-9;  // relative to max |n'|
};

/// Stationary set of a periodic function on the circle, from its derivative:
/// sign changes of dn on a uniform grid, refined by bisection, plus flat arcs.
ThetaGridResult theta_grid_kkt(const std::function<double(double)>& dn, const ThetaGridOptions& options = {});

/// n(theta) = N([cos theta, sin theta]) for a single-block problem with
/// two-dimensional weights.
double ncf_theta(const NCFProblem& p, double theta);
double ncf_theta_derivative(const NCFProblem& p, double theta, const KinkPolicy& policy);

/// theta_grid_kkt applied to a 2-D single-block NCF.
ThetaGridResult theta_grid_kkt(const NCFProblem& p, const ThetaGridOptions& options = {});

/// atan2 angle of a 2-D vector mapped into [0, 2pi).
double polar_angle(const Vec& u);

/// Circular distance between two angles.
double circular_distance(double a, double b);

}  // namespace ncf
