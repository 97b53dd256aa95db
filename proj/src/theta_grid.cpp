#include "ncf/theta_grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace ncf {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap(double t) {
  t = std::fmod(t, kTwoPi);
  return t < 0.0 ? t + kTwoPi : t;
}
}  // namespace

double circular_distance(double a, double b) {
  const double d = std::abs(wrap(a) - wrap(b));
  return std::min(d, kTwoPi - d);
}

double polar_angle(const Vec& u) {
  require_structure(u.size() == 2, "polar_angle: need a 2-D vector");
  return wrap(std::atan2(u[1], u[0]));
}

double ThetaGridResult::distance(double theta) const {
  double best = std::numeric_limits<double>::infinity();
  for (double a : angles) best = std::min(best, circular_distance(theta, a));
  const double t = wrap(theta);
  for (const auto& [lo, hi] : flat) {
    // Arcs are stored with lo <= hi, possibly with hi beyond 2pi when wrapping.
    if ((t >= lo && t <= hi) || (t + kTwoPi >= lo && t + kTwoPi <= hi)) return 0.0;
    best = std::min({best, circular_distance(t, lo), circular_distance(t, hi)});
  }
  return best;
}

ThetaGridResult theta_grid_kkt(const std::function<double(double)>& dn, const ThetaGridOptions& options) {
  require_domain(options.grid >= 8, "theta_grid_kkt: grid too small");
  const int m = options.grid;
  const double h = kTwoPi / m;
  std::vector<double> d(static_cast<std::size_t>(m));
  ThetaGridResult out;
  for (int k = 0; k < m; ++k) {
    d[static_cast<std::size_t>(k)] = dn(k * h);
    out.scale = std::max(out.scale, std::abs(d[static_cast<std::size_t>(k)]));
  }
  if (out.scale == 0.0) {
    out.flat.emplace_back(0.0, kTwoPi);
    return out;
  }
  const double flat_level = options.flat_tol * out.scale;
  auto is_flat = [&](int k) { return std::abs(d[static_cast<std::size_t>((k % m + m) % m)]) <= flat_level; };

  // Flat arcs: maximal runs of flat grid points, started after a non-flat point
  // so a run crossing theta = 0 is reported once.
  int first_steep = 0;
  while (first_steep < m && is_flat(first_steep)) ++first_steep;
  for (int k = first_steep + 1; k <= first_steep + m; ++k) {
    if (!is_flat(k) || is_flat(k - 1)) continue;
    int e = k;
    while (is_flat(e + 1) && e + 1 < k + m) ++e;
    if (e > k) {
      out.flat.emplace_back(wrap(k * h), wrap(k * h) + (e - k) * h);
    } else {
      out.angles.push_back(wrap(k * h));  // isolated zero on a grid point
    }
  }

  // Sign changes between non-flat neighbours.
  for (int k = 0; k < m; ++k) {
    const int k1 = (k + 1) % m;
    const double a = d[static_cast<std::size_t>(k)];
    const double b = d[static_cast<std::size_t>(k1)];
    if (is_flat(k) || is_flat(k1)) continue;
    if ((a > 0.0) == (b > 0.0)) continue;
    double lo = k * h;
    double hi = lo + h;
    double flo = a;
    while (hi - lo > options.bisect_tol) {
      const double mid = 0.5 * (lo + hi);
      const double fm = dn(mid);
      if (fm == 0.0) {
        lo = hi = mid;
        break;
      }
      if ((fm > 0.0) == (flo > 0.0)) {
        lo = mid;
        flo = fm;
      } else {
        hi = mid;
      }
    }
    out.angles.push_back(wrap(0.5 * (lo + hi)));
  }
  std::sort(out.angles.begin(), out.angles.end());
  return out;
}

double ncf_theta(const NCFProblem& p, double theta) {
  return ncf_value(p, Vec{{std::cos(theta), std::sin(theta)}});
}

double ncf_theta_derivative(const NCFProblem& p, double theta, const KinkPolicy& policy) {
  const Vec u{{std::cos(theta), std::sin(theta)}};
  const Vec tangent{{-std::sin(theta), std::cos(theta)}};
  return ncf_grad(p, u, policy).dot(tangent);
}

ThetaGridResult theta_grid_kkt(const NCFProblem& p, const ThetaGridOptions& options) {
  require_structure(p.model.param_dim() == 2 && p.model.blocks().size() == 1,
                    "theta_grid_kkt: needs a single block with two weights");
  const auto policy = KinkPolicy::defaults(p.model.alpha());
  return theta_grid_kkt([&](double t) { return ncf_theta_derivative(p, t, policy); }, options);
}

}  // namespace ncf
