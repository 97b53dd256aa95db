#include "ncf/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ncf/random.hpp"

namespace ncf {

double teacher_label(const Vec& x) {
  const double a = std::max(0.0, x[0]);
  const double b = std::max(0.0, -x[0]);
  return 5.0 * a * a + 4.0 * b * b;
}

namespace {
Dataset circle_from_angles(const std::vector<double>& angles) {
  const auto n = static_cast<Index>(angles.size());
  Mat X(2, n);
  Vec y(n);
  for (Index i = 0; i < n; ++i) {
    const double t = angles[static_cast<std::size_t>(i)];
    X(0, i) = std::cos(t);
    X(1, i) = std::sin(t);
    y[i] = teacher_label(X.col(i));
  }
  return Dataset(std::move(X), std::move(y), true);
}
}  // namespace

Dataset uniform_circle_dataset(int n) {
  require_domain(n >= 1, "uniform_circle_dataset: need n >= 1");
  std::vector<double> angles(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) angles[static_cast<std::size_t>(k)] = 2.0 * std::numbers::pi * k / n;
  return circle_from_angles(angles);
}

Dataset random_circle_dataset(int n, std::uint64_t seed) {
  require_domain(n >= 1, "random_circle_dataset: need n >= 1");
  CounterRng rng(seed, /*stream=*/0xda7a);
  std::vector<double> angles(static_cast<std::size_t>(n));
  for (auto& a : angles) a = 2.0 * std::numbers::pi * rng.uniform();
  return circle_from_angles(angles);
}

}  // namespace ncf
