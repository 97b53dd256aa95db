#include <doctest.h>

#include <cmath>
#include <numbers>

#include "ncf/models.hpp"
#include "ncf/random.hpp"

using namespace ncf;

namespace {

Vec central_difference(const NetworkModel& m, const Vec& x, const Vec& w, double h = 1e-6) {
  Vec g(w.size());
  for (Index j = 0; j < w.size(); ++j) {
    Vec a = w, b = w;
    a[j] += h;
    b[j] -= h;
    g[j] = (m.eval(x, a) - m.eval(x, b)) / (2 * h);
  }
  return g;
}

std::vector<NetworkModel> zoo() {
  std::vector<NetworkModel> out;
  out.push_back(NetworkModel::two_layer_leaky_relu(0.0, 4, 3));
  out.push_back(NetworkModel::two_layer_leaky_relu(0.2, 3, 2));
  out.push_back(NetworkModel::two_layer_leaky_relu(1.0, 2, 2));
  out.push_back(NetworkModel::squared_relu({1, -1, 1, 1}, 3));
  out.push_back(NetworkModel::squared_relu({1, -1}, 2, 0.3));
  out.push_back(NetworkModel::diagonal(3, 1.0));
  out.push_back(NetworkModel::diagonal(1, -1.0));
  out.push_back(NetworkModel::diagonal(2, 0.5));
  Mat frozen(3, 4);
  frozen << 0.5, -1.0, 0.2, 0.7, 1.1, 0.3, -0.4, 0.0, -0.6, 0.9, 0.8, -0.2;
  out.push_back(NetworkModel::fixed_outer_deep_relu(
      {DeepReluLayer{4, 2, true, {}}, DeepReluLayer{3, 4, false, frozen}, DeepReluLayer{2, 3, true, {}}},
      Vec{{1.0, -0.5}}));
  return out;
}

}  // namespace

TEST_CASE("eval_net examples") {
  const auto sq = NetworkModel::squared_relu({1}, 2);
  const Dataset data(Mat{{1.0}, {0.0}}, Vec{{0.0}});
  CHECK(eval_net(sq, data, Vec{{2.0, 0.0}})[0] == 4.0);

  for (const auto& m : zoo()) {
    const Dataset d(Mat::Ones(m.input_dim(), 3), Vec::Zero(3));
    CHECK(eval_net(m, d, Vec::Zero(m.param_dim())).isZero(0.0));
  }

  const auto tl = NetworkModel::two_layer_leaky_relu(0.0, 1, 2);
  const double r = 1.0 / std::numbers::sqrt2;
  CHECK(tl.eval(Vec{{1.0, 0.0}}, Vec{{1.0, r, r}}) == doctest::Approx(r).epsilon(1e-15));
}

TEST_CASE("dimension mismatch is structural") {
  const auto sq = NetworkModel::squared_relu({1}, 2);
  const Dataset data(Mat::Ones(3, 2), Vec::Zero(2));
  CHECK_THROWS_AS(eval_net(sq, data, Vec::Zero(2)), StructuralError);
  CHECK_THROWS_AS(sq.eval(Vec::Ones(2), Vec::Zero(5)), StructuralError);
}

TEST_CASE("subgrad examples") {
  const auto sq = NetworkModel::squared_relu({1}, 2);
  const Vec g = subgrad_net(sq, Vec{{1.0, 0.0}}, Vec{{2.0, 0.0}}, KinkPolicy::defaults(0.0));
  CHECK(g[0] == 4.0);
  CHECK(g[1] == 0.0);

  const auto lin = NetworkModel::two_layer_leaky_relu(1.0, 1, 2);
  const Vec s = subgrad_net(lin, Vec{{1.0, 0.0}}, Vec{{1.0, 1.0, 0.0}}, KinkPolicy::defaults(1.0));
  CHECK(s[0] == 1.0);
  CHECK(s[1] == 1.0);
  CHECK(s[2] == 0.0);
}

TEST_CASE("finite-difference agreement away from kinks") {
  CounterRng rng(11);
  for (const auto& m : zoo()) {
    int checked = 0;
    for (int trial = 0; trial < 200 && checked < 40; ++trial) {
      const Vec w = rng.normal_vector(m.param_dim());
      const Vec x = rng.normal_vector(m.input_dim());
      const Dataset one(x, Vec::Zero(1));
      if (m.near_kink(one, w, 1e-3)) continue;
      const Vec s = m.subgrad(x, w, KinkPolicy::defaults(m.alpha()));
      const Vec fd = central_difference(m, x, w);
      CHECK((s - fd).norm() <= 1e-5 * (1.0 + s.norm()));
      ++checked;
    }
    CHECK(checked > 10);
  }
}

TEST_CASE("homogeneity property over the zoo") {
  CounterRng rng(21);
  for (const auto& m : zoo()) {
    int failures = 0;
    for (int k = 0; k < 1000; ++k) {
      const Vec w = rng.normal_vector(m.param_dim());
      const Vec x = rng.normal_vector(m.input_dim());
      const double c = 10.0 * rng.uniform();
      const double scale = 1.0 + c * c * std::abs(m.eval(x, w));
      if (check_homogeneity(m, x, w, c) > 1e-12 * scale) ++failures;
    }
    CHECK_MESSAGE(failures == 0, m.name());
  }
}

TEST_CASE("homogeneity edge values") {
  const auto m = NetworkModel::squared_relu({1, -1}, 2);
  const Vec x{{0.3, -0.8}};
  const Vec w{{0.4, 1.2, -0.7, 0.1}};
  CHECK(check_homogeneity(m, x, w, 0.0) == 0.0);
  CHECK(check_homogeneity(m, x, w, 1.0) == 0.0);
  CHECK(check_homogeneity(m, x, w, 3.0) <= 1e-12 * (1.0 + 9.0 * std::abs(m.eval(x, w))));
  CHECK_THROWS_AS(check_homogeneity(m, x, w, -1.0), DomainError);
}

TEST_CASE("Euler identity holds for every kink selection") {
  CounterRng rng(31);
  for (const auto& m : zoo()) {
    const double a = m.alpha();
    int failures = 0;
    for (int k = 0; k < 1000; ++k) {
      Vec w = rng.normal_vector(m.param_dim());
      Vec x = rng.normal_vector(m.input_dim());
      // Every fourth case sits on a kink of the first unit.
      if (k % 4 == 0) {
        if (const auto* tl = std::get_if<TwoLayerLeakyRelu>(&m.kind())) {
          auto u = w.segment(1, tl->input_dim);
          x -= (x.dot(u) / u.squaredNorm()) * u;
        } else if (std::holds_alternative<DiagonalHomogeneous>(m.kind())) {
          w[1] = 0.0;
        }
      }
      for (double s0 : {std::min(a, 1.0), 0.5 * (1.0 + a), std::max(a, 1.0)}) {
        KinkPolicy p;
        p.relu_zero_value = s0;
        if (euler_residual(m, x, w, p) > 1e-10 * (1.0 + std::abs(m.eval(x, w)))) ++failures;
      }
    }
    CHECK_MESSAGE(failures == 0, m.name());
  }
}

TEST_CASE("Euler residual on an exact kink") {
  const auto sq = NetworkModel::squared_relu({1}, 2);
  CHECK(euler_residual(sq, Vec{{1.0, 0.0}}, Vec{{0.0, 1.0}}, KinkPolicy::defaults(0.0)) <= 1e-10);
}

TEST_CASE("subgradient is one-homogeneous under a fixed policy") {
  CounterRng rng(41);
  for (const auto& m : zoo()) {
    const auto p = KinkPolicy::defaults(m.alpha());
    for (int k = 0; k < 200; ++k) {
      const Vec w = rng.normal_vector(m.param_dim());
      const Vec x = rng.normal_vector(m.input_dim());
      const double c = k == 0 ? 2.0 : 5.0 * rng.uniform();
      const Vec a = m.subgrad(x, c * w, p);
      const Vec b = c * m.subgrad(x, w, p);
      CHECK((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
    }
  }
}

TEST_CASE("separable models decompose by block") {
  CounterRng rng(51);
  for (const auto& m : zoo()) {
    if (!m.separable()) continue;
    const Vec w = rng.normal_vector(m.param_dim());
    const Vec x = rng.normal_vector(m.input_dim());
    double sum = 0.0;
    for (const auto& b : m.blocks()) {
      Vec wb = Vec::Zero(m.param_dim());
      wb.segment(b.offset, b.length) = w.segment(b.offset, b.length);
      sum += m.eval(x, wb);
    }
    CHECK(m.eval(x, w) == doctest::Approx(sum).epsilon(1e-12));
  }
}

TEST_CASE("block layout covers the parameter vector") {
  for (const auto& m : zoo()) {
    Index next = 0;
    for (const auto& b : m.blocks()) {
      CHECK(b.offset == next);
      next += b.length;
    }
    CHECK(next == m.param_dim());
  }
}

TEST_CASE("kink policy must lie in the Clarke interval") {
  KinkPolicy p;
  p.relu_zero_value = 1.5;
  CHECK_THROWS_AS(p.validate(0.0), DomainError);
  CHECK_NOTHROW(KinkPolicy::defaults(0.3).validate(0.3));
  CHECK(KinkPolicy::defaults(0.0).relu_zero_value == 0.0);
  CHECK(KinkPolicy::defaults(0.2).relu_zero_value == doctest::Approx(0.6));
}

TEST_CASE("kink decomposition reproduces the policy subgradient") {
  const auto m = NetworkModel::two_layer_leaky_relu(0.2, 2, 2);
  const Dataset data(Mat{{1.0, 0.0, 0.6}, {0.0, 1.0, 0.8}}, Vec{{1.0, -2.0, 0.5}});
  const Vec w{{0.7, 0.0, 1.0, -1.1, 0.5, 0.3}};  // first unit has x_1 on its kink
  const Vec c = data.y();
  const auto dec = m.kink_decomposition(data, c, w, 1e-12);
  REQUIRE(dec.has_value());
  REQUIRE(dec->directions.size() == 1);
  KinkPolicy p;
  for (double s0 : {0.2, 0.6, 1.0}) {
    p.relu_zero_value = s0;
    const Vec direct = m.weighted_subgrad(data, c, w, p);
    const Vec rebuilt = dec->base + s0 * dec->directions[0];
    CHECK((direct - rebuilt).norm() <= 1e-14);
  }
}

TEST_CASE("dataset invariants") {
  CHECK_THROWS_AS(Dataset(Mat{{1.0, 2.0}}, Vec{{1.0, 2.0}}, true), DomainError);
  CHECK_THROWS_AS(Dataset(Mat(2, 0), Vec(0)), StructuralError);
  CHECK_THROWS_AS(Dataset(Mat::Ones(2, 2), Vec::Ones(3)), StructuralError);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS(Dataset(Mat{{nan}}, Vec{{1.0}}));
}

TEST_CASE("saddle partition must be a disjoint cover") {
  SaddlePartition ok{{0, 2}, {1, 3}};
  CHECK_NOTHROW(ok.validate(4));
  SaddlePartition overlap{{0, 1}, {1, 2, 3}};
  CHECK_THROWS_AS(overlap.validate(4), StructuralError);
  SaddlePartition gap{{0}, {1, 2}};
  CHECK_THROWS_AS(gap.validate(4), StructuralError);
  const auto m = NetworkModel::squared_relu({1, 1}, 2);
  CHECK_THROWS_AS(WeightVector::for_model(m, Vec::Zero(3)), StructuralError);
}

TEST_CASE("beta estimate") {
  const auto sq = NetworkModel::squared_relu({1}, 2);
  const double r = 1.0 / std::numbers::sqrt2;
  const Dataset one(Mat{{r}, {r}}, Vec{{1.0}});
  const double b = beta_estimate(sq, one, 10000, 5);
  CHECK(b >= 0.9);
  CHECK(b <= 1.25);

  const Dataset zero(Mat::Zero(2, 3), Vec::Zero(3));
  CHECK(beta_estimate(sq, zero, 100, 5) == 0.0);

  const auto wide = NetworkModel::squared_relu({1, -1, 1}, 2);
  const Dataset base(Mat{{1.0, 0.0, -0.6}, {0.0, 1.0, 0.8}}, Vec::Zero(3));
  const Dataset twice(2.0 * base.X(), Vec::Zero(3));
  CHECK(beta_estimate(wide, twice, 2000, 9) >= beta_estimate(wide, base, 2000, 9));

  // Monotone in the number of samples for a fixed stream.
  double prev = 0.0;
  for (int s : {1, 10, 100, 1000}) {
    const double cur = beta_estimate(wide, base, s, 3);
    CHECK(cur >= prev);
    prev = cur;
  }
}
