#include <doctest.h>

#include <cmath>
#include <numbers>

#include "ncf/datasets.hpp"
#include "ncf/flow.hpp"
#include "ncf/random.hpp"

using namespace ncf;

namespace {

// max over s of y^2 sigmoid(s)(1 - sigmoid(s)), by grid search.
double logistic_curvature_oracle(double y) {
  double best = 0.0;
  for (int k = -20000; k <= 20000; ++k) {
    const double s = k * 1e-3;
    const double sg = 1.0 / (1.0 + std::exp(-s));
    best = std::max(best, y * y * sg * (1.0 - sg));
  }
  return best;
}

Vec fig1_init(std::uint64_t seed, double std) {
  CounterRng rng(seed, 1);
  return rng.normal_vector(40, std);
}

}  // namespace

TEST_CASE("loss values") {
  CHECK(loss_value(LossKind::Square, Vec{{1.0, 2.0}}, Vec{{1.0, 2.0}}) == 0.0);
  CHECK(loss_value(LossKind::Square, Vec{{0.0}}, Vec{{2.0}}) == 2.0);
  CHECK(loss_value(LossKind::Logistic, Vec{{0.0}}, Vec{{1.0}}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(loss_value(Loss{LossKind::Square, 0.5}, Vec{{0.0}}, Vec{{2.0}}) == 1.0);
  CHECK(std::isfinite(loss_value(LossKind::Logistic, Vec{{-1e300}}, Vec{{1.0}})));
  CHECK_THROWS_AS(loss_value(LossKind::Square, Vec{{0.0}}, Vec{{1.0, 2.0}}), StructuralError);
}

TEST_CASE("loss residual gradients") {
  const Vec y{{2.0, -1.0, 0.5}};
  CHECK(loss_residual_grad(LossKind::Square, Vec::Zero(3), y) == -y);
  CHECK((loss_residual_grad(LossKind::Logistic, Vec::Zero(3), y) + 0.5 * y).norm() == 0.0);
  const Vec big = loss_residual_grad(LossKind::Logistic, Vec{{1e300, -1e300}}, Vec{{1.0, 1.0}});
  CHECK(big[0] == 0.0);
  CHECK(big[1] == -1.0);
  CHECK(ncf_weights(Loss{LossKind::Square, 0.1}, y) == 0.1 * y);

  // Finite-difference check of the logistic derivative.
  for (double yh : {-3.0, -0.2, 0.0, 0.7, 4.0}) {
    const Vec a{{yh + 1e-6}}, b{{yh - 1e-6}};
    const double fd = (loss_value(LossKind::Logistic, a, Vec{{-1.5}}) - loss_value(LossKind::Logistic, b, Vec{{-1.5}})) / 2e-6;
    CHECK(loss_residual_grad(LossKind::Logistic, Vec{{yh}}, Vec{{-1.5}})[0] == doctest::Approx(fd).epsilon(1e-8));
  }
}

TEST_CASE("beta_hat closed forms") {
  CHECK(beta_hat(LossKind::Square, Vec{{7.0, -3.0}}, 2.0) == 1.0);
  CHECK(beta_hat(LossKind::Logistic, Vec{{-1.0, 1.0}}, 1.0) == doctest::Approx(logistic_curvature_oracle(1.0)).epsilon(1e-6));
  CHECK(beta_hat(LossKind::Logistic, Vec{{2.0}}, 1.0) == doctest::Approx(logistic_curvature_oracle(2.0)).epsilon(1e-6));
  CHECK(beta_hat(LossKind::Logistic, Vec{{2.0}}, 1.0) == 1.0);
  CHECK_THROWS_AS(beta_hat(LossKind::Square, Vec{{1.0}}, -1.0), DomainError);
}

TEST_CASE("constants and T_bar") {
  const auto c = Constants::make(2.0, 1.0, 1.0);
  CHECK(c.beta_tilde == 3.0);
  CHECK(c.T_bar(std::exp(4.0)) == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
  CHECK(c.T_bar(20.0) > c.T_bar(10.0));
  CHECK_THROWS_AS(c.T_bar(1.0), DomainError);
}

TEST_CASE("analytic beta matches brute force") {
  const auto sq = NetworkModel::squared_relu({1}, 2);
  const double r = 1.0 / std::numbers::sqrt2;
  CHECK(analytic_beta(sq, Dataset(Mat{{r}, {r}}, Vec{{1.0}})) == doctest::Approx(1.0).epsilon(1e-12));

  const Dataset d = uniform_circle_dataset(50);
  double brute = 0.0;
  for (int k = 0; k < 200000; ++k) {
    const double t = 2 * std::numbers::pi * k / 200000;
    double s = 0.0;
    for (Index i = 0; i < d.n(); ++i) {
      const double p = std::max(0.0, std::cos(t) * d.X()(0, i) + std::sin(t) * d.X()(1, i));
      s += p * p * p * p;
    }
    brute = std::max(brute, std::sqrt(s));
  }
  const auto wide = NetworkModel::squared_relu(std::vector<int>(20, 1), 2);
  const double a = analytic_beta(wide, d);
  CHECK(a >= brute);
  CHECK(a <= brute * (1 + 1e-9));
  // The sampled estimate is an upper bound by its safety factor.
  CHECK(beta_estimate(wide, d, 2000, 1) >= a);

  const auto toy = NetworkModel::diagonal(1, -1.0);
  CHECK(analytic_beta(toy, Dataset(Mat{{1.0}}, Vec{{1.0}})) == 0.5);
}

TEST_CASE("train_flow from an exact fit stays put") {
  const auto m = NetworkModel::squared_relu({1, 1}, 2);
  const Dataset base = uniform_circle_dataset(8);
  const Vec w0 = Vec{{0.6, 0.0, 0.0, 0.8}};
  const double delta = 0.5;
  const Dataset fit = base.with_labels(m.eval_all(base, delta * w0));
  const auto traj = train_flow(m, fit, Loss{}, w0, delta, IntegratorConfig::fixed(1e-3, 200), KinkPolicy::defaults(0.0));
  CHECK(traj.final_w() == delta * w0);
  CHECK(traj.back().loss == 0.0);
}

TEST_CASE("train_flow renormalizes w0 with a warning") {
  const auto m = NetworkModel::squared_relu({1}, 2);
  const Dataset d = uniform_circle_dataset(8);
  const auto traj = train_flow(m, d, Loss{}, Vec{{3.0, 4.0}}, 0.1, IntegratorConfig::fixed(1e-3, 2), KinkPolicy::defaults(0.0));
  CHECK(traj.meta.notes.count("warning") == 1);
  CHECK(traj.initial_w().norm() == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("rescaled flow is the same discretization") {
  const auto m = NetworkModel::squared_relu(std::vector<int>(20, 1), 2);
  const Dataset d = uniform_circle_dataset(50);
  const Loss loss{LossKind::Square, 1.0 / 50};
  const Vec w0 = fig1_init(0, 1.0).normalized();
  const auto pol = KinkPolicy::defaults(0.0);
  for (double delta : {1e-2, 1e-4}) {
    const auto cfg = IntegratorConfig::fixed(5e-3, 400, 1);
    const auto w = train_flow(m, d, loss, w0, delta, cfg, pol);
    const auto v = rescaled_train_flow(m, d, loss, w0, delta, cfg, pol);
    CHECK(v.initial_w() == w0);
    double worst = 0.0;
    for (std::size_t k = 0; k < w.records.size(); ++k) {
      const Vec& a = *w.records[k].w;
      const Vec& b = *v.records[k].w;
      worst = std::max(worst, (delta * b - a).norm() / (delta * (1.0 + b.norm())));
    }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("small-initialization run: descent and norm-growth envelope") {
  const auto m = NetworkModel::squared_relu(std::vector<int>(20, 1), 2);
  const Dataset d = uniform_circle_dataset(50);
  const Loss loss{LossKind::Square, 1.0 / 50};
  const Vec w0 = fig1_init(0, 1e-5);
  const double delta = w0.norm();
  const auto traj = train_flow(m, d, loss, w0, delta, IntegratorConfig::fixed(5e-5, 10000, 100), KinkPolicy::defaults(0.0));
  std::size_t ticks = 0;
  for (std::size_t k = 1; k < traj.records.size(); ++k)
    if (traj.records[k].loss > traj.records[k - 1].loss) ++ticks;
  CHECK(ticks <= traj.records.size() / 1000);

  const auto c = compute_constants(m, d, loss);
  CHECK(norm_growth_check(traj, c, delta) <= 1e-10);
  CHECK(c.beta_source.rfind("analytic", 0) == 0);

  // Rescaled coordinates give the same check.
  const auto resc = rescaled_train_flow(m, d, loss, w0, delta, IntegratorConfig::fixed(5e-5, 2000, 100), KinkPolicy::defaults(0.0));
  CHECK(norm_growth_check(resc, c, delta) <= 1e-10);
}

TEST_CASE("norm_growth_check edge cases") {
  Trajectory t;
  for (int k = 0; k < 5; ++k) {
    Record r;
    r.t = 0.1 * k;
    r.step = k;
    r.w = Vec::Zero(2);
    t.records.push_back(r);
  }
  const auto c = Constants::make(1.0, 1.0, 1.0);
  CHECK(norm_growth_check(t, c, 0.1) <= 0.0);
  double prev = 0.0;
  for (double s : {0.0, 0.5, 1.0, 2.0}) {
    const double env = 0.01 * std::exp(4 * c.beta * c.beta_tilde * s);
    CHECK(env >= prev);
    prev = env;
  }
}

TEST_CASE("adaptive Euler guards the objective") {
  // Stiff quadratic: L = 0.5 * 1000 * w^2 via a one-sample linear model fit.
  const auto m = NetworkModel::diagonal(1, 1.0);
  const Dataset d(Mat{{1.0}}, Vec{{0.0}});
  IntegratorConfig cfg;
  cfg.scheme = Scheme::AdaptiveEuler;
  cfg.step = 1.0;
  cfg.min_step = 1e-6;
  cfg.t_end = 5.0;
  const auto traj = train_flow(m, d, Loss{LossKind::Square, 50.0}, Vec{{0.8, 0.6}}, 1.0, cfg, KinkPolicy::defaults(1.0));
  for (std::size_t k = 1; k < traj.records.size(); ++k)
    CHECK(traj.records[k].loss <= traj.records[k - 1].loss + 1e-12 * std::max(1.0, traj.records[k - 1].loss));
  CHECK(traj.back().t == doctest::Approx(5.0).epsilon(1e-12));

  cfg.min_step = 0.5;
  CHECK_THROWS_AS(train_flow(m, d, Loss{LossKind::Square, 50.0}, Vec{{0.8, 0.6}}, 1.0, cfg, KinkPolicy::defaults(1.0)),
                  StiffnessError);
}

TEST_CASE("divergence carries the partial trajectory") {
  const auto m = NetworkModel::squared_relu({1}, 2);
  const Dataset d = uniform_circle_dataset(10);
  try {
    train_flow(m, d, Loss{}, Vec{{1.0, 0.0}}, 10.0, IntegratorConfig::fixed(1.0, 100), KinkPolicy::defaults(0.0));
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(!e.partial().empty());
    CHECK(e.partial().back().w.has_value());
  }
}
