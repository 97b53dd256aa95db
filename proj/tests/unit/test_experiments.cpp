#include <doctest.h>

#include <cmath>
#include <numbers>

#include "ncf/datasets.hpp"
#include "ncf/experiments.hpp"
#include "ncf/random.hpp"

using namespace ncf;

namespace {

const Loss kMean{LossKind::Square, 1.0 / 50};

Vec fig1_init(std::uint64_t seed, double std) {
  CounterRng rng(seed, 1);
  return rng.normal_vector(40, std);
}

// {x_i, y_i} followed by {-x_i, sign * y_i}.
Dataset mirror(const Mat& X, const Vec& y, double sign) {
  Mat X2(X.rows(), 2 * X.cols());
  X2 << X, -X;
  Vec y2(2 * y.size());
  y2 << y, sign * y;
  return Dataset(X2, y2);
}

}  // namespace

TEST_CASE("saddle construction for the circle data") {
  const auto s = build_saddle_fig1();
  CHECK(s.stationarity_residual <= 1e-8);
  CHECK(s.M == doctest::Approx(std::sqrt(5.0)).epsilon(1e-15));
  CHECK(s.m == s.M);
  CHECK(s.partition.nonzero.size() == 20);
  CHECK(s.partition.zero.size() == 20);
  const Vec out = s.model.eval_all(s.data, s.w_bar);
  for (Index i = 0; i < s.data.n(); ++i) {
    const double x1 = s.data.X()(0, i);
    if (x1 > 0) {
      CHECK(out[i] == doctest::Approx(5 * x1 * x1).epsilon(1e-14));
      CHECK(std::abs(s.y_bar[i]) <= 1e-14);
    } else {
      CHECK(out[i] == 0.0);
      CHECK(s.y_bar[i] == doctest::Approx(4 * x1 * x1).epsilon(1e-14));
    }
  }
  // Moving one large neuron off the saddle breaks stationarity.
  Vec w = s.w_bar;
  w[1] = 0.3;
  CHECK_THROWS_AS(make_saddle(s.model, s.data, s.loss, w, 10), DomainError);
  CHECK_THROWS_AS(make_saddle(s.model, s.data, Loss{LossKind::Logistic, 1.0}, s.w_bar, 10), DomainError);
}

TEST_CASE("exact saddle is a fixed point") {
  const auto s = build_saddle_fig1();
  SaddleOptions o;
  o.integ = IntegratorConfig::fixed(5e-5, 200, 50);
  const auto r = saddle_harness(s, Vec::Zero(40), o);
  // y_bar on x1 > 0 is rounding noise of 5 x1^2 - 10 (sqrt(1/2) x1)^2.
  CHECK(r.max_distance <= 1e-15);
  CHECK(r.loss_rel_change == 0.0);
}

TEST_CASE("saddle harness on the circle data") {
  const auto s = build_saddle_fig1();
  SaddleOptions o;
  o.integ = IntegratorConfig::fixed(5e-5, 50000, 500);
  o.sweep_deltas = {1e-3, 1e-4, 1e-5};
  o.sweep_t_end = 0.5;
  const Vec P = gaussian_perturbation(40, 1e-5, 0);
  const auto r = saddle_harness(s, P, o);
  CHECK(r.delta == doctest::Approx(P.norm()));
  CHECK(r.loss_rel_change < 1e-2);
  CHECK(!r.escaped);
  CHECK(r.max_Z_over_delta2 <= o.C);
  CHECK(r.M2 > 0.0);
  CHECK(r.T2 == doctest::Approx(std::min(std::log(o.C) / r.M2, 2.5)));
  CHECK(r.sweep.size() == 3);
  CHECK(r.sweep_decreasing);
  // The w_z / delta error is first order in delta.
  CHECK(r.sweep[0].sup_dev / r.sweep[1].sup_dev == doctest::Approx(10.0).epsilon(0.05));

  // Residual NCF on the circle: maximum at 180 degrees, flat arc of width 7.2 degrees around 0.
  REQUIRE(r.kkt.angles.size() == 1);
  CHECK(r.kkt.angles[0] == doctest::Approx(std::numbers::pi).epsilon(1e-9));
  REQUIRE(r.kkt.flat.size() == 1);
  CHECK(r.kkt.flat[0].first / kDegree == doctest::Approx(356.4).epsilon(1e-4));
  CHECK(r.kkt.flat[0].second / kDegree == doctest::Approx(363.6).epsilon(1e-4));

  REQUIRE(r.small_blocks.size() == 10);
  for (const auto& c : r.final_blocks) {
    CHECK(c.block >= 10);
    if (c.branch == Branch::Aligned) {
      CHECK(c.angle_to_kkt <= 2 * kDegree);
      CHECK(c.target_residual <= 1e-6);
      CHECK(c.target_nonneg);
    }
  }
}

TEST_CASE("thm1 harness on the circle data") {
  const auto m = NetworkModel::squared_relu(std::vector<int>(20, 1), 2);
  const Dataset d = uniform_circle_dataset(50);
  Thm1Options o;
  o.step = 5e-5;
  const auto r = thm1_harness(m, d, kMean, fig1_init(0, 1.0).normalized(), o);
  CHECK(!r.inconclusive);
  REQUIRE(r.rows.size() == 3);
  CHECK(r.rows[0].delta == 1e-2);
  CHECK(r.strictly_decreasing);
  CHECK(r.nonincreasing);
  CHECK(r.rows[2].sup_dev < 0.05);
  for (const auto& row : r.rows) {
    CHECK(row.T_bar == doctest::Approx(std::log(10.0) / (4 * r.constants.beta * r.constants.beta_tilde)));
    CHECK(row.norm_growth_excess <= 1e-10);
    CHECK(row.blocks_match);
    if (row.branch == Branch::Vanished) CHECK(row.final_norm_over_delta <= 2 * o.epsilon);
    if (row.branch == Branch::Aligned) {
      CHECK(row.final_norm_over_delta >= r.eta_est);
      CHECK(row.final_cos >= 1 - (1 + 3 / (2 * r.eta_est)) * o.epsilon);
    }
  }
}

TEST_CASE("thm1 harness on symmetric data aligns with the top eigenvector") {
  const Dataset d = mirror(Mat::Identity(2, 2), Vec{{5.0, -4.0}}, 1.0);
  Thm1Options o;
  o.deltas = {1e-2, 1e-4};
  o.C = 1e4;
  o.step = 1e-4;
  o.ncf_t_end = 5.0;
  const auto r = thm1_harness(NetworkModel::squared_relu({1}, 2), d, Loss{}, Vec{{0.6, 0.8}}, o);
  REQUIRE(r.verdict.limit_direction.has_value());
  const auto oracle = analytic_kkt_sym_sqrelu(d, 0.0);
  CHECK(angle_between(*r.verdict.limit_direction, oracle.points[0].u) <= 1e-6);
  const auto& row = r.rows.back();
  CHECK(row.delta == 1e-4);
  CHECK(row.branch == Branch::Aligned);
  CHECK(row.final_cos >= 0.999);
}

TEST_CASE("thm1 harness with z = 0 is inconclusive") {
  const Dataset d = uniform_circle_dataset(10);
  const auto r = thm1_harness(NetworkModel::squared_relu({1}, 2), d.with_labels(Vec::Zero(10)), Loss{},
                              Vec{{1.0, 0.0}}, Thm1Options{});
  CHECK(r.inconclusive);
  CHECK(r.rows.empty());
}

TEST_CASE("sep_alignment trivial cases") {
  const Dataset d = uniform_circle_dataset(50);
  const auto m = NetworkModel::squared_relu({1, 1}, 2);
  Trajectory t;
  Record rec;
  rec.w = Vec{{0.0, 0.0, -1.0, 0.0}};
  t.records.push_back(rec);
  const auto c = sep_alignment(m, d, kMean, t, 1.0);
  REQUIRE(c.size() == 2);
  CHECK(c[0].branch == Branch::Vanished);
  CHECK(c[1].branch == Branch::Aligned);
  CHECK(c[1].angle_to_kkt <= 1e-9);

  // A single block is classified like the whole network.
  const auto one = NetworkModel::squared_relu({1}, 2);
  Trajectory t1;
  rec.w = Vec{{std::cos(0.3), std::sin(0.3)}};
  t1.records.push_back(rec);
  const auto c1 = sep_alignment(one, d, kMean, t1, 1.0);
  REQUIRE(c1.size() == 1);
  const auto grid = theta_grid_kkt(NCFProblem(ncf_weights(kMean, d.y()), one, d));
  CHECK(c1[0].angle_to_kkt == doctest::Approx(grid.distance(0.3)).epsilon(1e-15));
  CHECK(c1[0].branch == Branch::Undecided);
}

TEST_CASE("toy u1|u2| flows") {
  const auto pol = KinkPolicy::defaults(-1.0);
  const auto st = toy_u1u2(pol, Vec{{1.0, 0.0}}, IntegratorConfig::fixed(1e-3, 5000, 1000));
  CHECK(st.stationary);

  const Vec u0{{1.0, std::sinh(0.1)}};
  const auto hy = toy_u1u2(pol, u0, IntegratorConfig::fixed_until(1e-5, 0.1, 1000));
  CHECK(hy.max_reference_error <= 1e-6);
  CHECK(!hy.t_freeze);

  const auto audit = toy_u1u2(pol, Vec{{-1.0, 0.5}}, IntegratorConfig::fixed(1e-7, 100000, 10000));
  CHECK(audit.conservation_drift <= 1e-8);
  CHECK(audit.max_reference_error <= 1e-8);

  // Past t* = atanh(1/2) the flow slides along u2 = 0 at u1 = -sqrt(3/4).
  const auto lng = toy_u1u2(pol, Vec{{-1.0, 0.5}}, IntegratorConfig::fixed_until(1e-5, 2.0, 10000));
  REQUIRE(lng.t_freeze.has_value());
  CHECK(*lng.t_freeze == doctest::Approx(std::atanh(0.5)).epsilon(1e-15));
  CHECK(lng.traj.final_w()[0] == doctest::Approx(-std::sqrt(0.75)).epsilon(1e-4));
  CHECK(std::abs(lng.traj.final_w()[1]) <= 1e-4);
  CHECK(lng.max_reference_error <= 1e-4);
}

TEST_CASE("toy reference closed form") {
  CHECK(toy_reference(Vec{{1.0, 0.0}}, 3.0) == Vec{{1.0, 0.0}});
  const Vec u = toy_reference(Vec{{1.0, 1e-300}}, 0.5);
  CHECK(u[0] == doctest::Approx(std::cosh(0.5)).epsilon(1e-15));
  CHECK(u[1] == doctest::Approx(std::sinh(0.5)).epsilon(1e-15));
  const Vec n = toy_reference(Vec{{2.0, -1.0}}, 0.7);
  CHECK(n[0] * n[0] - n[1] * n[1] == doctest::Approx(3.0).epsilon(1e-13));
  CHECK(n[1] < 0.0);
}

TEST_CASE("escape from the nonsmooth critical point") {
  for (double d : {0.05, 0.01, 0.001}) CHECK(escape_g(d, 1e-4) >= 0.09 - 1e-3);
  CHECK_THROWS_AS(escape_g(0.1, 1e-4), DomainError);
  CHECK(escape_g(0.0, 1e-4) == 0.0);
}

TEST_CASE("two-layer set S") {
  const Dataset base = mirror(Mat{{1.0}, {0.0}}, Vec{{1.0}}, -1.0);
  const NCFProblem p(base.y(), NetworkModel::two_layer_leaky_relu(0.0, 1, 2), base);
  const double r = 1 / std::sqrt(2.0);
  std::vector<Vec> inits{Vec{{0.9, r, 0.01}}, Vec{{0.9, r + 0.02, -0.01}}, Vec{{0.95, r - 0.05, 0.03}},
                         Vec{{0.3, r, 0.5}}};
  const auto rep = leaky_nonbranch_set(p, r, Vec{{r, 0.0}}, inits);
  CHECK(rep.gamma == doctest::Approx(r / 2).epsilon(1e-15));
  CHECK(rep.inits[0].in_S);
  CHECK(!rep.inits[3].in_S);
  for (const auto& i : rep.inits) {
    if (!i.in_S) continue;
    CHECK(i.drift <= 1e-8);
    // Without the Euler defect the invariant holds to rounding.
    CHECK(i.continuous_drift <= 1e-12);
  }
  CHECK(rep.conservation_ok);
  CHECK(rep.signs_ok);
  CHECK(rep.continuation_ok);
}

TEST_CASE("nonbranch probe") {
  const NCFProblem toy = toy_problem();
  const auto pol = KinkPolicy::defaults(-1.0);
  const FlowRunner toy_run = [&](const Vec& u0) {
    return ncf_flow(toy, u0, IntegratorConfig::fixed(1e-3, 1000, 100), pol);
  };
  const auto b = nonbranch_probe(toy_run, Vec{{1.0, 0.0}}, 4, 1e-9, 0);
  CHECK(b.kink_riding);
  CHECK(b.branching);

  const NCFProblem sm(uniform_circle_dataset(50).y(), NetworkModel::squared_relu({1}, 2), uniform_circle_dataset(50));
  const FlowRunner sm_run = [&](const Vec& u0) {
    return ncf_flow(sm, u0, IntegratorConfig::fixed(1e-4, 2000, 100), KinkPolicy::defaults(0.0));
  };
  const auto s = nonbranch_probe(sm_run, Vec{{0.6, 0.8}}, 4, 1e-9, 0);
  CHECK(s.scale_ratio == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(std::isfinite(s.lambda_fit));
  for (std::size_t k = 0; k < s.t.size(); ++k)
    CHECK(s.divergence[k] <= s.divergence[0] * std::exp(s.lambda_fit * s.t[k]) * (1 + 1e-12));
  CHECK(!s.branching);
  const auto one = nonbranch_probe(sm_run, Vec{{0.6, 0.8}}, 1, 1e-9, 0);
  CHECK(*std::max_element(one.divergence.begin(), one.divergence.end()) == 0.0);
}

TEST_CASE("forced NCF flow") {
  const Dataset d = uniform_circle_dataset(50);
  const NCFProblem p(d.y() / 50.0, NetworkModel::squared_relu({1}, 2), d);
  const auto pol = KinkPolicy::defaults(0.0);
  CHECK(perturbation_stability(p, Vec{{0.6, 0.8}}, 0.0, 1.0, 1e-3, pol) == 0.0);
  const auto sw = perturbation_sweep(p, Vec{{0.6, 0.8}}, {1e-2, 1e-3, 1e-4}, 1.0, 1e-3, pol);
  CHECK(sw.decreasing);
  CHECK(sw.deviations[1] <= 10 * 1e-3 * std::exp(sw.lipschitz * 1.0));
}

TEST_CASE("tech assumption probe") {
  const auto s = build_saddle_fig1();
  const auto pol = KinkPolicy::defaults(0.0);
  // Finite-difference Lipschitz constant of grad L near the saddle bounds -ratio.
  double lip = 0.0;
  CounterRng rng(3, 0);
  auto grad = [&](const Vec& w) {
    return s.model.weighted_subgrad(s.data, loss_residual_grad(s.loss, s.model.eval_all(s.data, w), s.data.y()), w, pol);
  };
  for (int k = 0; k < 50; ++k) {
    Vec w = s.w_bar;
    w.head(20) += 0.1 * rng.uniform() * rng.unit_vector(20);
    const Vec e = rng.unit_vector(40);
    lip = std::max(lip, (grad(w + 1e-6 * e) - grad(w)).norm() / 1e-6);
  }
  for (double g : {1e-1, 1e-2, 1e-3}) {
    const auto r = tech_assumption_probe(s, 200, g, 0, pol);
    CHECK(r.samples == 200);
    CHECK(r.min_ratio >= -lip);
    CHECK(r.argmin.tail(20).isZero(0.0));
  }

  // Around [1, 0] for (u1 |u2| - 1)^2 the ratio along [1 + d, d] diverges like -1/d.
  const auto m = NetworkModel::diagonal(1, -1.0);
  const Dataset d(Mat::Ones(1, 1), Vec::Ones(1));
  for (double dl : {1e-1, 1e-2, 1e-3}) {
    const double ratio = tech_ratio(m, d, Loss{LossKind::Square, 2.0}, Vec{{1.0, 0.0}}, Vec{{1 + dl, dl}},
                                    KinkPolicy::defaults(-1.0));
    const double c = 1 - (1 + dl) * dl;
    CHECK(ratio == doctest::Approx(-c * (1 + 2 * dl) / dl).epsilon(1e-12));
  }
}

TEST_CASE("explicit Euler chatters on the sliding set of u1|u2|") {
  // Before t* the ascent is monotone; on {u2 = 0, u1 < 0} the iterate
  // alternates across the kink and N drops by O(h) every other step.
  for (double h : {1e-3, 1e-4}) {
    const auto r = toy_u1u2(KinkPolicy::defaults(-1.0), Vec{{-1.0, 0.5}}, IntegratorConfig::fixed_until(h, 2.0, 1 << 30));
    double before = 0.0, after = 0.0;
    for (std::size_t k = 1; k < r.traj.records.size(); ++k) {
      const double drop = r.traj.records[k - 1].loss - r.traj.records[k].loss;
      double& slot = r.traj.records[k].t < *r.t_freeze - 10 * h ? before : after;
      slot = std::max(slot, drop);
    }
    CHECK(before == 0.0);
    CHECK(after > 0.0);
    CHECK(after <= h);
  }
}
