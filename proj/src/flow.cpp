#include "ncf/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "ncf/random.hpp"

namespace ncf {

namespace {

double leaky(double p, double alpha) { return std::max(p, alpha * p); }

/// Maximize f over the circle: uniform grid, then golden-section refinement
/// around the best grid point.
template <class F>
double circle_sup(F f, int grid = 100000) {
  const double dt = 2.0 * std::numbers::pi / grid;
  double best = -std::numeric_limits<double>::infinity();
  double arg = 0.0;
  for (int k = 0; k < grid; ++k) {
    const double v = f(k * dt);
    if (v > best) {
      best = v;
      arg = k * dt;
    }
  }
  double a = arg - dt;
  double b = arg + dt;
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int it = 0; it < 80; ++it) {
    const double c = b - phi * (b - a);
    const double d = a + phi * (b - a);
    if (f(c) > f(d)) b = d; else a = c;
  }
  return std::max(best, f(0.5 * (a + b)));
}

/// sup over unit u of |phi(X^T u)| where phi acts elementwise.
template <class Phi>
double single_neuron_sup(const Dataset& data, Phi phi, double single_input_bound, std::string* source) {
  auto norm_at = [&](const Vec& u) {
    const Vec pre = data.X().transpose() * u;
    return pre.unaryExpr(phi).norm();
  };
  if (data.d() == 1) {
    if (source) *source = "analytic: one-dimensional input";
    return std::max(norm_at(Vec::Constant(1, 1.0)), norm_at(Vec::Constant(1, -1.0)));
  }
  if (data.d() == 2) {
    if (source) *source = "analytic: single-neuron angle search";
    return circle_sup([&](double t) { return norm_at(Vec{{std::cos(t), std::sin(t)}}); });
  }
  if (data.n() == 1) {
    if (source) *source = "analytic: single input";
    return single_input_bound;
  }
  return -1.0;
}

}  // namespace

std::string to_string(LossKind k) { return k == LossKind::Square ? "square" : "logistic"; }

double loss_value(const Loss& loss, const Vec& yhat, const Vec& y) {
  require_structure(yhat.size() == y.size(), "loss_value: length mismatch");
  double s = 0.0;
  for (Index i = 0; i < y.size(); ++i) {
    if (loss.kind == LossKind::Square) {
      s += 0.5 * (yhat[i] - y[i]) * (yhat[i] - y[i]);
    } else {
      const double m = yhat[i] * y[i];
      s += m > 0.0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
    }
  }
  return loss.scale * s;
}

double loss_value(LossKind kind, const Vec& yhat, const Vec& y) { return loss_value(Loss{kind, 1.0}, yhat, y); }

Vec loss_residual_grad(const Loss& loss, const Vec& yhat, const Vec& y) {
  require_structure(yhat.size() == y.size(), "loss_residual_grad: length mismatch");
  Vec g(y.size());
  for (Index i = 0; i < y.size(); ++i) {
    if (loss.kind == LossKind::Square) {
      g[i] = yhat[i] - y[i];
    } else {
      const double m = yhat[i] * y[i];
      if (m > 0.0) {
        const double e = std::exp(-m);
        g[i] = -y[i] * e / (1.0 + e);
      } else {
        g[i] = -y[i] / (1.0 + std::exp(m));
      }
    }
  }
  return loss.scale * g;
}

Vec loss_residual_grad(LossKind kind, const Vec& yhat, const Vec& y) {
  return loss_residual_grad(Loss{kind, 1.0}, yhat, y);
}

double beta_hat(const Loss& loss, const Vec& y, double beta) {
  require_domain(beta >= 0.0, "beta_hat: beta must be nonnegative");
  if (loss.kind == LossKind::Square) return loss.scale;
  const double ymax = y.size() ? y.cwiseAbs().maxCoeff() : 0.0;
  return loss.scale * ymax * ymax / 4.0;
}

double beta_hat(LossKind kind, const Vec& y, double beta) { return beta_hat(Loss{kind, 1.0}, y, beta); }

Vec ncf_weights(const Loss& loss, const Vec& y) { return -loss_residual_grad(loss, Vec::Zero(y.size()), y); }

Constants Constants::make(double beta, double beta_hat, double grad0_norm, std::string source) {
  Constants c;
  c.beta = beta;
  c.beta_hat = beta_hat;
  c.beta_tilde = beta_hat * beta + grad0_norm;
  c.beta_source = std::move(source);
  return c;
}

double Constants::T_bar(double C) const {
  require_domain(C > 1.0, "T_bar: C must exceed 1");
  require_domain(beta > 0.0 && beta_tilde > 0.0, "T_bar: constants must be positive");
  return std::log(C) / (4.0 * beta * beta_tilde);
}

double analytic_beta(const NetworkModel& model, const Dataset& data, std::string* source) {
  const auto& kind = model.kind();
  if (const auto* m = std::get_if<SquaredRelu>(&kind)) {
    const double a = m->alpha;
    const double single = data.n() == 1 ? data.x(0).squaredNorm() * std::max(1.0, a * a) : -1.0;
    return single_neuron_sup(data, [a](double p) { return leaky(p, a) * leaky(p, a); }, single, source);
  }
  if (const auto* m = std::get_if<TwoLayerLeakyRelu>(&kind)) {
    const double a = m->alpha;
    const double single = data.n() == 1 ? data.x(0).norm() * std::max(1.0, std::abs(a)) : -2.0;
    return 0.5 * single_neuron_sup(data, [a](double p) { return leaky(p, a); }, single, source);
  }
  if (const auto* m = std::get_if<DiagonalHomogeneous>(&kind); m && m->degree == 2) {
    if (source) *source = "analytic: diagonal network, best single coordinate";
    double best = 0.0;
    for (Index j = 0; j < data.d(); ++j) best = std::max(best, data.X().row(j).norm());
    return 0.5 * std::max(1.0, std::abs(m->alpha)) * best;
  }
  return -1.0;
}

Constants compute_constants(const NetworkModel& model, const Dataset& data, const Loss& loss,
                            std::uint64_t seed, int n_samples) {
  std::string source;
  double beta = analytic_beta(model, data, &source);
  if (beta < 0.0) {
    beta = beta_estimate(model, data, n_samples, seed);
    source = "sampled: " + std::to_string(n_samples) + " sphere draws x 1.25";
  }
  const double grad0 = loss_residual_grad(loss, Vec::Zero(data.n()), data.y()).norm();
  return Constants::make(beta, beta_hat(loss, data.y(), beta), grad0, source);
}

namespace {

Vec unit_start(const Vec& w0, std::map<std::string, std::string>& notes) {
  require_domain(w0.allFinite(), "train_flow: w0 must be finite");
  const double n = w0.norm();
  require_domain(n > 0.0, "train_flow: w0 must be nonzero");
  if (std::abs(n - 1.0) > 1e-12) {
    notes["warning"] = "w0 renormalized from norm " + std::to_string(n);
    return w0 / n;
  }
  return w0;
}

FlowSystem training_system(const NetworkModel& model, const Dataset& data, const Loss& loss,
                           double delta, bool rescaled, const IntegratorConfig& integ,
                           const KinkPolicy& policy) {
  FlowSystem sys;
  const double d = rescaled ? delta : 1.0;
  sys.velocity = [&model, &data, loss, policy, d](double, const Vec& v) {
    const Vec w = d == 1.0 ? v : (d * v).eval();
    const Vec c = loss_residual_grad(loss, model.eval_all(data, w), data.y());
    // s(x; delta v) = delta s(x; v), so the 1/delta of v = w / delta cancels.
    return (-model.weighted_subgrad(data, c, v, policy)).eval();
  };
  sys.objective = [&model, &data, loss, d](const Vec& v) {
    const Vec w = d == 1.0 ? v : (d * v).eval();
    return loss_value(loss, model.eval_all(data, w), data.y());
  };
  sys.monotone_sign = -1;
  sys.near_kink = [&model, &data, tol = integ.kink_tol](const Vec& v) { return model.near_kink(data, v, tol); };
  for (const auto& b : model.blocks()) sys.blocks.emplace_back(b.offset, b.length);
  return sys;
}

}  // namespace

Trajectory train_flow(const NetworkModel& model, const Dataset& data, const Loss& loss, const Vec& w0,
                      double delta, const IntegratorConfig& integ, const KinkPolicy& policy,
                      const StepObserver& observer) {
  require_structure(w0.size() == model.param_dim(), "train_flow: wrong parameter length");
  require_domain(delta > 0.0, "train_flow: delta must be positive");
  std::map<std::string, std::string> notes;
  const Vec start = delta * unit_start(w0, notes);
  Trajectory traj = integrate(training_system(model, data, loss, delta, false, integ, policy), start, integ, observer);
  traj.meta.model_hash = model.fingerprint();
  traj.meta.notes = std::move(notes);
  traj.meta.notes["flow"] = "train";
  traj.meta.notes["coords"] = "w";
  return traj;
}

Trajectory loss_flow(const NetworkModel& model, const Dataset& data, const Loss& loss, const Vec& w_init,
                     const IntegratorConfig& integ, const KinkPolicy& policy, const StepObserver& observer) {
  require_structure(w_init.size() == model.param_dim(), "loss_flow: wrong parameter length");
  Trajectory traj =
      integrate(training_system(model, data, loss, 1.0, false, integ, policy), w_init, integ, observer);
  traj.meta.model_hash = model.fingerprint();
  traj.meta.notes["flow"] = "train";
  traj.meta.notes["coords"] = "w";
  return traj;
}

Trajectory rescaled_train_flow(const NetworkModel& model, const Dataset& data, const Loss& loss,
                               const Vec& w0, double delta, const IntegratorConfig& integ,
                               const KinkPolicy& policy, const StepObserver& observer) {
  require_structure(w0.size() == model.param_dim(), "rescaled_train_flow: wrong parameter length");
  require_domain(delta > 0.0, "rescaled_train_flow: delta must be positive");
  std::map<std::string, std::string> notes;
  const Vec start = unit_start(w0, notes);
  Trajectory traj = integrate(training_system(model, data, loss, delta, true, integ, policy), start, integ, observer);
  traj.meta.model_hash = model.fingerprint();
  traj.meta.notes = std::move(notes);
  traj.meta.notes["flow"] = "train";
  traj.meta.notes["coords"] = "rescaled";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", delta);
  traj.meta.notes["delta"] = buf;
  return traj;
}

double norm_growth_check(const Trajectory& traj, const Constants& constants, double delta) {
  const auto it = traj.meta.notes.find("coords");
  const double factor = (it != traj.meta.notes.end() && it->second == "rescaled") ? delta : 1.0;
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& r : traj.records) {
    const double wn = factor * r.norm;
    if (wn > 1.0) continue;
    const double envelope = delta * delta * std::exp(4.0 * constants.beta * constants.beta_tilde * r.t);
    worst = std::max(worst, wn * wn - envelope);
  }
  return std::isinf(worst) ? 0.0 : worst;
}

}  // namespace ncf
