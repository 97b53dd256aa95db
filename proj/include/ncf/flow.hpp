#pragma once

#include <cstdint>
#include <string>

#include "ncf/integrator.hpp"
#include "ncf/models.hpp"
#include "ncf/ncf.hpp"

namespace ncf {

enum class LossKind { Square, Logistic };

std::string to_string(LossKind k);

/// Per-sample loss times `scale`; scale = 1/n gives the mean loss.
struct Loss {
  LossKind kind = LossKind::Square;
  double scale = 1.0;
};

/// scale * sum_i l(yhat_i, y_i).
double loss_value(const Loss& loss, const Vec& yhat, const Vec& y);
double loss_value(LossKind kind, const Vec& yhat, const Vec& y);

/// scale * dl/dyhat elementwise.
Vec loss_residual_grad(const Loss& loss, const Vec& yhat, const Vec& y);
Vec loss_residual_grad(LossKind kind, const Vec& yhat, const Vec& y);

/// Lipschitz constant of l' in yhat: Square 1, Logistic max y^2 / 4 (times scale).
double beta_hat(const Loss& loss, const Vec& y, double beta);
double beta_hat(LossKind kind, const Vec& y, double beta);

struct Constants {
  double beta = 0.0;
  double beta_hat = 0.0;
  double beta_tilde = 0.0;
  std::string beta_source;

  static Constants make(double beta, double beta_hat, double grad0_norm, std::string source = "given");
  double T_bar(double C) const;
};

/// beta from a closed form where one is known, else the sampled estimate.
Constants compute_constants(const NetworkModel& model, const Dataset& data, const Loss& loss,
                            std::uint64_t seed = 0, int n_samples = 20000);

/// sup_{|w|=1} |H(X; w)| when it reduces to a single-neuron search we can do
/// exactly; returns a negative value otherwise. `source` names the method.
double analytic_beta(const NetworkModel& model, const Dataset& data, std::string* source = nullptr);

/// Gradient flow dw/dt = -sum_i l'(H(x_i; w), y_i) s(x_i; w), w(0) = delta w0.
Trajectory train_flow(const NetworkModel& model, const Dataset& data, const Loss& loss, const Vec& w0,
                      double delta, const IntegratorConfig& integ, const KinkPolicy& policy,
                      const StepObserver& observer = {});

/// Gradient flow from an arbitrary starting point (no renormalization).
Trajectory loss_flow(const NetworkModel& model, const Dataset& data, const Loss& loss, const Vec& w_init,
                     const IntegratorConfig& integ, const KinkPolicy& policy, const StepObserver& observer = {});

/// The same flow in v = w / delta; recorded norms are |v|, the loss is L(delta v).
Trajectory rescaled_train_flow(const NetworkModel& model, const Dataset& data, const Loss& loss,
                               const Vec& w0, double delta, const IntegratorConfig& integ,
                               const KinkPolicy& policy, const StepObserver& observer = {});

/// max over records with |w| <= 1 of |w(t)|^2 - delta^2 exp(4 beta beta_tilde t).
double norm_growth_check(const Trajectory& traj, const Constants& constants, double delta);

/// Correlation weights -l'(0, y) of the flow's NCF.
Vec ncf_weights(const Loss& loss, const Vec& y);

}  // namespace ncf
