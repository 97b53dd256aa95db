#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ncf/integrator.hpp"
#include "ncf/models.hpp"

namespace ncf {

/// N(u) = z^T H(X; u).
struct NCFProblem {
  Vec z;
  NetworkModel model;
  Dataset data;

  NCFProblem(Vec z, NetworkModel model, Dataset data);
  bool degenerate() const { return z.isZero(0.0); }
};

double ncf_value(const NCFProblem& p, const Vec& u);
Vec ncf_grad(const NCFProblem& p, const Vec& u, const KinkPolicy& policy);
/// N(u) / |u|^2; zero at u = 0.
double rayleigh_quotient(const NCFProblem& p, const Vec& u);

struct KKTReport {
  Vec u;
  double objective = 0.0;
  double lambda = 0.0;
  double residual = 0.0;         // min of policy and scan residuals when scanned
  double policy_residual = 0.0;  // under the configured policy only
  bool nonneg = false;
  bool scanned = false;
  std::string scan_note;  // describes the over-approximation used, if any
};

struct KKTOptions {
  bool scan = false;
  double tol_kkt = 1e-6;
};

/// Residual of g = lambda u on the unit sphere with lambda = 2 N(u).
/// With `scan`, sigma'(0) at each active kink is also chosen from
/// {alpha, (1+alpha)/2, 1} by greedy coordinate search.
KKTReport kkt_residual(const NCFProblem& p, const Vec& u, const KinkPolicy& policy,
                       const KKTOptions& options = {});

/// Positive flow du/dt = grad N(u). Degenerate z returns the constant
/// trajectory with meta.degenerate set.
Trajectory ncf_flow(const NCFProblem& p, const Vec& u0, const IntegratorConfig& integ,
                    const KinkPolicy& policy, const StepObserver& observer = {});

enum class Outcome { ConvergedToZero, DirectionalLimit, Undecided };
std::string to_string(Outcome o);

struct DirectionalVerdict {
  Outcome outcome = Outcome::Undecided;
  std::optional<Vec> limit_direction;
  std::optional<double> eta_estimate;
  double t_settle = 0.0;
  double angular_displacement = 0.0;  // over the trailing window
};

struct VerdictOptions {
  long window = 200;
  double tol_angle = 1e-4;
  std::optional<double> tol_zero;  // default 1e-6 * |u0|
  std::optional<Block> block;      // restrict to one block
};

DirectionalVerdict direction_verdict(const Trajectory& traj, const VerdictOptions& options = {});

/// Angle in radians between two nonzero vectors.
double angle_between(const Vec& a, const Vec& b);

struct SymmetricOracle {
  std::vector<KKTReport> points;
  Mat M;
  Vec eigenvalues;
  bool degenerate_spectrum = false;
};

/// Single squared (leaky) ReLU neuron on data {x_i, y_i} u {-x_i, y_i}
/// (second half mirrors the first). N(u) = (1+alpha^2) u^T M u with
/// M = sum_{i<=n/2} y_i x_i x_i^T, so KKT directions are eigenvectors of M.
SymmetricOracle analytic_kkt_sym_sqrelu(const Dataset& data, double alpha);

struct ZeroMultiplierFamily {
  Vec q;  // KKT points (0, u) with u^T q = 0, |u| = 1
  Vec member(const Vec& hint) const;
};

struct SymmetricReluOracle {
  std::vector<KKTReport> points;  // over w = [v, u]
  ZeroMultiplierFamily zero_family;
};

/// Single leaky ReLU unit v sigma(x^T u) on data {x_i, y_i} u {-x_i, -y_i}.
SymmetricReluOracle analytic_kkt_sym_relu(const Dataset& data, double alpha);

struct TwoLayerReduction {
  double abs_v_deviation = 0.0;  // ||v| - 1/sqrt(2)|
  double norm_u_deviation = 0.0;
  double objective = 0.0;        // v z^T sigma(X^T u)
  double reduced_residual = 0.0; // KKT residual of sqrt(2) u for max z^T sigma(X^T u)
  bool passes = false;
};

/// Checks |v| = |u| = 1/sqrt(2) and the reduced KKT condition for a nonzero
/// KKT point of a single two-layer unit. Throws InapplicableError when the
/// objective vanishes.
TwoLayerReduction kkt_reduce_two_layer(double v, const Vec& u, const NCFProblem& p,
                                       double tol = 1e-5, double objective_tol = 1e-12);

}  // namespace ncf
