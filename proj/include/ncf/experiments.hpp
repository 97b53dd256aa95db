#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ncf/flow.hpp"
#include "ncf/ncf.hpp"
#include "ncf/theta_grid.hpp"

namespace ncf {

enum class Branch { Aligned, Vanished, Undecided };
std::string to_string(Branch b);

constexpr double kDegree = 0.017453292519943295;

/// Classification of one block of a separable model at a final state.
struct BlockClass {
  std::size_t block = 0;
  Branch branch = Branch::Undecided;
  double norm_over_delta = 0.0;
  double angle = -1.0;          // polar angle of a 2-D block, -1 otherwise
  double angle_to_kkt = -1.0;   // distance to the nearest KKT angle or flat arc
  double target_residual = -1.0;  // kkt_residual of the target direction
  bool target_nonneg = false;
};

struct AlignmentOptions {
  double epsilon = 0.05;
  double angle_tol = 2.0 * kDegree;
  double tol_kkt = 1e-6;
  /// Residual below which a direction counts as aligned when no angle grid applies.
  double residual_tol = 1e-3;
  ThetaGridOptions grid;
};

/// Classifies each block of w = delta * v against the KKT set of its own NCF
/// max z^T H_b(X; u) on the sphere: Vanished when |v_b| <= 2 epsilon, Aligned
/// when the direction sits on a nonnegative KKT point, else Undecided. Angles
/// and residuals are filled for every nonzero block, vanished ones included.
std::vector<BlockClass> classify_blocks(const NetworkModel& model, const Dataset& data, const Vec& z,
                                        const Vec& v, const AlignmentOptions& options = {});

/// classify_blocks on the last state of a training run with z = -l'(0, y).
/// Rescaled trajectories are used as is; plain ones are divided by delta.
std::vector<BlockClass> sep_alignment(const NetworkModel& model, const Dataset& data, const Loss& loss,
                                      const Trajectory& traj, double delta,
                                      const AlignmentOptions& options = {});

/// KKT set of a single 2-D block NCF, cached per (model, z).
ThetaGridResult block_kkt_grid(const NetworkModel& block, const Dataset& data, const Vec& z,
                               const ThetaGridOptions& options = {});

struct Thm1Options {
  std::vector<double> deltas{1e-2, 1e-3, 1e-4};
  double epsilon = 0.05;
  double C = 10.0;
  double step = 1e-4;
  double ncf_t_end = 50.0;  // horizon for the NCF direction verdict
  int ncf_record_every = 100;
  VerdictOptions verdict;
  AlignmentOptions alignment;
  std::uint64_t seed = 0;
};

struct Thm1Row {
  double delta = 0.0;
  double C = 0.0;
  double T_bar = 0.0;
  double sup_dev = 0.0;
  double final_norm_over_delta = 0.0;
  double final_cos = 0.0;
  Branch branch = Branch::Undecided;
  bool dichotomy = false;  // branch is Aligned or Vanished
  double norm_growth_excess = 0.0;
  std::vector<BlockClass> blocks;
  std::vector<BlockClass> ncf_blocks;  // u(T_bar) classified the same way
  bool blocks_match = false;
  Vec final_v;
};

struct Thm1Report {
  Constants constants;
  DirectionalVerdict verdict;
  double eta_est = 0.0;  // inf_t |u(t)| over the long NCF run when it has a limit direction
  bool inconclusive = false;
  std::string note;
  std::vector<Thm1Row> rows;  // sorted by decreasing delta
  bool nonincreasing = false;
  bool strictly_decreasing = false;
  Trajectory ncf;             // NCF run up to the longest T_bar
};

/// Runs the NCF flow with z = -l'(0, y) and the rescaled training flow for each
/// delta up to T_bar = ln C / (4 beta beta_tilde) on the same step grid.
Thm1Report thm1_harness(const NetworkModel& model, const Dataset& data, const Loss& loss, const Vec& w0,
                        const Thm1Options& options);

/// A saddle of the square loss with w_z = 0 and its residual labels.
struct SaddleSpec {
  NetworkModel model;
  Dataset data;
  Loss loss;
  SaddlePartition partition;
  Vec w_bar;
  Vec y_bar;
  double stationarity_residual = 0.0;
  double m = 0.0;
  double M = 0.0;
  std::size_t first_zero_block = 0;  // blocks [first_zero_block, end) form w_z
};

/// Validates a saddle: w_z = 0 and |grad_{w_n} L(w_n, 0)| <= tol under the best
/// of the policy values {alpha, (1+alpha)/2, 1}.
SaddleSpec make_saddle(NetworkModel model, Dataset data, Loss loss, Vec w_bar, std::size_t first_zero_block,
                       double tol = 1e-8);

/// 20 squared-ReLU neurons on the 50-point circle; ten at [sqrt(1/2), 0].
SaddleSpec build_saddle_fig1(const Loss& loss = Loss{LossKind::Square, 1.0 / 50});

/// The sub-network on blocks [first, first + count).
NetworkModel block_range_model(const NetworkModel& model, std::size_t first, std::size_t count);

struct SaddleOptions {
  IntegratorConfig integ = IntegratorConfig::fixed(5e-5, 50000, 100);
  double C = 10.0;
  double epsilon = 0.05;
  std::uint64_t seed = 0;  // pilot perturbation uses a separate stream
  double init_std = 1e-5;
  std::vector<double> sweep_deltas;  // empty: no sweep
  double sweep_t_end = 0.5;
  AlignmentOptions alignment;
};

struct SaddleSweepRow {
  double delta = 0.0;
  double sup_dev = 0.0;
};

struct SaddleReport {
  double delta = 0.0;
  double M2 = 0.0;
  double T2 = 0.0;
  std::string M2_note;
  bool escaped = false;
  std::optional<double> first_violation_t;
  double max_Z_over_delta2 = 0.0;  // over [0, T2]
  double loss_rel_change = 0.0;
  double max_distance = 0.0;
  std::vector<BlockClass> small_blocks;  // classified at the last step with t <= T2
  double aligned_fraction = 0.0;         // among non-vanished small blocks
  std::vector<BlockClass> final_blocks;  // the same at the end of the run
  double final_aligned_fraction = 0.0;
  ThetaGridResult kkt;
  std::vector<SaddleSweepRow> sweep;
  bool sweep_decreasing = true;
  Trajectory traj;
};

/// Gaussian perturbation of the full parameter vector, stream-separated by `stream`.
Vec gaussian_perturbation(Index dim, double stddev, std::uint64_t seed, std::uint64_t stream = 1);

/// Gradient flow from w_bar + perturbation; delta = |perturbation|.
SaddleReport saddle_harness(const SaddleSpec& spec, const Vec& perturbation, const SaddleOptions& options);

struct TechProbeReport {
  double min_ratio = 0.0;
  Vec argmin;
  int samples = 0;
};

/// min over samples w_n with 0 < |w_n - w_bar_n| <= gamma of
/// <w_bar_n - w_n, s> / |w_bar_n - w_n|^2 with s = -grad_{w_n} L(w_n, 0).
TechProbeReport tech_assumption_probe(const SaddleSpec& spec, int n_dirs, double gamma, std::uint64_t seed,
                                      const KinkPolicy& policy);

/// The same ratio for the full loss at explicit points w around w_bar.
double tech_ratio(const NetworkModel& model, const Dataset& data, const Loss& loss, const Vec& w_bar,
                  const Vec& w, const KinkPolicy& policy);

/// f(u1, u2) = u1 |u2| as an NCF: diagonal model with sigma = |.|, x = [1], z = [1].
NCFProblem toy_problem();

/// Closed-form positive flow of u1 |u2| from u0, freezing on {u2 = 0, u1 <= 0}.
/// Points with u2 = 0 and u1 > 0 return u0 (the stationary branch).
Vec toy_reference(const Vec& u0, double t);

struct ToyReport {
  Trajectory traj;
  double conservation_drift = 0.0;  // max |q(t) - q(0)|, q = u1^2 - u2^2
  bool stationary = false;          // every state equals u0 exactly
  double max_reference_error = 0.0;
  std::optional<double> t_freeze;   // closed-form hitting time of u2 = 0
};

ToyReport toy_u1u2(const KinkPolicy& policy, const Vec& u0, const IntegratorConfig& integ);

/// Descent on g = (u1 |u2| - 1)^2 from [1 + delta, delta] up to t = 0.1.
Trajectory escape_g_flow(double delta, double step, int record_every = 1);

/// |u(0.1) - [1, 0]| for the same descent.
double escape_g(double delta, double step);

struct NonbranchInit {
  Vec w0;
  bool in_S = false;
  double drift = 0.0;            // max |q(t) - q(0)|, q = v^2 - |u|^2
  double continuous_drift = 0.0; // drift minus the exact Euler defect sum (dv^2 - |du|^2)
  bool signs_preserved = true;
  std::optional<double> first_flip_t;
};

struct NonbranchSetReport {
  double eta1 = 0.0;
  double eta2 = 0.0;
  double gamma = 0.0;
  KKTReport star;
  double lipschitz = 0.0;
  std::vector<NonbranchInit> inits;
  double max_pair_ratio = 0.0;  // max dist(t) / (dist(0) e^{L t}) over pairs in S
  bool conservation_ok = false;
  bool signs_ok = false;
  bool continuation_ok = false;
  Trajectory first;  // flow from the first init
};

struct NonbranchSetOptions {
  IntegratorConfig integ = IntegratorConfig::fixed(1e-7, 100000, 1000);
  double conservation_tol = 1e-7;
  double gamma = 0.0;  // 0: eta1 / (2 eta2)
};

/// Two-layer single-unit NCF near a KKT point (v*, u*): checks balancedness,
/// preserved activation pattern and Lipschitz continuation for inits in S.
NonbranchSetReport leaky_nonbranch_set(const NCFProblem& p, double v_star, const Vec& u_star,
                                       const std::vector<Vec>& inits, const NonbranchSetOptions& options = {});

using FlowRunner = std::function<Trajectory(const Vec& u0)>;

struct NonbranchProbeReport {
  std::vector<double> t;
  std::vector<double> divergence;  // max pairwise distance / rho
  double lambda_fit = 0.0;         // max_t ln(D(t) / D(0)) / t
  double scale_ratio = 0.0;        // max D at rho / 10 over max D at rho
  bool kink_riding = false;
  bool branching = false;
};

/// Runs n_perturb flows from u0 + rho r_k (r_k random unit) and again at rho / 10.
/// Branching is flagged when the base run rides a kink and the divergence
/// scales like 1 / rho instead of staying rho-independent.
NonbranchProbeReport nonbranch_probe(const FlowRunner& runner, const Vec& u0, int n_perturb, double rho,
                                     std::uint64_t seed);

/// sup_t |u_f(t) - u(t)| for du/dt = sum (z_i + f_i(t)) s(x_i; u) with
/// f_i(t) = delta_f sin((1 + i) t + i) against the unforced run.
double perturbation_stability(const NCFProblem& p, const Vec& u0, double delta_f, double T, double step,
                              const KinkPolicy& policy);

struct StabilitySweep {
  std::vector<double> levels;
  std::vector<double> deviations;
  bool decreasing = false;
  double lipschitz = 0.0;  // fitted along the unforced run
};

StabilitySweep perturbation_sweep(const NCFProblem& p, const Vec& u0, const std::vector<double>& levels, double T,
                                  double step, const KinkPolicy& policy, std::uint64_t seed = 0);

}  // namespace ncf
