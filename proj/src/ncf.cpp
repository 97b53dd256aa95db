#include "ncf/ncf.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Eigenvalues>

namespace ncf {

namespace {

double leaky(double p, double alpha) { return std::max(p, alpha * p); }

std::vector<double> kink_candidates(double alpha) {
  std::vector<double> v{alpha, 0.5 * (1.0 + alpha), 1.0};
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

/// Greedy coordinate search over s_k in `values` minimizing |r + sum (s_k - start) d_k|.
double greedy_scan(Vec r, const std::vector<Vec>& dirs, const std::vector<double>& values,
                   double start) {
  std::vector<double> s(dirs.size(), start);
  double best = r.norm();
  for (int sweep = 0; sweep < 32; ++sweep) {
    bool improved = false;
    for (std::size_t k = 0; k < dirs.size(); ++k)
      for (double val : values) {
        if (val == s[k]) continue;
        const Vec trial = r + (val - s[k]) * dirs[k];
        const double tn = trial.norm();
        if (tn < best * (1.0 - 1e-15)) {
          r = trial;
          best = tn;
          s[k] = val;
          improved = true;
        }
      }
    if (!improved) break;
  }
  return best;
}

Vec segment_of(const Record& r, const std::optional<Block>& block) {
  if (!block) return *r.w;
  return r.w->segment(block->offset, block->length);
}

}  // namespace

NCFProblem::NCFProblem(Vec z_, NetworkModel model_, Dataset data_)
    : z(std::move(z_)), model(std::move(model_)), data(std::move(data_)) {
  require_structure(z.size() == data.n(), "ncf: z must have one entry per sample");
  require_structure(model.input_dim() == data.d(), "ncf: model input dimension does not match data");
  require_domain(z.allFinite(), "ncf: z must be finite");
}

double ncf_value(const NCFProblem& p, const Vec& u) { return p.z.dot(p.model.eval_all(p.data, u)); }

Vec ncf_grad(const NCFProblem& p, const Vec& u, const KinkPolicy& policy) {
  return p.model.weighted_subgrad(p.data, p.z, u, policy);
}

double rayleigh_quotient(const NCFProblem& p, const Vec& u) {
  const double n2 = u.squaredNorm();
  return n2 > 0.0 ? ncf_value(p, u) / n2 : 0.0;
}

KKTReport kkt_residual(const NCFProblem& p, const Vec& u, const KinkPolicy& policy,
                       const KKTOptions& options) {
  require_structure(u.size() == p.model.param_dim(), "kkt_residual: wrong parameter length");
  require_domain(u.allFinite(), "kkt_residual: non-finite input");
  const double n = u.norm();
  require_domain(n > 0.0, "kkt_residual: zero vector");

  KKTReport r;
  r.u = u / n;
  r.objective = ncf_value(p, r.u);
  r.lambda = 2.0 * r.objective;
  r.policy_residual = (ncf_grad(p, r.u, policy) - r.lambda * r.u).norm();
  r.residual = r.policy_residual;
  r.nonneg = r.objective >= -options.tol_kkt;
  if (!options.scan) return r;

  r.scanned = true;
  const auto values = kink_candidates(p.model.alpha());
  if (auto dec = p.model.kink_decomposition(p.data, p.z, r.u, policy.kink_tol)) {
    Vec base = dec->base - r.lambda * r.u;
    for (const auto& d : dec->directions) base += policy.relu_zero_value * d;
    r.residual = std::min(r.residual, greedy_scan(base, dec->directions, values, policy.relu_zero_value));
    r.scan_note = "greedy 3-point scan over " + std::to_string(dec->directions.size()) +
                  " kink(s); upper bound on the set residual";
  } else {
    for (double val : values) {
      KinkPolicy alt = policy;
      alt.relu_zero_value = val;
      r.residual = std::min(r.residual, (ncf_grad(p, r.u, alt) - r.lambda * r.u).norm());
    }
    r.scan_note = "global 3-point policy scan; upper bound on the set residual";
  }
  return r;
}

Trajectory ncf_flow(const NCFProblem& p, const Vec& u0, const IntegratorConfig& integ,
                    const KinkPolicy& policy, const StepObserver& observer) {
  require_structure(u0.size() == p.model.param_dim(), "ncf_flow: wrong parameter length");
  require_domain(u0.allFinite(), "ncf_flow: initial point must be finite");
  FlowSystem sys;
  const bool degenerate = p.degenerate();
  if (degenerate) {
    sys.velocity = [k = u0.size()](double, const Vec&) { return Vec::Zero(k).eval(); };
  } else {
    sys.velocity = [&p, policy](double, const Vec& u) { return ncf_grad(p, u, policy); };
  }
  sys.objective = [&p](const Vec& u) { return ncf_value(p, u); };
  sys.monotone_sign = +1;
  sys.near_kink = [&p, tol = integ.kink_tol](const Vec& u) { return p.model.near_kink(p.data, u, tol); };
  for (const auto& b : p.model.blocks()) sys.blocks.emplace_back(b.offset, b.length);

  Trajectory traj = integrate(sys, u0, integ, observer);
  traj.meta.model_hash = p.model.fingerprint();
  traj.meta.degenerate = degenerate;
  traj.meta.notes["flow"] = "ncf";
  return traj;
}

std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::ConvergedToZero: return "ConvergedToZero";
    case Outcome::DirectionalLimit: return "DirectionalLimit";
    case Outcome::Undecided: return "Undecided";
  }
  return "Undecided";
}

double angle_between(const Vec& a, const Vec& b) {
  const Vec ua = a.normalized();
  const Vec ub = b.normalized();
  return 2.0 * std::atan2((ua - ub).norm(), (ua + ub).norm());
}

DirectionalVerdict direction_verdict(const Trajectory& traj, const VerdictOptions& options) {
  require_domain(!traj.empty(), "direction_verdict: empty trajectory");
  require_domain(options.window >= 1 && options.tol_angle > 0.0, "direction_verdict: bad options");
  const auto snaps = traj.snapshot_indices();
  const Record& last = traj.records[snaps.back()];
  const Vec final_vec = segment_of(last, options.block);
  const double tol_zero = options.tol_zero.value_or(1e-6 * segment_of(traj.front(), options.block).norm());

  std::size_t start = snaps.front();
  for (std::size_t i : snaps)
    if (traj.records[i].step <= last.step - options.window) start = i;
  const Vec start_vec = segment_of(traj.records[start], options.block);
  const double fn = final_vec.norm();
  const double sn = start_vec.norm();

  DirectionalVerdict v;
  auto settle_time = [&](auto holds) {
    double t = last.t;
    for (auto it = snaps.rbegin(); it != snaps.rend(); ++it) {
      if (!holds(segment_of(traj.records[*it], options.block))) break;
      t = traj.records[*it].t;
    }
    return t;
  };

  if ((fn < tol_zero || fn == 0.0) && fn <= sn) {
    v.outcome = Outcome::ConvergedToZero;
    v.t_settle = settle_time([&](const Vec& s) { return s.norm() < tol_zero || s.norm() == 0.0; });
    return v;
  }
  if (fn > 0.0 && sn > 0.0) {
    v.angular_displacement = angle_between(start_vec, final_vec);
    if (v.angular_displacement < options.tol_angle) {
      v.outcome = Outcome::DirectionalLimit;
      v.limit_direction = final_vec / fn;
      v.t_settle = settle_time(
          [&](const Vec& s) { return s.norm() > 0.0 && angle_between(s, final_vec) < options.tol_angle; });
      double eta = fn;
      if (!options.block) {
        for (const auto& r : traj.records)
          if (r.t >= v.t_settle) eta = std::min(eta, r.norm);
      } else {
        for (std::size_t i : snaps)
          if (traj.records[i].t >= v.t_settle)
            eta = std::min(eta, segment_of(traj.records[i], options.block).norm());
      }
      v.eta_estimate = eta;
    }
  }
  return v;
}

// ---------------------------------------------------------------- analytic oracles

SymmetricOracle analytic_kkt_sym_sqrelu(const Dataset& data, double alpha) {
  const Index n = data.n();
  require_domain(n % 2 == 0, "analytic_kkt_sym_sqrelu: data must come in mirrored pairs");
  const Index h = n / 2;
  for (Index i = 0; i < h; ++i) {
    const bool mirrored = (data.x(i + h) + data.x(i)).norm() <= 1e-12 * (1.0 + data.x(i).norm()) &&
                          std::abs(data.y()[i + h] - data.y()[i]) <= 1e-12 * (1.0 + std::abs(data.y()[i]));
    require_domain(mirrored, "analytic_kkt_sym_sqrelu: data is not of the form {x_i, y_i} u {-x_i, y_i}");
  }
  Mat M = Mat::Zero(data.d(), data.d());
  for (Index i = 0; i < h; ++i) M += data.y()[i] * data.x(i) * data.x(i).transpose();
  if (M.norm() == 0.0) throw DegenerateDataError("analytic_kkt_sym_sqrelu: M = 0, every direction is KKT");

  Eigen::SelfAdjointEigenSolver<Mat> es(M);
  SymmetricOracle out;
  out.M = M;
  out.eigenvalues = es.eigenvalues();
  const double scale = out.eigenvalues.cwiseAbs().maxCoeff();
  for (Index j = 1; j < out.eigenvalues.size(); ++j)
    if (out.eigenvalues[j] - out.eigenvalues[j - 1] <= 1e-12 * scale) out.degenerate_spectrum = true;

  const NCFProblem prob(data.y(), NetworkModel::squared_relu({1}, data.d(), alpha), data);
  const auto policy = KinkPolicy::defaults(alpha);
  for (Index j = out.eigenvalues.size() - 1; j >= 0; --j)
    for (double s : {1.0, -1.0}) out.points.push_back(kkt_residual(prob, s * es.eigenvectors().col(j), policy));
  return out;
}

Vec ZeroMultiplierFamily::member(const Vec& hint) const {
  Vec u = hint - (hint.dot(q) / q.squaredNorm()) * q;
  const double n = u.norm();
  require_domain(n > 0.0, "zero-multiplier family: hint is parallel to q");
  return u / n;
}

SymmetricReluOracle analytic_kkt_sym_relu(const Dataset& data, double alpha) {
  require_domain(alpha != -1.0, "analytic_kkt_sym_relu: alpha = -1 makes the objective vanish");
  const Index n = data.n();
  require_domain(n % 2 == 0, "analytic_kkt_sym_relu: data must come in mirrored pairs");
  const Index h = n / 2;
  for (Index i = 0; i < h; ++i) {
    const bool mirrored = (data.x(i + h) + data.x(i)).norm() <= 1e-12 * (1.0 + data.x(i).norm()) &&
                          std::abs(data.y()[i + h] + data.y()[i]) <= 1e-12 * (1.0 + std::abs(data.y()[i]));
    require_domain(mirrored, "analytic_kkt_sym_relu: data is not of the form {x_i, y_i} u {-x_i, -y_i}");
  }
  Vec q = Vec::Zero(data.d());
  for (Index i = 0; i < h; ++i) q += data.y()[i] * data.x(i);
  if (q.norm() == 0.0) throw DegenerateDataError("analytic_kkt_sym_relu: q = 0");

  SymmetricReluOracle out;
  out.zero_family.q = q;
  const NCFProblem prob(data.y(), NetworkModel::two_layer_leaky_relu(alpha, 1, data.d()), data);
  const auto policy = KinkPolicy::defaults(alpha);
  const double r = 1.0 / std::numbers::sqrt2;
  KKTOptions opts;
  opts.scan = true;
  for (double sv : {1.0, -1.0})
    for (double su : {1.0, -1.0}) {
      Vec w(1 + data.d());
      w[0] = sv * r;
      w.tail(data.d()) = su * r * q / q.norm();
      out.points.push_back(kkt_residual(prob, w, policy, opts));
    }
  return out;
}

TwoLayerReduction kkt_reduce_two_layer(double v, const Vec& u, const NCFProblem& p, double tol,
                                       double objective_tol) {
  const auto* m = std::get_if<TwoLayerLeakyRelu>(&p.model.kind());
  require_structure(m != nullptr && m->width == 1, "kkt_reduce_two_layer: needs a single two-layer unit");
  require_structure(u.size() == p.data.d(), "kkt_reduce_two_layer: wrong input dimension");
  require_domain(std::isfinite(v) && u.allFinite(), "kkt_reduce_two_layer: non-finite input");
  require_domain(std::abs(v * v + u.squaredNorm() - 1.0) <= 1e-9,
                 "kkt_reduce_two_layer: (v, u) must be jointly unit norm");

  const double alpha = m->alpha;
  const Vec pre = p.data.X().transpose() * u;
  double g = 0.0;
  for (Index i = 0; i < pre.size(); ++i) g += p.z[i] * leaky(pre[i], alpha);

  TwoLayerReduction out;
  out.objective = v * g;
  if (std::abs(out.objective) <= objective_tol)
    throw InapplicableError("kkt_reduce_two_layer: objective is zero, the reduction does not apply");
  out.abs_v_deviation = std::abs(std::abs(v) - 1.0 / std::numbers::sqrt2);
  out.norm_u_deviation = std::abs(u.norm() - 1.0 / std::numbers::sqrt2);

  // KKT of max_{|u|=1} z^T sigma(X^T u): s = mu u with mu = z^T sigma(X^T u).
  const Vec uh = u.normalized();
  const Vec ph = p.data.X().transpose() * uh;
  const auto policy = KinkPolicy::defaults(alpha);
  double mu = 0.0;
  Vec base = Vec::Zero(uh.size());
  std::vector<Vec> dirs;
  for (Index i = 0; i < ph.size(); ++i) {
    const auto x = p.data.x(i);
    mu += p.z[i] * leaky(ph[i], alpha);
    if (std::abs(ph[i]) <= policy.kink_tol * x.norm()) {
      dirs.push_back(p.z[i] * x);
    } else {
      base += p.z[i] * (ph[i] > 0.0 ? std::max(1.0, alpha) : std::min(1.0, alpha)) * x;
    }
  }
  base -= mu * uh;
  for (const auto& d : dirs) base += policy.relu_zero_value * d;
  out.reduced_residual = greedy_scan(base, dirs, kink_candidates(alpha), policy.relu_zero_value);
  out.passes = out.abs_v_deviation <= tol && out.norm_u_deviation <= tol && out.reduced_residual <= tol;
  return out;
}

}  // namespace ncf
