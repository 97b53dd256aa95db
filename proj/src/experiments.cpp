#include "ncf/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>

#include "ncf/datasets.hpp"
#include "ncf/parallel.hpp"
#include "ncf/random.hpp"

namespace ncf {

namespace {

constexpr std::uint64_t kPilotStream = 0x5add1e;
constexpr std::uint64_t kProbeStream = 0x9b0be;
constexpr std::uint64_t kTechStream = 0x7ec4;

std::uint64_t hash_doubles(std::uint64_t h, const double* p, Index n) {
  for (Index i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, p + i, sizeof bits);
    h = CounterRng::hash(h, bits, static_cast<std::uint64_t>(i));
  }
  return h;
}

NetworkModel single_block(const NetworkModel& model, std::size_t b) {
  return model.blocks().size() == 1 ? model : model.block_model(b);
}

/// Nearest point of the stationary set to theta: an isolated angle, an arc
/// endpoint, or theta itself inside an arc.
double nearest_kkt_angle(const ThetaGridResult& grid, double theta) {
  double best = std::numeric_limits<double>::infinity();
  double arg = theta;
  auto consider = [&](double a) {
    const double d = circular_distance(theta, a);
    if (d < best) {
      best = d;
      arg = a;
    }
  };
  for (double a : grid.angles) consider(a);
  for (const auto& [lo, hi] : grid.flat) {
    const double t = polar_angle(Vec{{std::cos(theta), std::sin(theta)}});
    if ((t >= lo && t <= hi) || (t + 2.0 * std::numbers::pi >= lo && t + 2.0 * std::numbers::pi <= hi)) return theta;
    consider(lo);
    consider(hi);
  }
  return arg;
}

double time_horizon(const IntegratorConfig& c) {
  return c.n_steps ? static_cast<double>(*c.n_steps) * c.step : *c.t_end;
}

bool strictly_decreasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] < v[i - 1])) return false;
  return true;
}

}  // namespace

std::string to_string(Branch b) {
  switch (b) {
    case Branch::Aligned: return "Aligned";
    case Branch::Vanished: return "Vanished";
    case Branch::Undecided: return "Undecided";
  }
  return "Undecided";
}

ThetaGridResult block_kkt_grid(const NetworkModel& block, const Dataset& data, const Vec& z,
                               const ThetaGridOptions& options) {
  static std::mutex mu;
  static std::map<std::uint64_t, ThetaGridResult> cache;
  std::uint64_t key = block.fingerprint();
  key = hash_doubles(key, z.data(), z.size());
  key = hash_doubles(key, data.X().data(), data.X().size());
  const double opts[] = {static_cast<double>(options.grid), options.bisect_tol, options.flat_tol};
  key = hash_doubles(key, opts, 3);
  {
    std::lock_guard<std::mutex> lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  ThetaGridResult r = theta_grid_kkt(NCFProblem(z, block, data), options);
  std::lock_guard<std::mutex> lock(mu);
  cache.emplace(key, r);
  return r;
}

std::vector<BlockClass> classify_blocks(const NetworkModel& model, const Dataset& data, const Vec& z,
                                        const Vec& v, const AlignmentOptions& options) {
  require_structure(v.size() == model.param_dim(), "classify_blocks: wrong parameter length");
  require_structure(model.blocks().size() == 1 || model.separable(), "classify_blocks: model is not separable");
  std::vector<BlockClass> out;
  const auto& blocks = model.blocks();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    BlockClass c;
    c.block = b;
    const Vec vb = v.segment(blocks[b].offset, blocks[b].length);
    c.norm_over_delta = vb.norm();
    const bool vanished = c.norm_over_delta <= 2.0 * options.epsilon;
    if (c.norm_over_delta == 0.0) {
      c.branch = Branch::Vanished;
      out.push_back(c);
      continue;
    }
    const NetworkModel bm = single_block(model, b);
    const NCFProblem p(z, bm, data);
    const auto policy = KinkPolicy::defaults(bm.alpha());
    bool close = false;
    if (bm.param_dim() == 2) {
      const ThetaGridResult grid = block_kkt_grid(bm, data, z, options.grid);
      c.angle = polar_angle(vb);
      c.angle_to_kkt = grid.distance(c.angle);
      const double target = nearest_kkt_angle(grid, c.angle);
      const KKTReport k = kkt_residual(p, Vec{{std::cos(target), std::sin(target)}}, policy, {true, options.tol_kkt});
      c.target_residual = k.residual;
      c.target_nonneg = k.nonneg;
      close = c.angle_to_kkt <= options.angle_tol && c.target_residual <= options.tol_kkt;
    } else {
      const KKTReport k = kkt_residual(p, vb, policy, {true, options.tol_kkt});
      c.target_residual = k.residual;
      c.target_nonneg = k.nonneg;
      close = k.residual <= options.residual_tol;
    }
    if (vanished) c.branch = Branch::Vanished;
    else c.branch = close && c.target_nonneg ? Branch::Aligned : Branch::Undecided;
    out.push_back(c);
  }
  return out;
}

std::vector<BlockClass> sep_alignment(const NetworkModel& model, const Dataset& data, const Loss& loss,
                                      const Trajectory& traj, double delta, const AlignmentOptions& options) {
  require_structure(!traj.empty(), "sep_alignment: empty trajectory");
  require_domain(delta > 0.0, "sep_alignment: delta must be positive");
  const auto it = traj.meta.notes.find("coords");
  const bool rescaled = it != traj.meta.notes.end() && it->second == "rescaled";
  const Vec v = rescaled ? traj.final_w() : (traj.final_w() / delta).eval();
  return classify_blocks(model, data, ncf_weights(loss, data.y()), v, options);
}

Thm1Report thm1_harness(const NetworkModel& model, const Dataset& data, const Loss& loss, const Vec& w0,
                        const Thm1Options& options) {
  require_structure(w0.size() == model.param_dim(), "thm1_harness: wrong parameter length");
  require_domain(std::abs(w0.norm() - 1.0) <= 1e-12, "thm1_harness: w0 must have unit norm");
  require_domain(!options.deltas.empty(), "thm1_harness: empty delta sweep");
  require_domain(options.step > 0.0 && options.epsilon > 0.0, "thm1_harness: step and epsilon must be positive");

  Thm1Report rep;
  const Vec z = ncf_weights(loss, data.y());
  const NCFProblem p(z, model, data);
  const auto policy = KinkPolicy::defaults(model.alpha());
  if (p.degenerate()) {
    rep.inconclusive = true;
    rep.note = "z = 0: the NCF vanishes identically";
    return rep;
  }
  rep.constants = compute_constants(model, data, loss, options.seed);
  const double T_bar = rep.constants.T_bar(options.C);
  const long n = std::max(1L, std::lround(std::ceil(T_bar / options.step)));

  // Long NCF run for the limiting direction.
  Trajectory long_run;
  try {
    long_run = ncf_flow(p, w0, IntegratorConfig::fixed_until(options.step * 10.0, options.ncf_t_end,
                                                              options.ncf_record_every),
                        policy);
  } catch (const DivergenceError& e) {
    long_run = e.partial();
    rep.note = "NCF run diverged; verdict from the partial trajectory";
  }
  rep.verdict = direction_verdict(long_run, options.verdict);
  if (rep.verdict.outcome == Outcome::Undecided) {
    rep.inconclusive = true;
    if (rep.note.empty()) rep.note = "NCF direction verdict undecided";
  }
  if (rep.verdict.outcome == Outcome::DirectionalLimit) {
    rep.eta_est = std::numeric_limits<double>::infinity();
    for (const auto& r : long_run.records) rep.eta_est = std::min(rep.eta_est, r.norm);
  }

  // u(t) on the same step grid as the training runs.
  std::vector<Vec> u;
  u.reserve(static_cast<std::size_t>(n) + 1);
  rep.ncf = ncf_flow(p, w0, IntegratorConfig::fixed(options.step, n, std::max(1L, n / 500)), policy,
                     [&u](long, double, const Vec& s) { u.push_back(s); });
  const Vec& u_end = u.back();

  std::vector<double> deltas = options.deltas;
  std::sort(deltas.begin(), deltas.end(), std::greater<>());
  const bool split = model.blocks().size() > 1 && model.separable();
  rep.rows = parallel_map<Thm1Row>(deltas.size(), [&](std::size_t i) {
    Thm1Row row;
    row.delta = deltas[i];
    row.C = options.C;
    row.T_bar = T_bar;
    const auto traj = rescaled_train_flow(
        model, data, loss, w0, row.delta, IntegratorConfig::fixed(options.step, n, static_cast<int>(n)), policy,
        [&](long k, double, const Vec& v) {
          row.sup_dev = std::max(row.sup_dev, (v - u[static_cast<std::size_t>(k)]).norm());
        });
    row.norm_growth_excess = norm_growth_check(traj, rep.constants, row.delta);
    row.final_v = traj.final_w();
    row.final_norm_over_delta = row.final_v.norm();
    if (rep.verdict.limit_direction && row.final_norm_over_delta > 0.0)
      row.final_cos = row.final_v.dot(*rep.verdict.limit_direction) / row.final_norm_over_delta;
    const double eps = options.epsilon;
    if (row.final_norm_over_delta <= 2.0 * eps) {
      row.branch = Branch::Vanished;
    } else if (rep.verdict.limit_direction && rep.eta_est > 0.0 && row.final_norm_over_delta >= rep.eta_est &&
               row.final_cos >= 1.0 - (1.0 + 3.0 / (2.0 * rep.eta_est)) * eps) {
      row.branch = Branch::Aligned;
    }
    row.dichotomy = row.branch != Branch::Undecided;
    if (split) {
      row.blocks = classify_blocks(model, data, z, row.final_v, options.alignment);
      row.ncf_blocks = classify_blocks(model, data, z, u_end, options.alignment);
      row.blocks_match = true;
      for (std::size_t b = 0; b < row.blocks.size(); ++b)
        row.blocks_match = row.blocks_match && row.blocks[b].branch == row.ncf_blocks[b].branch;
    }
    return row;
  });

  std::vector<double> devs;
  for (const auto& r : rep.rows) devs.push_back(r.sup_dev);
  rep.strictly_decreasing = strictly_decreasing(devs);
  rep.nonincreasing = true;
  for (std::size_t i = 1; i < devs.size(); ++i) rep.nonincreasing = rep.nonincreasing && devs[i] <= devs[i - 1];
  return rep;
}

NetworkModel block_range_model(const NetworkModel& model, std::size_t first, std::size_t count) {
  require_structure(count > 0 && first + count <= model.blocks().size(), "block_range_model: range out of bounds");
  if (const auto* m = std::get_if<SquaredRelu>(&model.kind())) {
    std::vector<int> signs(m->signs.begin() + static_cast<long>(first),
                           m->signs.begin() + static_cast<long>(first + count));
    return NetworkModel::squared_relu(std::move(signs), m->input_dim, m->alpha);
  }
  if (const auto* m = std::get_if<TwoLayerLeakyRelu>(&model.kind()))
    return NetworkModel::two_layer_leaky_relu(m->alpha, static_cast<Index>(count), m->input_dim);
  throw StructuralError("block_range_model: only neuron-separable models split into block ranges");
}

SaddleSpec make_saddle(NetworkModel model, Dataset data, Loss loss, Vec w_bar, std::size_t first_zero_block,
                       double tol) {
  require_domain(loss.kind == LossKind::Square, "make_saddle: square loss only");
  require_structure(w_bar.size() == model.param_dim(), "make_saddle: wrong parameter length");
  const auto& blocks = model.blocks();
  require_structure(first_zero_block > 0 && first_zero_block < blocks.size(),
                    "make_saddle: both w_n and w_z must be nonempty");
  SaddlePartition part;
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (Index j = 0; j < blocks[b].length; ++j)
      (b < first_zero_block ? part.nonzero : part.zero).push_back(blocks[b].offset + j);
  part.validate(model.param_dim());
  for (Index j : part.zero) require_structure(w_bar[j] == 0.0, "make_saddle: w_z must be exactly zero");

  const Vec out = model.eval_all(data, w_bar);
  const Vec c = loss_residual_grad(loss, out, data.y());
  const double a = model.alpha();
  double best = std::numeric_limits<double>::infinity();
  for (double s : {a, 0.5 * (1.0 + a), 1.0}) {
    KinkPolicy pol;
    pol.relu_zero_value = s;
    const Vec g = model.weighted_subgrad(data, c, w_bar, pol);
    double r2 = 0.0;
    for (Index j : part.nonzero) r2 += g[j] * g[j];
    best = std::min(best, std::sqrt(r2));
  }
  if (!(best <= tol))
    throw DomainError("make_saddle: stationarity residual " + std::to_string(best) + " exceeds tolerance");

  double nn = 0.0;
  for (Index j : part.nonzero) nn += w_bar[j] * w_bar[j];
  SaddleSpec spec{std::move(model), data, loss, std::move(part), std::move(w_bar), data.y() - out, best,
                  std::sqrt(nn), std::sqrt(nn), first_zero_block};
  return spec;
}

SaddleSpec build_saddle_fig1(const Loss& loss) {
  auto model = NetworkModel::squared_relu(std::vector<int>(20, 1), 2);
  Vec w = Vec::Zero(40);
  for (int k = 0; k < 10; ++k) w[2 * k] = std::sqrt(0.5);
  return make_saddle(std::move(model), uniform_circle_dataset(50), loss, std::move(w), 10);
}

Vec gaussian_perturbation(Index dim, double stddev, std::uint64_t seed, std::uint64_t stream) {
  CounterRng rng(seed, stream);
  return rng.normal_vector(dim, stddev);
}

SaddleReport saddle_harness(const SaddleSpec& spec, const Vec& perturbation, const SaddleOptions& options) {
  require_structure(perturbation.size() == spec.w_bar.size(), "saddle_harness: wrong perturbation length");
  require_domain(options.C > 1.0, "saddle_harness: C must exceed 1");
  const auto& model = spec.model;
  const auto& data = spec.data;
  const auto policy = KinkPolicy::defaults(model.alpha());
  const double horizon = time_horizon(options.integ);

  SaddleReport rep;
  rep.delta = perturbation.norm();
  const double d2 = rep.delta * rep.delta;

  // Pilot run for the growth rate M2 of Z(t) = |w - w_bar|^2.
  if (rep.delta > 0.0) {
    const Vec pilot = gaussian_perturbation(perturbation.size(), options.init_std, options.seed, kPilotStream);
    const double z0 = pilot.squaredNorm();
    double rate = 0.0;
    loss_flow(model, data, spec.loss, spec.w_bar + pilot, options.integ, policy,
              [&](long, double t, const Vec& w) {
                if (t > 0.0) rate = std::max(rate, std::log((w - spec.w_bar).squaredNorm() / z0) / t);
              });
    rep.M2 = rate;
    if (rate > 0.0) {
      rep.T2 = std::min(std::log(options.C) / rate, horizon);
      rep.M2_note = "max_t ln(Z(t)/Z(0))/t on a pilot perturbation";
    } else {
      rep.T2 = horizon;
      rep.M2_note = "Z(t) <= Z(0) throughout the pilot; T2 set to the run horizon";
    }
  } else {
    rep.T2 = horizon;
    rep.M2_note = "delta = 0: exact saddle";
  }

  Vec w_T2 = spec.w_bar + perturbation;
  const double loss0 = loss_value(spec.loss, model.eval_all(data, w_T2), data.y());
  rep.traj = loss_flow(model, data, spec.loss, spec.w_bar + perturbation, options.integ, policy,
                       [&](long, double t, const Vec& w) {
                         const double Z = (w - spec.w_bar).squaredNorm();
                         rep.max_distance = std::max(rep.max_distance, std::sqrt(Z));
                         if (t <= rep.T2 * (1.0 + 1e-12)) {
                           w_T2 = w;
                           if (d2 > 0.0) rep.max_Z_over_delta2 = std::max(rep.max_Z_over_delta2, Z / d2);
                           if (Z > options.C * d2 && !rep.first_violation_t) rep.first_violation_t = t;
                         }
                       });
  rep.escaped = rep.first_violation_t.has_value();
  for (const auto& r : rep.traj.records)
    rep.loss_rel_change = std::max(rep.loss_rel_change, std::abs(r.loss - loss0) / loss0);

  const std::size_t nb = model.blocks().size();
  const NetworkModel hz = block_range_model(model, spec.first_zero_block, nb - spec.first_zero_block);
  const Vec z = ncf_weights(spec.loss, spec.y_bar);
  const Index off = model.blocks()[spec.first_zero_block].offset;
  if (hz.blocks()[0].length == 2) rep.kkt = block_kkt_grid(hz.block_model(0), data, z, options.alignment.grid);

  if (rep.delta > 0.0) {
    auto classify = [&](const Vec& w, double& fraction) {
      auto out = classify_blocks(hz, data, z, w.tail(model.param_dim() - off) / rep.delta, options.alignment);
      int live = 0, aligned = 0;
      for (auto& c : out) {
        c.block += spec.first_zero_block;
        if (c.branch == Branch::Vanished) continue;
        ++live;
        if (c.branch == Branch::Aligned) ++aligned;
      }
      fraction = live ? static_cast<double>(aligned) / live : 1.0;
      return out;
    };
    rep.small_blocks = classify(w_T2, rep.aligned_fraction);
    rep.final_blocks = classify(rep.traj.final_w(), rep.final_aligned_fraction);
  }

  // w_z / delta against the NCF flow of the residual, over a delta sweep.
  if (!options.sweep_deltas.empty() && rep.delta > 0.0) {
    const Vec zeta = perturbation / rep.delta;
    const Vec zeta_z = zeta.tail(model.param_dim() - off);
    const NCFProblem pz(z, hz, data);
    IntegratorConfig cfg = IntegratorConfig::fixed_until(options.integ.step, options.sweep_t_end, 1 << 30);
    std::vector<Vec> u;
    ncf_flow(pz, zeta_z, cfg, policy, [&u](long, double, const Vec& s) { u.push_back(s); });
    std::vector<double> deltas = options.sweep_deltas;
    std::sort(deltas.begin(), deltas.end(), std::greater<>());
    const auto devs = parallel_map<double>(deltas.size(), [&](std::size_t i) {
      const double d = deltas[i];
      double sup = 0.0;
      loss_flow(model, data, spec.loss, spec.w_bar + d * zeta, cfg, policy, [&](long k, double, const Vec& w) {
        sup = std::max(sup, (w.tail(model.param_dim() - off) / d - u[static_cast<std::size_t>(k)]).norm());
      });
      return sup;
    });
    for (std::size_t i = 0; i < deltas.size(); ++i) rep.sweep.push_back({deltas[i], devs[i]});
    rep.sweep_decreasing = strictly_decreasing(devs);
  }
  return rep;
}

namespace {

double ratio_at(const Vec& w_bar, const Vec& w, const Vec& s) {
  const Vec d = w_bar - w;
  return d.dot(s) / d.squaredNorm();
}

}  // namespace

TechProbeReport tech_assumption_probe(const SaddleSpec& spec, int n_dirs, double gamma, std::uint64_t seed,
                                      const KinkPolicy& policy) {
  require_domain(gamma > 0.0, "tech_assumption_probe: gamma must be positive");
  require_domain(n_dirs > 0, "tech_assumption_probe: need at least one direction");
  const auto& idx = spec.partition.nonzero;
  const Index k = static_cast<Index>(idx.size());
  Vec bar_n(k);
  for (Index j = 0; j < k; ++j) bar_n[j] = spec.w_bar[idx[static_cast<std::size_t>(j)]];

  CounterRng rng(seed, kTechStream);
  TechProbeReport rep;
  rep.min_ratio = std::numeric_limits<double>::infinity();
  for (int s = 0; s < n_dirs; ++s) {
    // uniform() is in the open interval (0, 1), so w_n != w_bar_n.
    const Vec dir = rng.unit_vector(k);
    const double r = gamma * rng.uniform();
    Vec w = spec.w_bar;
    for (Index j = 0; j < k; ++j) w[idx[static_cast<std::size_t>(j)]] += r * dir[j];
    const Vec c = loss_residual_grad(spec.loss, spec.model.eval_all(spec.data, w), spec.data.y());
    const Vec g = spec.model.weighted_subgrad(spec.data, c, w, policy);
    Vec wn(k), sn(k);
    for (Index j = 0; j < k; ++j) {
      wn[j] = w[idx[static_cast<std::size_t>(j)]];
      sn[j] = -g[idx[static_cast<std::size_t>(j)]];
    }
    const double ratio = ratio_at(bar_n, wn, sn);
    ++rep.samples;
    if (ratio < rep.min_ratio) {
      rep.min_ratio = ratio;
      rep.argmin = w;
    }
  }
  return rep;
}

double tech_ratio(const NetworkModel& model, const Dataset& data, const Loss& loss, const Vec& w_bar,
                  const Vec& w, const KinkPolicy& policy) {
  require_domain((w - w_bar).squaredNorm() > 0.0, "tech_ratio: w must differ from w_bar");
  const Vec c = loss_residual_grad(loss, model.eval_all(data, w), data.y());
  return ratio_at(w_bar, w, -model.weighted_subgrad(data, c, w, policy));
}

NCFProblem toy_problem() {
  return NCFProblem(Vec::Ones(1), NetworkModel::diagonal(1, -1.0), Dataset(Mat::Ones(1, 1), Vec::Ones(1)));
}

namespace {

/// Hitting time of u2 = 0 for the closed-form toy flow, if any.
std::optional<double> toy_freeze_time(const Vec& u0) {
  const double a = u0[0];
  const double b = std::abs(u0[1]);
  if (b == 0.0) return a <= 0.0 ? std::optional<double>(0.0) : std::nullopt;
  if (a < 0.0 && b < -a) return std::atanh(b / -a);
  return std::nullopt;
}

}  // namespace

Vec toy_reference(const Vec& u0, double t) {
  require_structure(u0.size() == 2, "toy_reference: need [u1, u2]");
  const double a = u0[0];
  const double b = std::abs(u0[1]);
  if (b == 0.0) return u0;
  const auto tf = toy_freeze_time(u0);
  const double s = tf ? std::min(t, *tf) : t;
  const double p = a * std::cosh(s) + b * std::sinh(s);
  const double q = a * std::sinh(s) + b * std::cosh(s);
  if (tf && t >= *tf) return Vec{{-std::sqrt(a * a - b * b), 0.0}};
  return Vec{{p, std::copysign(q, u0[1])}};
}

ToyReport toy_u1u2(const KinkPolicy& policy, const Vec& u0, const IntegratorConfig& integ) {
  require_structure(u0.size() == 2, "toy_u1u2: need [u1, u2]");
  ToyReport rep;
  rep.t_freeze = toy_freeze_time(u0);
  const double q0 = u0[0] * u0[0] - u0[1] * u0[1];
  rep.stationary = true;
  const NCFProblem p = toy_problem();
  rep.traj = ncf_flow(p, u0, integ, policy, [&](long, double t, const Vec& u) {
    rep.conservation_drift = std::max(rep.conservation_drift, std::abs(u[0] * u[0] - u[1] * u[1] - q0));
    rep.stationary = rep.stationary && u == u0;
    rep.max_reference_error = std::max(rep.max_reference_error, (u - toy_reference(u0, t)).norm());
  });
  return rep;
}

Trajectory escape_g_flow(double delta, double step, int record_every) {
  require_domain(delta >= 0.0 && delta < 0.1, "escape_g: delta must lie in [0, 0.1)");
  require_domain(step > 0.0, "escape_g: step must be positive");
  const auto model = NetworkModel::diagonal(1, -1.0);
  const Dataset data(Mat::Ones(1, 1), Vec::Ones(1));
  return loss_flow(model, data, Loss{LossKind::Square, 2.0}, Vec{{1.0 + delta, delta}},
                   IntegratorConfig::fixed_until(step, 0.1, record_every), KinkPolicy::defaults(-1.0));
}

double escape_g(double delta, double step) {
  return (escape_g_flow(delta, step, 1 << 30).final_w() - Vec{{1.0, 0.0}}).norm();
}

NonbranchSetReport leaky_nonbranch_set(const NCFProblem& p, double v_star, const Vec& u_star,
                                       const std::vector<Vec>& inits, const NonbranchSetOptions& options) {
  const auto* m = std::get_if<TwoLayerLeakyRelu>(&p.model.kind());
  require_structure(m && m->width == 1, "leaky_nonbranch_set: needs a single two-layer unit");
  require_structure(u_star.size() == m->input_dim, "leaky_nonbranch_set: u_star has the wrong length");
  const auto policy = KinkPolicy::defaults(m->alpha);
  const Index k = p.model.param_dim();

  NonbranchSetReport rep;
  Vec w_star(k);
  w_star << v_star, u_star;
  rep.star = kkt_residual(p, w_star, policy, {true, 1e-6});
  require_domain(rep.star.residual <= 1e-6, "leaky_nonbranch_set: (v*, u*) is not a KKT point");
  require_domain(ncf_value(p, w_star) > 0.0, "leaky_nonbranch_set: need v* z^T sigma(X^T u*) > 0");

  const Vec pre = p.data.X().transpose() * u_star;
  rep.eta1 = pre.cwiseAbs().minCoeff();
  require_domain(rep.eta1 > 0.0, "leaky_nonbranch_set: a sample lies on the hyperplane of u*");
  rep.eta2 = p.data.X().colwise().norm().maxCoeff();
  rep.gamma = options.gamma > 0.0 ? options.gamma : rep.eta1 / (2.0 * rep.eta2);

  // Inside S the activation pattern is fixed, so the field is linear with norm |a|.
  Vec a = Vec::Zero(u_star.size());
  for (Index i = 0; i < p.data.n(); ++i) a += p.z[i] * (pre[i] > 0.0 ? 1.0 : m->alpha) * p.data.x(i);
  rep.lipschitz = a.norm();

  const double sv = v_star > 0.0 ? 1.0 : -1.0;
  std::vector<std::vector<Vec>> states(inits.size());
  std::vector<std::vector<double>> times(inits.size());
  const int every = std::max(1, options.integ.record_every);
  Trajectory first;
  rep.inits = parallel_map<NonbranchInit>(inits.size(), [&](std::size_t j) {
    NonbranchInit r;
    r.w0 = inits[j];
    require_structure(r.w0.size() == k, "leaky_nonbranch_set: init has the wrong length");
    const Vec u0 = r.w0.tail(k - 1);
    r.in_S = sv * r.w0[0] > u0.norm() && (u0 - u_star).norm() <= rep.gamma;
    const double q0 = r.w0[0] * r.w0[0] - u0.squaredNorm();
    double defect = 0.0;
    Vec prev = r.w0;
    Trajectory traj = ncf_flow(p, r.w0, options.integ, policy, [&](long step, double t, const Vec& w) {
      const Vec d = w - prev;
      defect += d[0] * d[0] - d.tail(k - 1).squaredNorm();
      prev = w;
      const double q = w[0] * w[0] - w.tail(k - 1).squaredNorm();
      r.drift = std::max(r.drift, std::abs(q - q0));
      r.continuous_drift = std::max(r.continuous_drift, std::abs(q - q0 - defect));
      const Vec s = p.data.X().transpose() * w.tail(k - 1);
      if (r.signs_preserved) {
        for (Index i = 0; i < s.size(); ++i) {
          if ((s[i] > 0.0) != (pre[i] > 0.0) || s[i] == 0.0) {
            r.signs_preserved = false;
            r.first_flip_t = t;
            break;
          }
        }
      }
      if (step % every == 0) {
        states[j].push_back(w);
        times[j].push_back(t);
      }
    });
    if (j == 0) first = std::move(traj);
    return r;
  });

  rep.conservation_ok = true;
  rep.signs_ok = true;
  for (const auto& r : rep.inits) {
    if (!r.in_S) continue;
    rep.conservation_ok = rep.conservation_ok && r.drift <= options.conservation_tol;
    rep.signs_ok = rep.signs_ok && r.signs_preserved;
  }
  for (std::size_t i = 0; i < inits.size(); ++i) {
    for (std::size_t j = i + 1; j < inits.size(); ++j) {
      if (!rep.inits[i].in_S || !rep.inits[j].in_S) continue;
      const double d0 = (inits[i] - inits[j]).norm();
      if (d0 == 0.0) continue;
      for (std::size_t s = 0; s < states[i].size(); ++s) {
        const double d = (states[i][s] - states[j][s]).norm();
        rep.max_pair_ratio = std::max(rep.max_pair_ratio, d / (d0 * std::exp(rep.lipschitz * times[i][s])));
      }
    }
  }
  rep.continuation_ok = rep.max_pair_ratio <= 1.0 + 1e-9;
  rep.first = std::move(first);
  return rep;
}

namespace {

struct ProbeBatch {
  std::vector<double> t;
  std::vector<double> d;  // max pairwise distance / rho
};

ProbeBatch probe_batch(const FlowRunner& runner, const Vec& u0, const std::vector<Vec>& dirs, double rho) {
  std::vector<std::vector<Vec>> states(dirs.size());
  ProbeBatch out;
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    const Trajectory traj = runner(u0 + rho * dirs[k]);
    for (std::size_t i : traj.snapshot_indices()) {
      states[k].push_back(*traj.records[i].w);
      if (k == 0) out.t.push_back(traj.records[i].t);
    }
    require_structure(states[k].size() == out.t.size(), "nonbranch_probe: runs disagree on their record grid");
  }
  out.d.assign(out.t.size(), 0.0);
  for (std::size_t s = 0; s < out.t.size(); ++s)
    for (std::size_t a = 0; a < dirs.size(); ++a)
      for (std::size_t b = a + 1; b < dirs.size(); ++b)
        out.d[s] = std::max(out.d[s], (states[a][s] - states[b][s]).norm() / rho);
  return out;
}

}  // namespace

NonbranchProbeReport nonbranch_probe(const FlowRunner& runner, const Vec& u0, int n_perturb, double rho,
                                     std::uint64_t seed) {
  require_domain(rho > 0.0, "nonbranch_probe: rho must be positive");
  require_domain(n_perturb >= 1, "nonbranch_probe: need at least one perturbation");
  CounterRng rng(seed, kProbeStream);
  std::vector<Vec> dirs;
  for (int k = 0; k < n_perturb; ++k) dirs.push_back(rng.unit_vector(u0.size()));

  NonbranchProbeReport rep;
  const Trajectory base = runner(u0);
  for (const auto& r : base.records) rep.kink_riding = rep.kink_riding || r.kink;

  const ProbeBatch coarse = probe_batch(runner, u0, dirs, rho);
  const ProbeBatch fine = probe_batch(runner, u0, dirs, rho / 10.0);
  rep.t = coarse.t;
  rep.divergence = coarse.d;
  const double d0 = coarse.d.empty() ? 0.0 : coarse.d.front();
  if (d0 > 0.0)
    for (std::size_t s = 1; s < coarse.t.size(); ++s)
      if (coarse.t[s] > 0.0 && coarse.d[s] > 0.0)
        rep.lambda_fit = std::max(rep.lambda_fit, std::log(coarse.d[s] / d0) / coarse.t[s]);
  const double mc = coarse.d.empty() ? 0.0 : *std::max_element(coarse.d.begin(), coarse.d.end());
  const double mf = fine.d.empty() ? 0.0 : *std::max_element(fine.d.begin(), fine.d.end());
  rep.scale_ratio = mc > 0.0 ? mf / mc : 0.0;
  rep.branching = rep.kink_riding && rep.scale_ratio > 3.0;
  return rep;
}

namespace {

FlowSystem forced_system(const NCFProblem& p, double delta_f, const KinkPolicy& policy) {
  FlowSystem sys;
  sys.velocity = [&p, delta_f, policy](double t, const Vec& u) {
    Vec c = p.z;
    for (Index i = 0; i < c.size(); ++i)
      c[i] += delta_f * std::sin(static_cast<double>(1 + i) * t + static_cast<double>(i));
    return p.model.weighted_subgrad(p.data, c, u, policy);
  };
  sys.objective = [&p](const Vec& u) { return ncf_value(p, u); };
  sys.monotone_sign = +1;
  for (const auto& b : p.model.blocks()) sys.blocks.emplace_back(b.offset, b.length);
  return sys;
}

std::vector<Vec> forced_states(const NCFProblem& p, const Vec& u0, double delta_f, double T, double step,
                               const KinkPolicy& policy) {
  std::vector<Vec> out;
  integrate(forced_system(p, delta_f, policy), u0, IntegratorConfig::fixed_until(step, T, 1 << 30),
            [&out](long, double, const Vec& u) { out.push_back(u); });
  return out;
}

double sup_gap(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) s = std::max(s, (a[i] - b[i]).norm());
  return s;
}

}  // namespace

double perturbation_stability(const NCFProblem& p, const Vec& u0, double delta_f, double T, double step,
                              const KinkPolicy& policy) {
  require_domain(delta_f >= 0.0, "perturbation_stability: delta_f must be nonnegative");
  require_domain(std::isfinite(T) && T > 0.0 && step > 0.0, "perturbation_stability: need finite T and step > 0");
  return sup_gap(forced_states(p, u0, 0.0, T, step, policy), forced_states(p, u0, delta_f, T, step, policy));
}

StabilitySweep perturbation_sweep(const NCFProblem& p, const Vec& u0, const std::vector<double>& levels, double T,
                                  double step, const KinkPolicy& policy, std::uint64_t seed) {
  require_domain(!levels.empty(), "perturbation_sweep: empty sweep");
  StabilitySweep out;
  out.levels = levels;
  std::sort(out.levels.begin(), out.levels.end(), std::greater<>());
  const auto base = forced_states(p, u0, 0.0, T, step, policy);
  out.deviations = parallel_map<double>(out.levels.size(), [&](std::size_t i) {
    return sup_gap(base, forced_states(p, u0, out.levels[i], T, step, policy));
  });
  out.decreasing = strictly_decreasing(out.deviations);

  // Finite-difference Lipschitz constant of the unforced field along the run.
  CounterRng rng(seed, 0x11b5);
  const std::size_t stride = std::max<std::size_t>(1, base.size() / 20);
  for (std::size_t s = 0; s < base.size(); s += stride) {
    const Vec& u = base[s];
    const Vec f0 = ncf_grad(p, u, policy);
    const double eta = 1e-6 * std::max(1.0, u.norm());
    for (int r = 0; r < 3; ++r) {
      const Vec e = rng.unit_vector(u.size());
      out.lipschitz = std::max(out.lipschitz, (ncf_grad(p, u + eta * e, policy) - f0).norm() / eta);
    }
  }
  return out;
}

}  // namespace ncf
