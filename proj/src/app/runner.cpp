#include "ncf/app/runner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ncf/experiments.hpp"
#include "ncf/random.hpp"

namespace ncf::app {

namespace {

constexpr double kRad = 1.0 / kDegree;

Json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

Json block_json(const BlockClass& c) {
  return {{"block", c.block},
          {"branch", to_string(c.branch)},
          {"norm_over_delta", c.norm_over_delta},
          {"angle_deg", c.angle < 0.0 ? Json(nullptr) : Json(c.angle * kRad)},
          {"angle_to_kkt_deg", c.angle_to_kkt < 0.0 ? Json(nullptr) : Json(c.angle_to_kkt * kRad)},
          {"target_residual", c.target_residual < 0.0 ? Json(nullptr) : Json(c.target_residual)},
          {"target_nonneg", c.target_nonneg}};
}

Json blocks_json(const std::vector<BlockClass>& blocks) {
  Json out = Json::array();
  for (const auto& c : blocks) out.push_back(block_json(c));
  return out;
}

Json grid_json(const ThetaGridResult& g) {
  Json angles = Json::array();
  for (double a : g.angles) angles.push_back(a * kRad);
  Json flat = Json::array();
  for (const auto& [a, b] : g.flat) flat.push_back({a * kRad, b * kRad});
  return {{"angles_deg", angles}, {"flat_arcs_deg", flat}, {"derivative_scale", g.scale}};
}

Json constants_json(const Constants& k) {
  return {{"beta", k.beta}, {"beta_hat", k.beta_hat}, {"beta_tilde", k.beta_tilde}, {"beta_source", k.beta_source}};
}

std::vector<double> grid_degrees(const ThetaGridResult& g) {
  std::vector<double> out;
  for (double a : g.angles) out.push_back(a * kRad);
  for (const auto& [a, b] : g.flat) out.push_back(0.5 * (a + b) * kRad);
  for (double& d : out) d = std::fmod(d, 360.0);
  std::sort(out.begin(), out.end());
  return out;
}

double loss_rel_change(const Trajectory& traj) {
  const double l0 = traj.front().loss;
  double worst = 0.0;
  for (const auto& r : traj.records) worst = std::max(worst, std::abs(r.loss - l0));
  return l0 != 0.0 ? worst / std::abs(l0) : worst;
}

double max_block_norm(const Trajectory& traj, double scale) {
  double worst = 0.0;
  for (const auto& r : traj.records)
    if (r.block_norms.size()) worst = std::max(worst, scale * r.block_norms.maxCoeff());
  return worst;
}

/// Polar angles in degrees of the given 2-D blocks at every snapshot.
std::vector<Series> angle_series(const Trajectory& traj, const NetworkModel& model,
                                 const std::vector<std::size_t>& blocks) {
  std::vector<Series> out;
  const auto snaps = traj.snapshot_indices();
  for (std::size_t b : blocks) {
    const Block& blk = model.blocks()[b];
    if (blk.length != 2) continue;
    Series s;
    s.label = "block " + std::to_string(b);
    for (std::size_t i : snaps) {
      const Vec wb = traj.records[i].w->segment(blk.offset, 2);
      if (wb.norm() == 0.0) continue;
      s.x.push_back(static_cast<double>(traj.records[i].step));
      s.y.push_back(polar_angle(wb) * kRad);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::size_t> all_blocks(const NetworkModel& model) {
  std::vector<std::size_t> out(model.blocks().size());
  for (std::size_t b = 0; b < out.size(); ++b) out[b] = b;
  return out;
}

/// Cosine of each block to its initial direction, for blocks that are not 2-D.
std::vector<Series> cos_series(const Trajectory& traj, std::size_t nb) {
  std::vector<Series> out(nb);
  for (std::size_t b = 0; b < nb; ++b) out[b].label = "block " + std::to_string(b);
  for (std::size_t i : traj.snapshot_indices()) {
    const auto& r = traj.records[i];
    for (std::size_t b = 0; b < nb && b < static_cast<std::size_t>(r.block_cos.size()); ++b) {
      out[b].x.push_back(static_cast<double>(r.step));
      out[b].y.push_back(r.block_cos[static_cast<Index>(b)]);
    }
  }
  return out;
}

Series ncf_curve(const NCFProblem& single) {
  Series s;
  s.label = "N(theta)";
  for (int k = 0; k <= 720; ++k) {
    const double th = k * 0.5;
    s.y.push_back(th);
    s.x.push_back(ncf_theta(single, th * kDegree));
  }
  return s;
}

/// Angle strip for a separable model with 2-D blocks plus the NCF of one block.
AnglePlot block_angle_plot(const Trajectory& traj, const NetworkModel& model, const Dataset& data, const Vec& z,
                           const std::vector<std::size_t>& blocks) {
  AnglePlot plot;
  const NetworkModel bm = model.block_model(blocks.front());
  if (bm.param_dim() != 2) {
    plot.y_label = "cos to initial direction";
    plot.series = cos_series(traj, model.blocks().size());
    return plot;
  }
  plot.series = angle_series(traj, model, blocks);
  const NCFProblem single(z, bm, data);
  plot.ncf_curve = ncf_curve(single);
  plot.kkt_angles = grid_degrees(block_kkt_grid(bm, data, z));
  return plot;
}

/// Polar angle of a 2-D state over time.
AnglePlot state_angle_plot(const Trajectory& traj, const std::string& label) {
  AnglePlot plot;
  Series s;
  s.label = label;
  for (std::size_t i : traj.snapshot_indices()) {
    const Vec& w = *traj.records[i].w;
    if (w.size() < 2 || w.tail(2).norm() == 0.0) continue;
    s.x.push_back(static_cast<double>(traj.records[i].step));
    s.y.push_back(polar_angle(w.tail(2)) * kRad);
  }
  plot.series.push_back(std::move(s));
  return plot;
}

struct AngleStats {
  int nonzero = 0;
  int live = 0;
  int live_within = 0;
  int aligned = 0;
  int within_all = 0;  // among all nonzero blocks
};

AngleStats angle_stats(const std::vector<BlockClass>& blocks, double angle_tol) {
  AngleStats s;
  for (const auto& c : blocks) {
    const bool within = c.angle_to_kkt >= 0.0 && c.angle_to_kkt <= angle_tol;
    if (c.norm_over_delta > 0.0) {
      ++s.nonzero;
      if (within) ++s.within_all;
    }
    if (c.branch == Branch::Vanished) continue;
    ++s.live;
    if (within) ++s.live_within;
    if (c.branch == Branch::Aligned) ++s.aligned;
  }
  return s;
}

double ratio(int num, int den) { return den > 0 ? static_cast<double>(num) / den : 1.0; }

AlignmentOptions alignment_options(const RunConfig& c) {
  AlignmentOptions a;
  a.epsilon = c.param("epsilon", a.epsilon);
  a.angle_tol = c.param("angle_tol_deg", 2.0) * kDegree;
  return a;
}

const NetworkModel& need_model(const RunConfig& c) {
  if (!c.model || !c.dataset) throw ConfigError(c.experiment + ": needs a model and a dataset");
  return *c.model;
}

IntegratorConfig integ_or(const RunConfig& c, IntegratorConfig fallback) {
  if (!c.has_integ) {
    fallback.seed = c.seed;
    return fallback;
  }
  return c.integ;
}

void require_separable_2d(const RunConfig& c) {
  const auto& m = need_model(c);
  if (!(m.blocks().size() == 1 || m.separable()))
    throw ConfigError(c.experiment + ": the model must be separable into neurons");
}

/// Shared part of the small-initialization figure runs.
void figure_common(RunResult& out, const RunConfig& c, const Trajectory& traj, double delta, double w_scale,
                   const Vec& u0, const IntegratorConfig& integ) {
  const auto& m = *c.model;
  const auto& d = *c.dataset;
  const auto pol = c.kink_policy();
  const AlignmentOptions al = alignment_options(c);
  const Vec z = ncf_weights(c.loss, d.y());
  const Constants k = compute_constants(m, d, c.loss, c.seed);
  const auto blocks = sep_alignment(m, d, c.loss, traj, delta, al);
  const AngleStats st = angle_stats(blocks, al.angle_tol);
  const double change = loss_rel_change(traj);
  const double growth = norm_growth_check(traj, k, delta);
  const double within = ratio(st.live_within, st.live);

  out.result["delta"] = delta;
  out.result["constants"] = constants_json(k);
  out.result["loss_initial"] = traj.front().loss;
  out.result["loss_final"] = traj.back().loss;
  out.result["loss_rel_change"] = change;
  out.result["max_neuron_norm"] = max_block_norm(traj, w_scale);
  out.result["norm_growth_excess"] = growth;
  out.result["non_vanished"] = st.live;
  out.result["non_vanished_within_angle_tol"] = st.live_within;
  out.result["aligned"] = st.aligned;
  out.result["blocks"] = blocks_json(blocks);
  if (m.block_model(0).param_dim() == 2) out.result["kkt_grid_block0"] = grid_json(block_kkt_grid(m.block_model(0), d, z));

  out.checks.push_back(make_check("loss_rel_change", change, "<", c.param("max_loss_rel_change", 0.01)));
  out.checks.push_back(make_check("within_angle_tol_fraction", within, ">=", c.param("min_aligned_fraction", 0.9)));
  out.checks.push_back(make_check("norm_growth_excess", growth, "<=", c.param("norm_growth_tol", 1e-10)));
  out.metrics = {{"loss_rel_change", change},
                 {"max_neuron_norm", max_block_norm(traj, w_scale)},
                 {"within_angle_tol_fraction", within},
                 {"aligned_fraction", ratio(st.aligned, st.live)},
                 {"non_vanished", st.live},
                 {"norm_growth_excess", growth}};

  const NCFProblem p(z, m, d);
  out.ncf_runs.emplace_back("companion", ncf_flow(p, u0, integ, pol));
  out.angles = block_angle_plot(traj, m, d, z, all_blocks(m));
}

RunResult run_fig1(const RunConfig& c) {
  require_separable_2d(c);
  const auto& m = *c.model;
  RunResult out;
  const IntegratorConfig integ = integ_or(c, IntegratorConfig::fixed(5e-5, 50000, 1000));
  const Vec w0 = preset_init(m.param_dim(), c.seed, c.param("init_std", 1e-5));
  const double delta = w0.norm();
  out.trajectory = train_flow(m, *c.dataset, c.loss, w0 / delta, delta, integ, c.kink_policy());
  out.trajectory_label = "training flow, w coordinates";
  figure_common(out, c, out.trajectory, delta, 1.0, w0 / delta, integ);
  const double mx = out.result["max_neuron_norm"];
  out.checks.insert(out.checks.begin() + 1, make_check("max_neuron_norm", mx, "<", c.param("max_neuron_norm", 1e-3)));
  return out;
}

RunResult run_fig3(const RunConfig& c) {
  require_separable_2d(c);
  const auto& m = *c.model;
  RunResult out;
  const IntegratorConfig integ = integ_or(c, IntegratorConfig::fixed_until(1e-3, 10.0, 100));
  const double delta = c.param("delta", 1e-12);
  const Vec w0 = preset_init(m.param_dim(), c.seed, 1.0).normalized();
  out.trajectory = rescaled_train_flow(m, *c.dataset, c.loss, w0, delta, integ, c.kink_policy());
  out.trajectory_label = "rescaled training flow, v = w / delta";
  figure_common(out, c, out.trajectory, delta, delta, w0, integ);

  // Stationary angles of the per-neuron NCF must be refined to residual <= 1e-8.
  const NetworkModel bm = m.block_model(0);
  if (bm.param_dim() == 2) {
    const Vec z = ncf_weights(c.loss, c.dataset->y());
    const NCFProblem single(z, bm, *c.dataset);
    const ThetaGridResult grid = block_kkt_grid(bm, *c.dataset, z);
    double worst = 0.0;
    for (double a : grid.angles) {
      const auto r = kkt_residual(single, Vec{{std::cos(a), std::sin(a)}}, c.kink_policy(), {true, 1e-8});
      worst = std::max(worst, r.residual);
    }
    out.result["theta_grid_max_residual"] = worst;
    out.checks.push_back(make_check("theta_grid_max_residual", worst, "<=", 1e-8));
  }
  return out;
}

RunResult run_saddle(const RunConfig& c) {
  Loss loss{LossKind::Square, 1.0 / 50};
  if (c.raw.contains("loss")) {
    loss = c.loss;
    if (c.loss_is_mean) loss.scale = 1.0 / 50;
  }
  const SaddleSpec spec = build_saddle_fig1(loss);
  SaddleOptions o;
  o.integ = integ_or(c, o.integ);
  o.C = c.param("C", o.C);
  o.epsilon = c.param("epsilon", o.epsilon);
  o.seed = c.seed;
  o.init_std = c.param("init_std", o.init_std);
  if (c.params.contains("sweep_deltas")) o.sweep_deltas = c.params["sweep_deltas"].get<std::vector<double>>();
  o.sweep_t_end = c.param("sweep_t_end", o.sweep_t_end);
  o.alignment = alignment_options(c);
  o.alignment.epsilon = o.epsilon;

  const Vec P = gaussian_perturbation(spec.model.param_dim(), o.init_std, c.seed);
  SaddleReport r = saddle_harness(spec, P, o);

  RunResult out;
  Json sweep = Json::array();
  for (const auto& row : r.sweep) sweep.push_back({{"delta", row.delta}, {"sup_dev", row.sup_dev}});
  const AngleStats fin = angle_stats(r.final_blocks, o.alignment.angle_tol);
  const double small_within = ratio(fin.within_all, static_cast<int>(r.final_blocks.size()));
  out.result = {{"w_bar", vec_json(spec.w_bar)},
                {"y_bar", vec_json(spec.y_bar)},
                {"stationarity_residual", spec.stationarity_residual},
                {"delta", r.delta},
                {"M2", r.M2},
                {"T2", r.T2},
                {"M2_note", r.M2_note},
                {"escaped", r.escaped},
                {"first_violation_t", optional_json(r.first_violation_t)},
                {"max_Z_over_delta2", r.max_Z_over_delta2},
                {"loss_rel_change", r.loss_rel_change},
                {"max_distance", r.max_distance},
                {"small_blocks_at_T2", blocks_json(r.small_blocks)},
                {"aligned_fraction_at_T2", r.aligned_fraction},
                {"final_blocks", blocks_json(r.final_blocks)},
                {"final_aligned_fraction", r.final_aligned_fraction},
                {"small_within_angle_tol", fin.within_all},
                {"kkt_grid", grid_json(r.kkt)},
                {"sweep", sweep},
                {"sweep_decreasing", r.sweep_decreasing}};
  out.checks.push_back(make_check("max_distance", r.max_distance, "<", c.param("max_distance", 1e-3)));
  out.checks.push_back(make_check("loss_rel_change", r.loss_rel_change, "<", c.param("max_loss_rel_change", 0.01)));
  out.checks.push_back(make_check("max_Z_over_delta2_before_T2", r.max_Z_over_delta2, "<=", o.C));
  out.checks.push_back(
      make_check("small_within_angle_tol_fraction", small_within, ">=", c.param("min_aligned_fraction", 1.0)));
  if (!r.sweep.empty())
    out.checks.push_back(make_check("sweep_strictly_decreasing", r.sweep_decreasing ? 1.0 : 0.0, "==", 1.0));
  out.metrics = {{"max_distance", r.max_distance},
                 {"loss_rel_change", r.loss_rel_change},
                 {"small_within_angle_tol_fraction", small_within},
                 {"final_aligned_fraction", r.final_aligned_fraction}};

  std::vector<std::size_t> small;
  for (std::size_t b = spec.first_zero_block; b < spec.model.blocks().size(); ++b) small.push_back(b);
  out.angles = block_angle_plot(r.traj, spec.model, spec.data, ncf_weights(spec.loss, spec.y_bar), small);
  out.trajectory = std::move(r.traj);
  out.trajectory_label = "training flow from the perturbed saddle, w coordinates";
  return out;
}

RunResult run_thm1(const RunConfig& c) {
  const auto& m = need_model(c);
  const auto& d = *c.dataset;
  Thm1Options o;
  if (c.params.contains("deltas")) o.deltas = c.params["deltas"].get<std::vector<double>>();
  o.C = c.param("C", o.C);
  o.epsilon = c.param("epsilon", o.epsilon);
  o.ncf_t_end = c.param("ncf_t_end", o.ncf_t_end);
  o.step = c.has_integ ? c.integ.step : 5e-5;
  o.seed = c.seed;
  o.alignment = alignment_options(c);
  o.alignment.epsilon = o.epsilon;
  const Vec w0 = preset_init(m.param_dim(), c.seed, 1.0).normalized();
  Thm1Report r = thm1_harness(m, d, c.loss, w0, o);
  if (r.inconclusive && r.rows.empty()) throw DegenerateDataError("thm1: " + r.note);

  RunResult out;
  Json rows = Json::array();
  double worst_growth = -std::numeric_limits<double>::infinity();
  bool all_match = true;
  for (const auto& row : r.rows) {
    rows.push_back({{"delta", row.delta},
                    {"C", row.C},
                    {"T_bar", row.T_bar},
                    {"sup_dev", row.sup_dev},
                    {"final_norm_over_delta", row.final_norm_over_delta},
                    {"final_cos", row.final_cos},
                    {"branch", to_string(row.branch)},
                    {"dichotomy", row.dichotomy},
                    {"norm_growth_excess", row.norm_growth_excess},
                    {"blocks", blocks_json(row.blocks)},
                    {"ncf_blocks", blocks_json(row.ncf_blocks)},
                    {"blocks_match", row.blocks_match}});
    worst_growth = std::max(worst_growth, row.norm_growth_excess);
    if (!row.blocks.empty()) all_match = all_match && row.blocks_match;
  }
  out.result = {{"constants", constants_json(r.constants)},
                {"verdict", to_string(r.verdict.outcome)},
                {"limit_direction", r.verdict.limit_direction ? vec_json(*r.verdict.limit_direction) : Json(nullptr)},
                {"eta_est", r.eta_est},
                {"inconclusive", r.inconclusive},
                {"note", r.note},
                {"rows", rows},
                {"nonincreasing", r.nonincreasing},
                {"strictly_decreasing", r.strictly_decreasing}};
  const double last = r.rows.back().sup_dev;
  if (r.rows.size() > 1)
    out.checks.push_back(make_check("sup_dev_strictly_decreasing", r.strictly_decreasing ? 1.0 : 0.0, "==", 1.0));
  out.checks.push_back(make_check("sup_dev_smallest_delta", last, "<", c.param("max_final_sup_dev", 0.05)));
  out.checks.push_back(make_check("norm_growth_excess", worst_growth, "<=", c.param("norm_growth_tol", 1e-10)));
  out.metrics = {{"sup_dev", last}, {"T_bar", r.rows.back().T_bar}, {"norm_growth_excess", worst_growth},
                 {"blocks_match", all_match ? 1.0 : 0.0}};

  out.trajectory = r.ncf;
  out.trajectory_label = "NCF flow u(t) up to T_bar; loss column holds N(u)";
  if (m.blocks().size() > 1 && m.separable()) {
    out.angles = block_angle_plot(r.ncf, m, d, ncf_weights(c.loss, d.y()), all_blocks(m));
  } else {
    out.angles = state_angle_plot(r.ncf, "u");
  }
  out.ncf_runs.emplace_back("ncf_to_T_bar", std::move(r.ncf));
  return out;
}

RunResult run_toy(const RunConfig& c) {
  const auto pol = KinkPolicy::defaults(-1.0);
  RunResult out;
  const long st_steps = c.params.value("stationary_steps", 5000L);
  const auto st = toy_u1u2(pol, Vec{{1.0, 0.0}}, IntegratorConfig::fixed(1e-3, st_steps, 1000));
  const Vec hy0{{1.0, std::sinh(0.1)}};
  const auto hy = toy_u1u2(pol, hy0, IntegratorConfig::fixed_until(c.param("reference_step", 1e-5),
                                                                   c.param("reference_t_end", 0.1), 1000));
  Vec audit0{{-1.0, 0.5}};
  if (c.params.contains("audit_u0")) {
    const auto v = c.params["audit_u0"].get<std::vector<double>>();
    if (v.size() != 2) throw ConfigError("toy_u1u2: audit_u0 needs two entries");
    audit0 = Vec{{v[0], v[1]}};
  }
  const long audit_steps = c.params.value("audit_steps", 100000L);
  auto audit = toy_u1u2(pol, audit0,
                        IntegratorConfig::fixed(c.param("audit_step", 1e-7), audit_steps, 1000));

  const NCFProblem toy = toy_problem();
  const FlowRunner runner = [&](const Vec& u0) {
    return ncf_flow(toy, u0, IntegratorConfig::fixed(1e-3, 1000, 100), pol);
  };
  const auto probe = nonbranch_probe(runner, Vec{{1.0, 0.0}}, c.params.value("probe_perturbations", 4),
                                     c.param("probe_rho", 1e-9), c.seed);

  auto run_json = [](const ToyReport& r, const Vec& u0) {
    return Json{{"u0", vec_json(u0)},
                {"t_end", r.traj.back().t},
                {"steps", r.traj.accepted_steps()},
                {"final", vec_json(r.traj.final_w())},
                {"conservation_drift", r.conservation_drift},
                {"stationary", r.stationary},
                {"max_reference_error", r.max_reference_error},
                {"t_freeze", optional_json(r.t_freeze)}};
  };
  out.result = {{"stationary_run", run_json(st, Vec{{1.0, 0.0}})},
                {"hyperbolic_run", run_json(hy, hy0)},
                {"audit_run", run_json(audit, audit0)},
                {"nonbranch_probe",
                 {{"lambda_fit", probe.lambda_fit},
                  {"scale_ratio", probe.scale_ratio},
                  {"kink_riding", probe.kink_riding},
                  {"branching", probe.branching}}}};
  out.checks.push_back(make_check("stationary_from_e1", st.stationary ? 1.0 : 0.0, "==", 1.0));
  out.checks.push_back(make_check("hyperbolic_reference_error", hy.max_reference_error, "<=",
                                  c.param("reference_tol", 1e-6)));
  out.checks.push_back(make_check("conservation_drift", audit.conservation_drift, "<=",
                                  c.param("conservation_tol", 1e-8)));
  out.checks.push_back(make_check("branching_flagged_at_e1", probe.branching ? 1.0 : 0.0, "==", 1.0));
  out.metrics = {{"conservation_drift", audit.conservation_drift},
                 {"hyperbolic_reference_error", hy.max_reference_error},
                 {"scale_ratio", probe.scale_ratio}};

  out.angles = state_angle_plot(audit.traj, "u");
  out.ncf_runs.emplace_back("stationary", st.traj);
  out.ncf_runs.emplace_back("hyperbolic", hy.traj);
  out.trajectory = audit.traj;
  out.trajectory_label = "NCF flow of u1|u2| from the audit start; loss column holds N(u)";
  out.ncf_runs.emplace_back("audit", std::move(audit.traj));
  return out;
}

RunResult run_escape(const RunConfig& c) {
  RunResult out;
  std::vector<double> deltas{0.05, 0.01, 0.001};
  if (c.params.contains("deltas")) deltas = c.params["deltas"].get<std::vector<double>>();
  const double step = c.param("step", 1e-4);
  const double bound = c.param("bound", 0.09) - c.param("margin", 1e-3);
  Json rows = Json::array();
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    Trajectory traj = escape_g_flow(deltas[i], step, 50);
    const double dist = (traj.final_w() - Vec{{1.0, 0.0}}).norm();
    rows.push_back({{"delta", deltas[i]}, {"distance", dist}, {"final", vec_json(traj.final_w())},
                    {"loss_final", traj.back().loss}});
    worst = std::min(worst, dist);
    if (i == 0) {
      out.angles = state_angle_plot(traj, "u");
      out.trajectory = std::move(traj);
      out.trajectory_label = "descent on (u1|u2| - 1)^2 for the first delta";
    }
  }
  out.result = {{"step", step}, {"rows", rows}, {"bound", bound}};
  out.checks.push_back(make_check("min_distance_at_t_0.1", worst, ">=", bound));
  out.metrics = {{"min_distance", worst}};
  return out;
}

RunResult run_leaky(const RunConfig& c) {
  const auto& m = need_model(c);
  const auto& d = *c.dataset;
  RunResult out;
  const NCFProblem p(ncf_weights(c.loss, d.y()), m, d);
  NonbranchSetOptions o;
  o.integ = integ_or(c, o.integ);
  o.conservation_tol = c.param("conservation_tol", o.conservation_tol);
  o.gamma = c.param("gamma", 0.0);
  const double v_star = c.params.at("v_star");
  const auto us = c.params.at("u_star").get<std::vector<double>>();
  const Vec u_star = Eigen::Map<const Vec>(us.data(), static_cast<Index>(us.size()));
  std::vector<Vec> inits;
  for (const auto& row : c.params.at("inits")) {
    const auto v = row.get<std::vector<double>>();
    inits.push_back(Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size())));
  }
  NonbranchSetReport r;
  try {
    r = leaky_nonbranch_set(p, v_star, u_star, inits, o);
  } catch (const StructuralError& e) {
    throw ConfigError(e.what());
  }
  const auto reduction = kkt_reduce_two_layer(v_star, u_star, p);

  Json inits_json = Json::array();
  int in_s = 0;
  for (const auto& i : r.inits) {
    inits_json.push_back({{"w0", vec_json(i.w0)},
                          {"in_S", i.in_S},
                          {"drift", i.drift},
                          {"continuous_drift", i.continuous_drift},
                          {"signs_preserved", i.signs_preserved},
                          {"first_flip_t", optional_json(i.first_flip_t)}});
    in_s += i.in_S ? 1 : 0;
  }
  double worst_drift = 0.0;
  for (const auto& i : r.inits)
    if (i.in_S) worst_drift = std::max(worst_drift, i.drift);
  out.result = {{"eta1", r.eta1},
                {"eta2", r.eta2},
                {"gamma", r.gamma},
                {"star_residual", r.star.residual},
                {"star_objective", r.star.objective},
                {"lipschitz", r.lipschitz},
                {"inits", inits_json},
                {"max_pair_ratio", r.max_pair_ratio},
                {"reduction",
                 {{"abs_v_deviation", reduction.abs_v_deviation},
                  {"norm_u_deviation", reduction.norm_u_deviation},
                  {"reduced_residual", reduction.reduced_residual},
                  {"passes", reduction.passes}}}};
  out.checks.push_back(make_check("inits_in_S", in_s, ">=", 1.0));
  out.checks.push_back(make_check("conservation_drift", worst_drift, "<=", o.conservation_tol));
  out.checks.push_back(make_check("signs_preserved", r.signs_ok ? 1.0 : 0.0, "==", 1.0));
  out.checks.push_back(make_check("max_pair_ratio", r.max_pair_ratio, "<=", 1.0 + 1e-9));
  out.checks.push_back(make_check("star_abs_v_deviation", reduction.abs_v_deviation, "<=", 1e-10));
  out.metrics = {{"conservation_drift", worst_drift}, {"max_pair_ratio", r.max_pair_ratio}};

  out.angles = state_angle_plot(r.first, "u");
  out.trajectory = r.first;
  out.trajectory_label = "NCF flow of the first init; loss column holds N(w)";
  out.ncf_runs.emplace_back("first_init", std::move(r.first));
  return out;
}

RunResult run_stability(const RunConfig& c) {
  const auto& m = need_model(c);
  const auto& d = *c.dataset;
  RunResult out;
  const NCFProblem p(ncf_weights(c.loss, d.y()), m, d);
  const auto u = c.params.at("u0").get<std::vector<double>>();
  const Vec u0 = Eigen::Map<const Vec>(u.data(), static_cast<Index>(u.size()));
  if (u0.size() != m.param_dim()) throw ConfigError("stability: u0 has the wrong length");
  std::vector<double> levels{1e-2, 1e-3, 1e-4};
  if (c.params.contains("levels")) levels = c.params["levels"].get<std::vector<double>>();
  const double T = c.param("T", 1.0);
  const double step = c.has_integ ? c.integ.step : 1e-3;
  const auto sw = perturbation_sweep(p, u0, levels, T, step, c.kink_policy(), c.seed);
  Json rows = Json::array();
  for (std::size_t i = 0; i < sw.levels.size(); ++i) rows.push_back({{"delta_f", sw.levels[i]}, {"sup_dev", sw.deviations[i]}});
  out.result = {{"rows", rows}, {"decreasing", sw.decreasing}, {"lipschitz", sw.lipschitz}, {"T", T}};
  if (sw.levels.size() > 1) out.checks.push_back(make_check("sup_dev_decreasing", sw.decreasing ? 1.0 : 0.0, "==", 1.0));
  out.metrics = {{"sup_dev", sw.deviations.front()}, {"lipschitz", sw.lipschitz}};
  Trajectory base = ncf_flow(p, u0, IntegratorConfig::fixed_until(step, T, 10), c.kink_policy());
  out.angles = m.param_dim() == 2 ? state_angle_plot(base, "u") : AnglePlot{};
  out.trajectory = base;
  out.trajectory_label = "unforced NCF flow; loss column holds N(u)";
  out.ncf_runs.emplace_back("unforced", std::move(base));
  return out;
}

}  // namespace

Check make_check(std::string name, double value, std::string relation, double threshold) {
  Check c{std::move(name), false, value, std::move(relation), threshold};
  if (c.relation == "<") c.passed = value < threshold;
  else if (c.relation == "<=") c.passed = value <= threshold;
  else if (c.relation == ">") c.passed = value > threshold;
  else if (c.relation == ">=") c.passed = value >= threshold;
  else if (c.relation == "==") c.passed = value == threshold;
  else throw std::logic_error("make_check: unknown relation " + c.relation);
  if (std::isnan(value)) c.passed = false;
  return c;
}

bool RunResult::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

MonotoneAudit monotone_audit(const Trajectory& traj) {
  MonotoneAudit a;
  for (std::size_t i = 1; i < traj.records.size(); ++i) {
    const auto& p = traj.records[i - 1];
    const auto& r = traj.records[i];
    a.worst_drop = std::max(a.worst_drop, (p.loss - r.loss) / std::max(1.0, std::abs(p.loss)));
    if (p.norm > 0.0 && r.norm > 0.0) {
      const double qp = p.loss / (p.norm * p.norm);
      const double qr = r.loss / (r.norm * r.norm);
      a.worst_quotient_drop = std::max(a.worst_quotient_drop, (qp - qr) / std::max(1.0, std::abs(qp)));
    }
    ++a.steps;
  }
  return a;
}

Vec preset_init(Index dim, std::uint64_t seed, double scale) {
  CounterRng rng(seed, 1);
  return rng.normal_vector(dim, scale);
}

RunResult run_experiment(const RunConfig& c) {
  RunResult out;
  const std::string& e = c.experiment;
  if (e == "fig1") out = run_fig1(c);
  else if (e == "fig3") out = run_fig3(c);
  else if (e == "saddle") out = run_saddle(c);
  else if (e == "thm1") out = run_thm1(c);
  else if (e == "toy_u1u2") out = run_toy(c);
  else if (e == "escape_g") out = run_escape(c);
  else if (e == "leaky_nonbranch") out = run_leaky(c);
  else if (e == "stability") out = run_stability(c);
  else throw ConfigError("experiment '" + e + "' is not runnable with `run`; use the kkt command");

  const double tol = c.param("monotone_tol", 1e-12);
  Json audits = Json::object();
  for (const auto& [name, traj] : out.ncf_runs) {
    const MonotoneAudit a = monotone_audit(traj);
    audits[name] = {{"steps", a.steps}, {"worst_drop", a.worst_drop}, {"worst_quotient_drop", a.worst_quotient_drop}};
    out.checks.push_back(make_check("ncf_monotone[" + name + "]", a.worst_drop, "<=", tol));
    out.checks.push_back(make_check("ncf_quotient_monotone[" + name + "]", a.worst_quotient_drop, "<=", tol));
  }
  out.result["ncf_monotonicity"] = audits;
  return out;
}

}  // namespace ncf::app
