#include "ncf/integrator.hpp"

#include <algorithm>
#include <cmath>

namespace ncf {

void IntegratorConfig::validate() const {
  require_domain(step > 0.0 && std::isfinite(step), "integrator: step must be positive");
  require_domain(record_every >= 1, "integrator: record_every must be >= 1");
  require_domain(t_end.has_value() || n_steps.has_value(), "integrator: need t_end or n_steps");
  if (n_steps) require_domain(*n_steps >= 0, "integrator: n_steps must be nonnegative");
  if (t_end) require_domain(*t_end >= 0.0 && std::isfinite(*t_end), "integrator: t_end must be finite");
  require_domain(min_step > 0.0 && min_step <= step, "integrator: need 0 < min_step <= step");
  require_domain(max_step == 0.0 || max_step >= step, "integrator: max_step must be >= step");
  require_domain(growth_after >= 1, "integrator: growth_after must be >= 1");
  require_domain(guard_tol >= 0.0, "integrator: guard_tol must be nonnegative");
}

IntegratorConfig IntegratorConfig::fixed(double step, long n_steps, int record_every) {
  IntegratorConfig c;
  c.step = step;
  c.n_steps = n_steps;
  c.record_every = record_every;
  return c;
}

IntegratorConfig IntegratorConfig::fixed_until(double step, double t_end, int record_every) {
  IntegratorConfig c;
  c.step = step;
  c.t_end = t_end;
  c.record_every = record_every;
  return c;
}

std::vector<std::size_t> Trajectory::snapshot_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].w) out.push_back(i);
  return out;
}

namespace {

Record make_record(const FlowSystem& sys, const std::vector<Vec>& refs, double t, long step,
                   const Vec& w, bool snapshot) {
  Record r;
  r.t = t;
  r.step = step;
  r.loss = sys.objective(w);
  r.norm = w.norm();
  const auto nb = static_cast<Index>(sys.blocks.size());
  r.block_norms.resize(nb);
  r.block_cos.resize(nb);
  for (Index b = 0; b < nb; ++b) {
    const auto [off, len] = sys.blocks[static_cast<std::size_t>(b)];
    const auto seg = w.segment(off, len);
    const double n = seg.norm();
    const double rn = refs[static_cast<std::size_t>(b)].norm();
    r.block_norms[b] = n;
    r.block_cos[b] = (n > 0.0 && rn > 0.0) ? seg.dot(refs[static_cast<std::size_t>(b)]) / (n * rn) : 0.0;
  }
  r.kink = sys.near_kink ? sys.near_kink(w) : false;
  if (snapshot) r.w = w;
  return r;
}

}  // namespace

Trajectory integrate(const FlowSystem& sys, const Vec& w0, const IntegratorConfig& config,
                     const StepObserver& observer) {
  config.validate();
  require_domain(w0.allFinite(), "integrate: initial state must be finite");

  std::vector<Vec> refs = sys.reference_dirs;
  if (refs.empty())
    for (const auto& [off, len] : sys.blocks) refs.push_back(w0.segment(off, len));
  require_structure(refs.size() == sys.blocks.size(), "integrate: one reference direction per block");

  Trajectory traj;
  traj.meta.seed = config.seed;
  traj.records.push_back(make_record(sys, refs, 0.0, 0, w0, true));
  if (observer) observer(0, 0.0, w0);

  const bool adaptive = config.scheme == Scheme::AdaptiveEuler;
  const double max_step = config.max_step > 0.0 ? config.max_step : 64.0 * config.step;
  const long fixed_steps =
      config.n_steps ? *config.n_steps : std::lround(*config.t_end / config.step);
  const double t_end = config.n_steps ? static_cast<double>(*config.n_steps) * config.step : *config.t_end;

  Vec w = w0;
  double t = 0.0;
  double h = config.step;
  double obj = traj.records.back().loss;
  int clean = 0;
  long k = 0;

  auto finished = [&] {
    if (!adaptive) return k >= fixed_steps;
    if (config.n_steps) return k >= *config.n_steps;
    return t >= t_end * (1.0 - 1e-15) || t_end - t < 1e-15;
  };

  while (!finished()) {
    double step = h;
    if (adaptive && !config.n_steps) step = std::min(step, t_end - t);
    const Vec v = sys.velocity(t, w);
    Vec next = w + step * v;
    if (!next.allFinite()) {
      traj.records.back().w = w;
      throw DivergenceError("integrate: non-finite state at step " + std::to_string(k + 1), std::move(traj));
    }
    double next_obj = sys.objective(next);
    if (adaptive) {
      const double tol = config.guard_tol * std::max(1.0, std::abs(obj));
      while (sys.monotone_sign * (next_obj - obj) < -tol) {
        h *= 0.5;
        step = h;
        if (h < config.min_step) {
          traj.records.back().w = w;
          throw StiffnessError("integrate: step collapsed below min_step at t=" + std::to_string(t),
                               std::move(traj));
        }
        next = w + step * v;
        next_obj = sys.objective(next);
        clean = 0;
      }
      if (++clean >= config.growth_after) {
        h = std::min(2.0 * h, max_step);
        clean = 0;
      }
    }
    ++k;
    t = adaptive ? t + step : static_cast<double>(k) * config.step;
    w = std::move(next);
    obj = next_obj;
    const bool snap = (k % config.record_every) == 0;
    traj.records.push_back(make_record(sys, refs, t, k, w, snap));
    if (observer) observer(k, t, w);
  }
  if (!traj.records.back().w) traj.records.back().w = w;
  return traj;
}

}  // namespace ncf
