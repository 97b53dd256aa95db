#include "ncf/app/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

#include <fmt/format.h>

#include "ncf/app/output.hpp"
#include "ncf/experiments.hpp"
#include "ncf/parallel.hpp"

namespace ncf::app {

namespace {

constexpr const char* kToolVersion = "0.1.0";

Json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Json kkt_json(const KKTReport& r) {
  return {{"u", vec_json(r.u)},
          {"objective", r.objective},
          {"lambda", r.lambda},
          {"residual", r.residual},
          {"policy_residual", r.policy_residual},
          {"nonneg", r.nonneg},
          {"scanned", r.scanned},
          {"scan_note", r.scan_note}};
}

Json checks_json(const std::vector<Check>& checks) {
  Json out = Json::array();
  for (const auto& c : checks)
    out.push_back({{"name", c.name},
                   {"passed", c.passed},
                   {"value", c.value},
                   {"relation", c.relation},
                   {"threshold", c.threshold}});
  return out;
}

std::string hex16(std::uint64_t h) { return fmt::format("{:016x}", h); }

std::string failed_text(const RunOutcome& o) {
  if (!o.result) return o.error + "\n";
  std::string s;
  for (const auto& c : o.result->checks)
    if (!c.passed) s += fmt::format("{}: {:.17g} {} {:.17g} does not hold\n", c.name, c.value, c.relation, c.threshold);
  return s;
}

}  // namespace

RunOutcome execute(const RunConfig& config) {
  RunOutcome o;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    o.result = run_experiment(config);
    o.code = o.result->passed() ? kExitOk : kExitAssertion;
  } catch (const ConfigError& e) {
    o.code = kExitConfig;
    o.error = std::string("config error: ") + e.what();
  } catch (const DegenerateDataError& e) {
    o.code = kExitDegenerate;
    o.error = std::string("degenerate data: ") + e.what();
  } catch (const std::exception& e) {
    o.code = kExitAssertion;
    o.error = std::string("runtime error: ") + e.what();
  }
  o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return o;
}

std::filesystem::path output_dir(const RunConfig& config, const CommandOptions& options) {
  if (options.out) return *options.out;
  if (config.output_dir && !config.output_dir->empty()) return *config.output_dir;
  return std::filesystem::path("out") / (config.name + "-" + config.hash8());
}

void write_outputs(const std::filesystem::path& dir, const RunConfig& config, const RunOutcome& outcome,
                   bool timestamp) {
  std::filesystem::create_directories(dir);
  std::filesystem::remove(dir / "FAILED");
  Json report = {{"tool", {{"name", "ncf-flow"}, {"version", kToolVersion}}},
                 {"experiment", config.experiment},
                 {"preset", config.name},
                 {"config", config.raw},
                 {"config_hash", hex16(config.hash())},
                 {"seed", config.seed},
                 {"exit_code", outcome.code},
                 {"runtime_seconds", outcome.seconds}};
  if (timestamp) report["generated_at"] = utc_timestamp();
  if (outcome.result) {
    const RunResult& r = *outcome.result;
    report["status"] = r.passed() ? "passed" : "failed";
    report["checks"] = checks_json(r.checks);
    Json metrics = Json::object();
    for (const auto& [k, v] : r.metrics) metrics[k] = v;
    report["metrics"] = metrics;
    report["result"] = r.result;
    Json notes = Json::object();
    for (const auto& [k, v] : r.trajectory.meta.notes) notes[k] = v;
    report["trajectory"] = {{"description", r.trajectory_label},
                            {"accepted_steps", r.trajectory.accepted_steps()},
                            {"snapshots", r.trajectory.snapshot_indices().size()},
                            {"model_hash", hex16(r.trajectory.meta.model_hash)},
                            {"notes", notes}};
    write_text(dir / "report.json", report.dump(2) + "\n");
    write_text(dir / "trajectory.csv", trajectory_csv(r.trajectory));
    const std::string title = config.name;
    write_text(dir / "loss_norm.svg", loss_norm_svg(r.trajectory, title, timestamp));
    write_text(dir / "angles_ncf.svg", angles_ncf_svg(r.angles, title, timestamp));
  } else {
    report["status"] = "error";
    report["error"] = outcome.error;
    write_text(dir / "report.json", report.dump(2) + "\n");
  }
  if (outcome.code != kExitOk) write_text(dir / "FAILED", failed_text(outcome));
}

int cmd_run(const std::filesystem::path& path, const CommandOptions& options, std::ostream& log) {
  RunConfig config;
  try {
    config = load_config(path, options.seed);
    if (config.raw.contains("sweep")) throw ConfigError("config has a sweep block; use the sweep command");
    if (config.experiment == "kkt") throw ConfigError("kkt configs are handled by the kkt command");
  } catch (const ConfigError& e) {
    log << "ncf-flow: " << e.what() << "\n";
    return kExitConfig;
  }
  const auto dir = output_dir(config, options);
  const RunOutcome outcome = execute(config);
  try {
    write_outputs(dir, config, outcome, options.timestamp);
  } catch (const std::exception& e) {
    log << "ncf-flow: " << e.what() << "\n";
    return kExitAssertion;
  }
  if (outcome.result) {
    for (const auto& c : outcome.result->checks)
      log << (c.passed ? "  ok   " : "  FAIL ") << c.name << fmt::format(" = {:.6g} ({} {:.6g})\n", c.value, c.relation, c.threshold);
  } else {
    log << "ncf-flow: " << outcome.error << "\n";
  }
  log << fmt::format("{} -> {} [exit {}, {:.2f} s]\n", config.name, dir.string(), outcome.code, outcome.seconds);
  return outcome.code;
}

int cmd_kkt(const std::filesystem::path& path, const CommandOptions& options, std::ostream& out,
            std::ostream& err) {
  try {
    const RunConfig c = load_config(path, options.seed);
    if (c.experiment != "kkt") throw ConfigError("the kkt command needs experiment \"kkt\"");
    const Dataset& data = *c.dataset;
    Json report;
    if (options.oracle == "sym-sqrelu") {
      const auto o = analytic_kkt_sym_sqrelu(data, c.model ? c.model->alpha() : 0.0);
      Json pts = Json::array();
      for (const auto& p : o.points) pts.push_back(kkt_json(p));
      Json M = Json::array();
      for (Index i = 0; i < o.M.rows(); ++i) M.push_back(vec_json(o.M.row(i).transpose()));
      report = {{"oracle", "sym-sqrelu"},
                {"M", M},
                {"eigenvalues", vec_json(o.eigenvalues)},
                {"degenerate_spectrum", o.degenerate_spectrum},
                {"points", pts}};
    } else if (options.oracle == "sym-relu") {
      const auto o = analytic_kkt_sym_relu(data, c.model ? c.model->alpha() : 0.0);
      Json pts = Json::array();
      for (const auto& p : o.points) pts.push_back(kkt_json(p));
      report = {{"oracle", "sym-relu"}, {"q", vec_json(o.zero_family.q)}, {"points", pts}};
    } else if (!options.oracle.empty()) {
      throw ConfigError("unknown oracle '" + options.oracle + "'");
    } else {
      if (!c.model) throw ConfigError("kkt: a model is needed unless --oracle is given");
      const Vec z = c.params.value("z", "labels") == "ncf" ? ncf_weights(c.loss, data.y()) : data.y();
      const NCFProblem p(z, *c.model, data);
      const KKTOptions ko{c.params.value("scan", true), 1e-6};
      report = Json::object();
      if (c.params.contains("candidate")) {
        const auto v = c.params["candidate"].get<std::vector<double>>();
        if (static_cast<Index>(v.size()) != c.model->param_dim())
          throw ConfigError("kkt: candidate has the wrong length");
        const Vec u = Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size()));
        report["candidate"] = kkt_json(kkt_residual(p, u, c.kink_policy(), ko));
      }
      if (c.params.value("theta_grid", false)) {
        if (c.model->param_dim() != 2) throw ConfigError("kkt: theta_grid needs two-dimensional weights");
        const ThetaGridResult g = theta_grid_kkt(p);
        Json pts = Json::array();
        for (double a : g.angles) {
          Json r = kkt_json(kkt_residual(p, Vec{{std::cos(a), std::sin(a)}}, c.kink_policy(), ko));
          r["theta_deg"] = a / kDegree;
          pts.push_back(r);
        }
        Json flat = Json::array();
        for (const auto& [a, b] : g.flat) flat.push_back({a / kDegree, b / kDegree});
        report["theta_grid"] = {{"points", pts}, {"flat_arcs_deg", flat}};
      }
      if (report.empty()) throw ConfigError("kkt: give params.candidate, params.theta_grid or --oracle");
    }
    out << report.dump(2) << "\n";
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "ncf-flow: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DegenerateDataError& e) {
    err << "ncf-flow: degenerate data: " << e.what() << "\n";
    return kExitDegenerate;
  } catch (const DomainError& e) {
    err << "ncf-flow: " << e.what() << "\n";
    return kExitConfig;
  } catch (const StructuralError& e) {
    err << "ncf-flow: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "ncf-flow: runtime error: " << e.what() << "\n";
    return kExitAssertion;
  }
}

namespace {

struct SweepPoint {
  double value = 0.0;
  RunConfig config;
};

/// The point document: the base config without its sweep block, with one value applied.
Json point_doc(const Json& base, const std::string& axis, double value) {
  Json doc = base;
  doc.erase("sweep");
  const std::string e = doc.at("experiment");
  Json& params = doc["params"];
  if (!params.is_object()) params = Json::object();
  if (axis == "seed") {
    if (value < 0.0 || value != std::floor(value) || value > 9007199254740992.0)
      throw ConfigError("sweep: seed values must be nonnegative integers");
    doc["seed"] = static_cast<std::uint64_t>(value);
    if (params.empty()) doc.erase("params");
  } else if (axis == "delta") {
    if (e == "thm1") {
      params["deltas"] = Json::array({value});
      // The sweep asserts the trend across points instead of a per-point bound.
      params.erase("max_final_sup_dev");
    } else if (e == "fig1" || e == "saddle") {
      params["init_std"] = value;
    } else if (e == "fig3") {
      params["delta"] = value;
    } else {
      throw ConfigError("sweep: axis delta does not apply to " + e);
    }
  } else {
    if (e != "stability") throw ConfigError("sweep: axis forcing applies to stability runs only");
    params["levels"] = Json::array({value});
  }
  return doc;
}

}  // namespace

int cmd_sweep(const std::filesystem::path& path, const CommandOptions& options, std::ostream& log) {
  RunConfig base;
  std::string axis;
  std::vector<SweepPoint> points;
  try {
    base = load_config(path, options.seed);
    if (!base.raw.contains("sweep")) throw ConfigError("sweep: config has no sweep block");
    axis = base.raw["sweep"].at("axis");
    std::vector<double> values = base.raw["sweep"].at("values").get<std::vector<double>>();
    if (values.empty()) throw ConfigError("sweep: empty value list");
    if (axis == "seed") std::sort(values.begin(), values.end());
    else std::sort(values.begin(), values.end(), std::greater<>());
    for (std::size_t i = 0; i < values.size(); ++i) {
      SweepPoint p;
      p.value = values[i];
      p.config = parse_config(point_doc(base.raw, axis, values[i]), fmt::format("{}-{:03}", base.name, i),
                              base.base_dir);
      points.push_back(std::move(p));
    }
  } catch (const ConfigError& e) {
    log << "ncf-flow: " << e.what() << "\n";
    return kExitConfig;
  }

  const auto dir = output_dir(base, options);
  const auto outcomes =
      parallel_map<RunOutcome>(points.size(), [&](std::size_t i) { return execute(points[i].config); });

  std::vector<std::string> metric_names;
  for (const auto& o : outcomes) {
    if (!o.result) continue;
    for (const auto& [k, v] : o.result->metrics) metric_names.push_back(k);
    break;
  }
  std::string csv = "index,axis,value,status,exit_code,dir";
  for (const auto& m : metric_names) csv += "," + m;
  csv += "\n";
  int code = kExitOk;
  std::vector<double> sup_devs;
  try {
    for (std::size_t i = 0; i < points.size(); ++i) {
      const RunOutcome& o = outcomes[i];
      const std::string sub = fmt::format("point-{:03}", i);
      write_outputs(dir / sub, points[i].config, o, options.timestamp);
      const std::string status = o.code == kExitOk ? "passed" : (o.result ? "failed" : "error");
      csv += fmt::format("{},{},{:.17g},{},{},{}", i, axis, points[i].value, status, o.code, sub);
      for (const auto& m : metric_names) {
        csv += ",";
        if (!o.result) continue;
        for (const auto& [k, v] : o.result->metrics)
          if (k == m) csv += fmt::format("{:.17g}", v);
      }
      csv += "\n";
      if (o.code != kExitOk) code = kExitAssertion;
      if (o.result)
        for (const auto& [k, v] : o.result->metrics)
          if (k == "sup_dev") sup_devs.push_back(v);
    }
    write_text(dir / "summary.csv", csv);
  } catch (const std::exception& e) {
    log << "ncf-flow: " << e.what() << "\n";
    return kExitAssertion;
  }

  Json sweep = {{"axis", axis}, {"points", points.size()}};
  if (axis == "delta" && base.experiment == "thm1") {
    bool monotone = sup_devs.size() == points.size();
    for (std::size_t i = 1; monotone && i < sup_devs.size(); ++i) monotone = sup_devs[i] <= sup_devs[i - 1];
    sweep["sup_dev_nonincreasing"] = monotone;
    log << (monotone ? "  ok   " : "  FAIL ") << "sup_dev nonincreasing across the delta sweep\n";
    if (!monotone) code = kExitAssertion;
  }
  sweep["exit_code"] = code;
  write_text(dir / "sweep.json", sweep.dump(2) + "\n");
  for (std::size_t i = 0; i < points.size(); ++i)
    log << fmt::format("  point {:03} {} = {:.6g}: exit {}\n", i, axis, points[i].value, outcomes[i].code);
  log << fmt::format("{} sweep -> {} [exit {}]\n", base.name, dir.string(), code);
  return code;
}

}  // namespace ncf::app
