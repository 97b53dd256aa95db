#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ncf/app/config.hpp"
#include "ncf/integrator.hpp"

namespace ncf::app {

/// One pass/fail assertion of a run; `value relation threshold` must hold.
struct Check {
  std::string name;
  bool passed = false;
  double value = 0.0;
  std::string relation;
  double threshold = 0.0;
};

Check make_check(std::string name, double value, std::string relation, double threshold);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Angle strip with an optional N(theta) curve drawn against the same angle axis.
struct AnglePlot {
  std::string y_label = "angle (deg)";
  std::vector<Series> series;
  std::optional<Series> ncf_curve;  // x = N(theta), y = theta in degrees
  std::vector<double> kkt_angles;   // degrees
};

struct RunResult {
  Json result = Json::object();
  std::vector<Check> checks;
  std::vector<std::pair<std::string, double>> metrics;  // fixed order per experiment
  Trajectory trajectory;                                 // written to trajectory.csv
  std::string trajectory_label;
  AnglePlot angles;
  /// NCF trajectories covered by the monotonicity check (name, trajectory).
  std::vector<std::pair<std::string, Trajectory>> ncf_runs;

  bool passed() const;
};

/// Largest relative drop of N and N / |u|^2 between consecutive accepted steps,
/// each normalized by max(1, |N|).
struct MonotoneAudit {
  double worst_drop = 0.0;
  double worst_quotient_drop = 0.0;
  long steps = 0;
};
MonotoneAudit monotone_audit(const Trajectory& traj);

/// Runs the configured experiment. Library errors propagate.
RunResult run_experiment(const RunConfig& config);

/// Fixed initial direction shared by the figure presets: standard normal
/// entries from (seed, stream 1), times `scale`.
Vec preset_init(Index dim, std::uint64_t seed, double scale);

}  // namespace ncf::app
