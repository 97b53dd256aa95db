#pragma once

#include <filesystem>
#include <string>

#include "ncf/app/runner.hpp"

namespace ncf::app {

/// Column names of trajectory.csv for a trajectory with `blocks` blocks.
std::string trajectory_csv_header(std::size_t blocks);

/// Snapshot records only, %.17g, LF line endings.
std::string trajectory_csv(const Trajectory& traj);

/// Loss and norm against step, two stacked panels.
std::string loss_norm_svg(const Trajectory& traj, const std::string& title, bool timestamp);

/// Angle strip against step with the N(theta) curve on a side panel.
std::string angles_ncf_svg(const AnglePlot& plot, const std::string& title, bool timestamp);

/// ISO-8601 UTC time of the call.
std::string utc_timestamp();

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace ncf::app
