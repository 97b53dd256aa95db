#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "ncf/app/runner.hpp"

namespace ncf::app {

enum ExitCode : int { kExitOk = 0, kExitAssertion = 2, kExitConfig = 3, kExitDegenerate = 4 };

struct CommandOptions {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  bool timestamp = true;
  std::string oracle;  // kkt only: "", "sym-sqrelu" or "sym-relu"
};

/// Result of one experiment execution, before anything is written.
struct RunOutcome {
  int code = kExitOk;
  std::optional<RunResult> result;
  std::string error;
  double seconds = 0.0;
};

RunOutcome execute(const RunConfig& config);

/// Writes report.json, trajectory.csv and both plots into `dir`, plus a FAILED
/// marker when the outcome is not ok.
void write_outputs(const std::filesystem::path& dir, const RunConfig& config, const RunOutcome& outcome,
                   bool timestamp);

/// out/<name>-<hash8> unless the config or the command line names a directory.
std::filesystem::path output_dir(const RunConfig& config, const CommandOptions& options);

int cmd_run(const std::filesystem::path& config, const CommandOptions& options, std::ostream& log);
int cmd_kkt(const std::filesystem::path& config, const CommandOptions& options, std::ostream& out,
            std::ostream& err);
int cmd_sweep(const std::filesystem::path& config, const CommandOptions& options, std::ostream& log);

}  // namespace ncf::app
