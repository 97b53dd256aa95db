#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ncf/app/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Neural correlation flow experiments"};
  app.require_subcommand(1);
  ncf::app::CommandOptions options;
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool no_timestamp = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("config", config, "Run configuration (JSON)")->required();
    cmd->add_option("--out", out, "Output directory");
    cmd->add_option("--seed", seed, "Override the configured seed");
    cmd->add_flag("--no-timestamp", no_timestamp, "Omit timestamps from reports and plots");
  };
  CLI::App* run = app.add_subcommand("run", "Run one experiment");
  add_common(run);
  CLI::App* kkt = app.add_subcommand("kkt", "Print a KKT report as JSON");
  add_common(kkt);
  kkt->add_option("--oracle", options.oracle, "Analytic oracle")->check(CLI::IsMember({"sym-sqrelu", "sym-relu"}));
  CLI::App* sweep = app.add_subcommand("sweep", "Run a parameter sweep");
  add_common(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : ncf::app::kExitConfig;
  }
  if (!out.empty()) options.out = out;
  for (CLI::App* cmd : {run, kkt, sweep})
    if (cmd->parsed() && cmd->count("--seed")) options.seed = seed;
  options.timestamp = !no_timestamp;

  if (run->parsed()) return ncf::app::cmd_run(config, options, std::cerr);
  if (kkt->parsed()) return ncf::app::cmd_kkt(config, options, std::cout, std::cerr);
  return ncf::app::cmd_sweep(config, options, std::cerr);
}
