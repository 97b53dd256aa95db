#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "ncf/flow.hpp"

namespace ncf::app {

using Json = nlohmann::json;

/// Invalid or inconsistent configuration; maps to exit code 3.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A validated run configuration with its model, data and solver settings built.
struct RunConfig {
  std::string name;  // preset name, from the file stem
  std::filesystem::path base_dir;
  Json raw;          // effective document (after overrides)
  std::string experiment;
  std::uint64_t seed = 0;
  std::optional<NetworkModel> model;
  std::optional<Dataset> dataset;
  Loss loss;
  bool loss_is_mean = false;
  IntegratorConfig integ;
  bool has_integ = false;
  std::optional<KinkPolicy> policy;  // unset: defaults for the model's alpha
  Json params = Json::object();
  std::optional<std::string> output_dir;

  /// FNV-1a of the canonical dump of `raw`.
  std::uint64_t hash() const;
  std::string hash8() const;
  KinkPolicy kink_policy() const;
  /// Numeric parameter with a default.
  double param(const char* key, double fallback) const;
};

/// The published JSON Schema for run configurations.
const char* config_schema();

/// Throws ConfigError listing the first schema violation.
void validate_schema(const Json& doc);

/// Validates and builds a configuration. `base_dir` resolves relative CSV paths.
RunConfig parse_config(Json doc, std::string name, const std::filesystem::path& base_dir);

/// Reads, applies the seed override, validates and builds.
RunConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = {});

/// Dataset from a CSV file with header x1,...,xd,y (one sample per row).
Dataset read_dataset_csv(const std::filesystem::path& path);

}  // namespace ncf::app
