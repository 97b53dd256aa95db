#include "ncf/app/config.hpp"

#include <fstream>
#include <sstream>

#include <rapidjson/document.h>
#include <rapidjson/error/en.h>
#include <rapidjson/schema.h>
#include <rapidjson/stringbuffer.h>

#include "ncf/app/schema_text.hpp"
#include "ncf/datasets.hpp"

namespace ncf::app {

namespace {

std::string pointer_string(const rapidjson::Pointer& p) {
  rapidjson::StringBuffer sb;
  p.StringifyUriFragment(sb);
  return sb.GetString();
}

const rapidjson::SchemaDocument& schema_document() {
  static const rapidjson::SchemaDocument doc = [] {
    rapidjson::Document d;
    d.Parse(detail::kConfigSchema);
    if (d.HasParseError()) throw std::logic_error("embedded config schema does not parse");
    return rapidjson::SchemaDocument(d);
  }();
  return doc;
}

Mat rows_to_matrix(const Json& rows) {
  const std::size_t n = rows.size();
  const std::size_t d = rows.at(0).size();
  Mat X(static_cast<Index>(d), static_cast<Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != d) throw ConfigError("dataset.X: rows have different lengths");
    for (std::size_t j = 0; j < d; ++j) X(static_cast<Index>(j), static_cast<Index>(i)) = rows[i][j].get<double>();
  }
  return X;
}

Dataset apply_mirror(const Dataset& data, const std::string& mode) {
  if (mode == "none") return data;
  Mat X(data.d(), 2 * data.n());
  X << data.X(), -data.X();
  Vec y(2 * data.n());
  y << data.y(), (mode == "odd" ? -1.0 : 1.0) * data.y();
  return Dataset(X, y);
}

Dataset build_dataset(const Json& spec, std::uint64_t seed, const std::filesystem::path& base_dir) {
  const std::string kind = spec.at("kind");
  if (kind == "circle") return uniform_circle_dataset(spec.value("n", 50));
  if (kind == "random_circle") return random_circle_dataset(spec.at("n").get<int>(), spec.value("seed", seed));
  if (kind == "inline") {
    const Json& y = spec.at("y");
    if (y.size() != spec.at("X").size()) throw ConfigError("dataset: X and y have different lengths");
    Vec yv(static_cast<Index>(y.size()));
    for (std::size_t i = 0; i < y.size(); ++i) yv[static_cast<Index>(i)] = y[i].get<double>();
    return apply_mirror(Dataset(rows_to_matrix(spec.at("X")), yv), spec.value("mirror", "none"));
  }
  std::filesystem::path path = spec.at("path").get<std::string>();
  if (path.is_relative()) path = base_dir / path;
  return apply_mirror(read_dataset_csv(path), spec.value("mirror", "none"));
}

NetworkModel build_model(const Json& spec) {
  const std::string kind = spec.at("kind");
  const Index d = spec.at("input_dim").get<Index>();
  if (kind == "squared_relu") {
    const int k = spec.at("neurons");
    std::vector<int> signs(static_cast<std::size_t>(k), 1);
    if (spec.contains("signs")) {
      signs = spec.at("signs").get<std::vector<int>>();
      if (signs.size() != static_cast<std::size_t>(k)) throw ConfigError("model.signs: need one sign per neuron");
    }
    return NetworkModel::squared_relu(signs, d, spec.value("alpha", 0.0));
  }
  if (kind == "two_layer") {
    return NetworkModel::two_layer_leaky_relu(spec.value("alpha", 0.0), spec.at("width").get<Index>(), d);
  }
  return NetworkModel::diagonal(d, spec.value("alpha", 1.0), spec.value("degree", 2));
}

IntegratorConfig build_integrator(const Json& spec) {
  IntegratorConfig c;
  c.scheme = spec.value("scheme", "fixed") == "adaptive" ? Scheme::AdaptiveEuler : Scheme::FixedEuler;
  c.step = spec.at("step");
  if (spec.contains("n_steps")) c.n_steps = spec.at("n_steps").get<long>();
  if (spec.contains("t_end")) c.t_end = spec.at("t_end").get<double>();
  c.record_every = spec.value("record_every", 1);
  c.min_step = spec.value("min_step", c.min_step);
  c.max_step = spec.value("max_step", c.max_step);
  c.growth_after = spec.value("growth_after", c.growth_after);
  c.guard_tol = spec.value("guard_tol", c.guard_tol);
  c.kink_tol = spec.value("kink_tol", c.kink_tol);
  return c;
}

}  // namespace

const char* config_schema() { return detail::kConfigSchema; }

void validate_schema(const Json& doc) {
  rapidjson::Document d;
  const std::string text = doc.dump();
  d.Parse(text.c_str());
  if (d.HasParseError()) throw ConfigError(std::string("config: ") + rapidjson::GetParseError_En(d.GetParseError()));
  rapidjson::SchemaValidator validator(schema_document());
  if (!d.Accept(validator)) {
    throw ConfigError("config violates schema: keyword '" + std::string(validator.GetInvalidSchemaKeyword()) +
                      "' at document " + pointer_string(validator.GetInvalidDocumentPointer()) + " (schema " +
                      pointer_string(validator.GetInvalidSchemaPointer()) + ")");
  }
}

std::uint64_t RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : raw.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string RunConfig::hash8() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
  return std::string(buf, 8);
}

KinkPolicy RunConfig::kink_policy() const {
  if (policy) return *policy;
  KinkPolicy p = KinkPolicy::defaults(model ? model->alpha() : 0.0);
  p.kink_tol = integ.kink_tol;
  return p;
}

double RunConfig::param(const char* key, double fallback) const {
  return params.contains(key) ? params.at(key).get<double>() : fallback;
}

RunConfig parse_config(Json doc, std::string name, const std::filesystem::path& base_dir) {
  validate_schema(doc);
  RunConfig c;
  c.name = std::move(name);
  c.base_dir = base_dir;
  c.experiment = doc.at("experiment");
  c.seed = doc.value("seed", std::uint64_t{0});
  c.params = doc.value("params", Json::object());
  if (doc.contains("output")) c.output_dir = doc["output"].value("dir", std::string());
  try {
    if (doc.contains("model")) c.model = build_model(doc["model"]);
    if (doc.contains("dataset")) c.dataset = build_dataset(doc["dataset"], c.seed, base_dir);
    if (c.model && c.dataset && c.model->input_dim() != c.dataset->d())
      throw ConfigError("model.input_dim does not match the dataset dimension");
    if (doc.contains("loss")) {
      const Json& l = doc["loss"];
      c.loss.kind = l.value("kind", "square") == "logistic" ? LossKind::Logistic : LossKind::Square;
      if (l.contains("scale")) {
        if (l["scale"].is_string()) {
          c.loss_is_mean = true;
          if (!c.dataset && c.experiment != "saddle")
            throw ConfigError("loss.scale = \"mean\" needs a dataset");
          c.loss.scale = c.dataset ? 1.0 / static_cast<double>(c.dataset->n()) : 0.0;
        } else {
          c.loss.scale = l["scale"].get<double>();
        }
      }
    }
    if (doc.contains("integrator")) {
      c.integ = build_integrator(doc["integrator"]);
      c.integ.seed = c.seed;
      c.integ.validate();
      c.has_integ = true;
    }
    if (doc.contains("policy")) {
      KinkPolicy p;
      p.relu_zero_value = doc["policy"].value("relu_zero_value", 0.0);
      p.kink_tol = c.integ.kink_tol;
      p.validate(c.model ? c.model->alpha() : 0.0);
      c.policy = p;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  c.raw = std::move(doc);
  return c;
}

RunConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config " + path.string() + " does not parse: " + e.what());
  }
  if (seed_override && doc.is_object()) doc["seed"] = *seed_override;
  return parse_config(std::move(doc), path.stem().string(), path.parent_path());
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("dataset " + path.string() + " is empty");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw ConfigError("dataset " + path.string() + ": bad number '" + cell + "'");
      }
    }
    if (row.size() < 2 || (!rows.empty() && row.size() != rows.front().size()))
      throw ConfigError("dataset " + path.string() + ": ragged or too short row");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ConfigError("dataset " + path.string() + " has no samples");
  const Index d = static_cast<Index>(rows.front().size()) - 1;
  Mat X(d, static_cast<Index>(rows.size()));
  Vec y(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Index j = 0; j < d; ++j) X(j, static_cast<Index>(i)) = rows[i][static_cast<std::size_t>(j)];
    y[static_cast<Index>(i)] = rows[i].back();
  }
  return Dataset(X, y);
}

}  // namespace ncf::app
