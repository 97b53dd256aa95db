#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "ncf/app/commands.hpp"
#include "ncf/app/output.hpp"

using namespace ncf;
using namespace ncf::app;
namespace fs = std::filesystem;

namespace {

const fs::path kPresets = fs::path(NCF_SOURCE_DIR) / "presets";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ncf_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_config(const std::string& name, const Json& doc) {
  const fs::path dir = fs::temp_directory_path() / ("ncf_cli_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const fs::path p = dir / (name + ".json");
  std::ofstream(p) << doc.dump(2);
  return p;
}

Json preset(const std::string& name) { return Json::parse(slurp(kPresets / (name + ".json"))); }

CommandOptions quiet(const fs::path& out) {
  CommandOptions o;
  o.out = out;
  o.timestamp = false;
  return o;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

}  // namespace

TEST_CASE("trajectory csv header is pinned") {
  CHECK(trajectory_csv_header(2) == "t,step,loss,norm_w,block_norm_0,block_norm_1,block_cos_0,block_cos_1,kink_flag");
  const std::string golden = slurp(fs::path(NCF_SOURCE_DIR) / "tests/golden/trajectory_header_20.txt");
  CHECK(trajectory_csv_header(20) + "\n" == golden);
  CHECK(trajectory_csv_header(0) == "t,step,loss,norm_w,kink_flag");
}

TEST_CASE("every shipped preset validates against the schema") {
  for (const auto& entry : fs::recursive_directory_iterator(kPresets)) {
    if (entry.path().extension() != ".json") continue;
    CAPTURE(entry.path().string());
    CHECK_NOTHROW(load_config(entry.path()));
  }
}

TEST_CASE("schema rejects malformed configs") {
  const Json good = preset("fig1");
  CHECK_NOTHROW(parse_config(good, "fig1", kPresets));

  auto rejects = [&](Json doc) { CHECK_THROWS_AS(parse_config(std::move(doc), "bad", kPresets), ConfigError); };
  Json j = good;
  j["colour"] = "blue";
  rejects(j);
  j = good;
  j["params"]["init_sd"] = 1e-5;
  rejects(j);
  j = good;
  j["integrator"]["step"] = -1.0;
  rejects(j);
  j = good;
  j["integrator"]["step"] = "small";
  rejects(j);
  j = good;
  j.erase("model");
  rejects(j);
  j = good;
  j["model"]["kind"] = "resnet";
  rejects(j);
  j = good;
  j["experiment"] = "fig2";
  rejects(j);
  j = good;
  j["loss"]["scale"] = "median";
  rejects(j);
  j = good;
  j["model"]["input_dim"] = 3;  // schema-valid, inconsistent with the 2-D circle
  rejects(j);
  j = good;
  j["model"]["signs"] = {1, -1};
  rejects(j);
  j = preset("toy_u1u2");
  j["model"] = good["model"];
  rejects(j);
  j = good;
  j["sweep"] = {{"axis", "seed"}, {"values", Json::array()}};
  rejects(j);
  CHECK_THROWS_AS(parse_config(Json::array(), "bad", kPresets), ConfigError);
}

TEST_CASE("config hash, seed override and defaults") {
  const RunConfig a = load_config(kPresets / "fig1.json");
  const RunConfig b = load_config(kPresets / "fig1.json", 7);
  CHECK(a.name == "fig1");
  CHECK(a.seed == 0);
  CHECK(b.seed == 7);
  CHECK(a.hash() != b.hash());
  CHECK(a.hash8().size() == 8);
  CHECK(a.loss.scale == doctest::Approx(1.0 / 50));
  CHECK(a.integ.n_steps == 50000);
  CHECK(output_dir(a, {}) == fs::path("out") / ("fig1-" + a.hash8()));
  CHECK(output_dir(a, quiet("/x")) == fs::path("/x"));
}

TEST_CASE("csv datasets") {
  const fs::path p = write_config("data_probe", Json::object()).parent_path() / "data.csv";
  std::ofstream(p) << "x1,x2,y\n1,0,5\n0,1,-4\n";
  Json doc = preset("stability");
  doc["dataset"] = {{"kind", "csv"}, {"path", "data.csv"}, {"mirror", "even"}};
  const RunConfig c = parse_config(doc, "csv", p.parent_path());
  REQUIRE(c.dataset);
  CHECK(c.dataset->n() == 4);
  CHECK(c.dataset->X()(0, 2) == -1.0);
  CHECK(c.dataset->y()[3] == -4.0);
  std::ofstream(p) << "x1,x2,y\n1,0\n";
  CHECK_THROWS_AS(parse_config(doc, "csv", p.parent_path()), ConfigError);
}

TEST_CASE("run writes the four artifacts and is deterministic") {
  const fs::path a = scratch("run_a");
  const fs::path b = scratch("run_b");
  std::ostringstream log;
  REQUIRE(cmd_run(kPresets / "escape_g.json", quiet(a), log) == kExitOk);
  REQUIRE(cmd_run(kPresets / "escape_g.json", quiet(b), log) == kExitOk);
  for (const char* f : {"report.json", "trajectory.csv", "loss_norm.svg", "angles_ncf.svg"}) CHECK(fs::exists(a / f));
  CHECK(!fs::exists(a / "FAILED"));
  CHECK(slurp(a / "trajectory.csv") == slurp(b / "trajectory.csv"));
  CHECK(slurp(a / "loss_norm.svg") == slurp(b / "loss_norm.svg"));
  CHECK(slurp(a / "angles_ncf.svg") == slurp(b / "angles_ncf.svg"));
  CHECK(first_line(slurp(a / "trajectory.csv")) == trajectory_csv_header(1));
  CHECK(slurp(a / "trajectory.csv").find('\r') == std::string::npos);

  const Json report = Json::parse(slurp(a / "report.json"));
  CHECK(report["status"] == "passed");
  CHECK(report["experiment"] == "escape_g");
  CHECK(!report.contains("generated_at"));
  CHECK(report["result"]["rows"].size() == 3);

  CommandOptions stamped = quiet(scratch("run_c"));
  stamped.timestamp = true;
  REQUIRE(cmd_run(kPresets / "escape_g.json", stamped, log) == kExitOk);
  CHECK(slurp(*stamped.out / "loss_norm.svg").find("<!-- generated ") != std::string::npos);
  CHECK(Json::parse(slurp(*stamped.out / "report.json")).contains("generated_at"));
}

TEST_CASE("run exit codes") {
  std::ostringstream log;
  Json bad = preset("escape_g");
  bad["params"]["unknown"] = 1;
  const fs::path none = scratch("config_error");
  CHECK(cmd_run(write_config("bad", bad), quiet(none), log) == kExitConfig);
  CHECK(!fs::exists(none));
  CHECK(cmd_run(kPresets / "does_not_exist.json", quiet(none), log) == kExitConfig);
  CHECK(!fs::exists(none));

  Json strict = preset("escape_g");
  strict["params"]["bound"] = 1.0;
  const fs::path failed = scratch("assertion");
  CHECK(cmd_run(write_config("strict", strict), quiet(failed), log) == kExitAssertion);
  CHECK(fs::exists(failed / "FAILED"));
  CHECK(fs::exists(failed / "trajectory.csv"));
  CHECK(slurp(failed / "FAILED").find("min_distance_at_t_0.1") != std::string::npos);
  CHECK(Json::parse(slurp(failed / "report.json"))["status"] == "failed");

  // A later passing run into the same directory clears the marker.
  CHECK(cmd_run(kPresets / "escape_g.json", quiet(failed), log) == kExitOk);
  CHECK(!fs::exists(failed / "FAILED"));

  CHECK(cmd_run(kPresets / "kkt/sym_relu_e1.json", quiet(scratch("kkt_run")), log) == kExitConfig);
  CHECK(cmd_run(kPresets / "sweeps/stability_forcing.json", quiet(scratch("sweep_run")), log) == kExitConfig);
}

TEST_CASE("degenerate data exits 4 from run") {
  Json doc = preset("thm1_sweep");
  doc["dataset"] = {{"kind", "inline"}, {"X", {{1.0, 0.0}, {0.0, 1.0}}}, {"y", {0.0, 0.0}}};
  doc["model"]["neurons"] = 1;
  const fs::path out = scratch("degenerate");
  std::ostringstream log;
  CHECK(cmd_run(write_config("degenerate", doc), quiet(out), log) == kExitDegenerate);
  CHECK(fs::exists(out / "FAILED"));
}

TEST_CASE("kkt command") {
  std::ostringstream out, err;
  REQUIRE(cmd_kkt(kPresets / "kkt/negative_preactivation.json", quiet("/unused"), out, err) == kExitOk);
  Json r = Json::parse(out.str());
  CHECK(r["candidate"]["residual"] == 0.0);
  CHECK(r["candidate"]["objective"] == 0.0);

  out.str("");
  CommandOptions relu = quiet("/unused");
  relu.oracle = "sym-relu";
  REQUIRE(cmd_kkt(kPresets / "kkt/sym_relu_e1.json", relu, out, err) == kExitOk);
  r = Json::parse(out.str());
  const double s = 1.0 / std::sqrt(2.0);
  REQUIRE(r["points"].size() == 4);
  for (const auto& p : r["points"]) {
    CHECK(std::abs(p["u"][0].get<double>()) == doctest::Approx(s).epsilon(1e-15));
    CHECK(std::abs(p["u"][1].get<double>()) == doctest::Approx(s).epsilon(1e-15));
    CHECK(p["u"][2].get<double>() == 0.0);
    CHECK(p["residual"].get<double>() <= 1e-8);
  }

  out.str("");
  CommandOptions sq = quiet("/unused");
  sq.oracle = "sym-sqrelu";
  REQUIRE(cmd_kkt(kPresets / "kkt/sym_sqrelu.json", sq, out, err) == kExitOk);
  r = Json::parse(out.str());
  CHECK(r["eigenvalues"].size() == 2);
  for (const auto& p : r["points"]) CHECK(p["residual"].get<double>() <= 1e-8);

  out.str("");
  REQUIRE(cmd_kkt(kPresets / "kkt/fig3_theta_grid.json", quiet("/unused"), out, err) == kExitOk);
  r = Json::parse(out.str());
  REQUIRE(!r["theta_grid"]["points"].empty());
  for (const auto& p : r["theta_grid"]["points"]) CHECK(p["residual"].get<double>() <= 1e-8);

  Json zero = preset("kkt/sym_relu_e1");
  zero["dataset"] = {{"kind", "inline"}, {"X", {{1.0, 0.0}, {1.0, 0.0}}}, {"y", {1.0, -1.0}}, {"mirror", "odd"}};
  err.str("");
  CHECK(cmd_kkt(write_config("zero_q", zero), relu, out, err) == kExitDegenerate);
  CHECK(err.str().find("degenerate") != std::string::npos);

  Json mixed = preset("kkt/sym_sqrelu");
  mixed["dataset"]["mirror"] = "none";
  CHECK(cmd_kkt(write_config("unmirrored", mixed), sq, out, err) == kExitConfig);
  CHECK(cmd_kkt(kPresets / "escape_g.json", quiet("/unused"), out, err) == kExitConfig);
}

TEST_CASE("sweep command") {
  std::ostringstream log;
  const fs::path out = scratch("sweep_forcing");
  REQUIRE(cmd_sweep(kPresets / "sweeps/stability_forcing.json", quiet(out), log) == kExitOk);
  const std::string csv = slurp(out / "summary.csv");
  std::istringstream lines(csv);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(lines, line)) rows.push_back(line);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "index,axis,value,status,exit_code,dir,sup_dev,lipschitz");
  CHECK(rows[1].rfind("0,forcing,0.01,passed,0,point-000,", 0) == 0);
  CHECK(rows[3].rfind("2,forcing,0.0001,passed,0,point-002,", 0) == 0);
  for (int i = 0; i < 3; ++i) CHECK(fs::exists(out / ("point-00" + std::to_string(i)) / "trajectory.csv"));

  // Deterministic: a second sweep writes the same summary.
  const fs::path again = scratch("sweep_forcing_again");
  REQUIRE(cmd_sweep(kPresets / "sweeps/stability_forcing.json", quiet(again), log) == kExitOk);
  CHECK(slurp(again / "summary.csv") == csv);

  Json empty = preset("sweeps/stability_forcing");
  empty["sweep"]["values"] = Json::array();
  const fs::path none = scratch("sweep_empty");
  CHECK(cmd_sweep(write_config("empty_sweep", empty), quiet(none), log) == kExitConfig);
  CHECK(!fs::exists(none));

  Json wrong_axis = preset("sweeps/stability_forcing");
  wrong_axis["sweep"]["axis"] = "delta";
  CHECK(cmd_sweep(write_config("wrong_axis", wrong_axis), quiet(none), log) == kExitConfig);
  CHECK(!fs::exists(none));
  CHECK(cmd_sweep(kPresets / "escape_g.json", quiet(none), log) == kExitConfig);

  // A failing child makes the sweep exit 2 but the summary is still written.
  Json strict = preset("escape_g");
  strict["params"]["bound"] = 0.5;
  strict["sweep"] = {{"axis", "seed"}, {"values", {1, 0}}};
  const fs::path failing = scratch("sweep_failing");
  CHECK(cmd_sweep(write_config("strict_sweep", strict), quiet(failing), log) == kExitAssertion);
  const std::string fcsv = slurp(failing / "summary.csv");
  CHECK(fcsv.find("0,seed,0,failed,2,point-000,") != std::string::npos);
  CHECK(fcsv.find("1,seed,1,failed,2,point-001,") != std::string::npos);
}

TEST_CASE("delta sweep of the approximation harness is monotone") {
  Json doc = preset("sweeps/thm1_delta");
  doc["model"]["neurons"] = 2;
  doc["params"]["ncf_t_end"] = 5.0;
  const fs::path out = scratch("sweep_thm1");
  std::ostringstream log;
  REQUIRE(cmd_sweep(write_config("thm1_small", doc), quiet(out), log) == kExitOk);
  std::istringstream lines(slurp(out / "summary.csv"));
  std::string line;
  std::getline(lines, line);
  CHECK(line.rfind("index,axis,value,status,exit_code,dir,sup_dev,", 0) == 0);
  std::vector<double> devs;
  while (std::getline(lines, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    devs.push_back(std::stod(cells[6]));
  }
  REQUIRE(devs.size() == 3);
  CHECK(devs[1] <= devs[0]);
  CHECK(devs[2] <= devs[1]);
  CHECK(Json::parse(slurp(out / "sweep.json"))["sup_dev_nonincreasing"] == true);
}
