#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "revid/cli.hpp"
#include "revid/config.hpp"
#include "revid/panel.hpp"
#include "revid/pipeline.hpp"

using namespace revid;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path base() {
  static fs::path b = [] {
    auto p = fs::temp_directory_path() / "revid_test_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return b;
}

std::string write(const std::string& name, const std::string& content) {
  auto p = base() / name;
  std::ofstream(p) << content;
  return p.string();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "revid");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string config_error(const std::string& toml) {
  try {
    load_config(write("err.toml", toml)).validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// small simulated panel shared by the end-to-end cases
const std::string& sim_dir() {
  static std::string d = [] {
    auto dir = (base() / "sim").string();
    auto cfg = write("sim.toml", "[dgp]\nn_firms = 3000\nn_periods = 2\n[io]\nseed = 4\n");
    REQUIRE(cli({"simulate", "-q", "-c", cfg, "--out", dir}) == 0);
    return dir;
  }();
  return d;
}

std::string ident_config() {
  return write("ident.toml", "[io]\npanel = \"" + sim_dir() + "/panel.csv\"\nseed = 4\n");
}

}  // namespace

TEST_CASE("config: TOML and JSON give the same run") {
  auto t = write("a.toml",
                 "mode = \"identify\"\n[dgp]\nn_firms = 1234\nrho = { a = 0.7, b = -0.1 }\n"
                 "[estimation]\ngrid_points = 15\nnorm_quantiles = [0.25, 0.75]\n[estimation.bandwidth]\ncdf_scale = 2.5\n"
                 "[io]\nseed = 9\nreplications = 4\n");
  auto j = write("a.json",
                 R"({"mode": "identify", "dgp": {"n_firms": 1234, "rho": {"a": 0.7, "b": -0.1}},
                     "estimation": {"grid_points": 15, "norm_quantiles": [0.25, 0.75], "bandwidth": {"cdf_scale": 2.5}},
                     "io": {"seed": 9, "replications": 4}})");
  auto a = load_config(t), b = load_config(j);
  CHECK(a.mode == Mode::Identify);
  CHECK(a.dgp.n_firms == 1234);
  CHECK(a.dgp.ts.rho.a == 0.7);
  CHECK(a.est.ident.grid_points == 15);
  CHECK(a.est.ident.norm_q0 == 0.25);
  CHECK(a.est.ident.cdf.bw_scale == 2.5);
  CHECK(a.io.seed == 9);
  CHECK(a.io.replications == 4);
  CHECK(a.resolved() == b.resolved());
}

TEST_CASE("config: invalid values name the field") {
  CHECK(config_error("[estimation.bandwidth]\ncdf_scale = -1.0\n").find("estimation.bandwidth.cdf_scale") !=
        std::string::npos);
  CHECK(config_error("[io]\nreplications = 0\n").find("io.replications") != std::string::npos);
  CHECK(config_error("[dgp]\nrho = { a = 1.2, b = 0.0 }\n").find("dgp") != std::string::npos);
  CHECK(config_error("[estimation]\nintegtol = 1e-8\n").find("integtol") != std::string::npos);
  CHECK(config_error("mode = \"identify\"\n").find("io.panel") != std::string::npos);
  CHECK(config_error("mode = \"identify\"\n[io]\npanel = \"/nonexistent/panel.csv\"\n").find("io.panel") !=
        std::string::npos);
  CHECK(config_error("mode = \"fly\"\n").find("mode") != std::string::npos);
  CHECK_THROWS_AS(read_config_file(write("broken.toml", "[dgp\n")), ConfigError);
}

TEST_CASE("simulate writes a panel with truth columns and a manifest") {
  auto dir = fs::path(sim_dir());
  auto header = slurp(dir / "panel.csv").substr(0, 200);
  for (auto col : {"true_omega", "true_markup", "true_eps", "true_eta", "true_y", "true_p"})
    CHECK(header.find(col) != std::string::npos);
  auto m = read_json(dir / "manifest.json");
  CHECK(m["mode"] == "simulate");
  CHECK(m["seed"] == 4);
  CHECK(m["version"] == library_version());
  CHECK(load_csv((dir / "panel.csv").string()).size() == 6000);
}

TEST_CASE("identify runs end to end and is deterministic") {
  auto out = base() / "ident";
  auto cfg = ident_config();
  REQUIRE(cli({"identify", "-q", "-c", cfg, "--out", out.string()}) == 0);
  auto firms = slurp(out / "firms_t1.csv");
  auto man = read_json(out / "manifest.json");
  for (auto f : {"grid_phi_t1.csv", "grid_minv_t1.csv", "grid_markup_t1.csv", "summary.json"})
    CHECK(fs::exists(out / f));
  CHECK(firms.substr(0, firms.find('\n')).find("markup") != std::string::npos);

  REQUIRE(cli({"identify", "-q", "-c", cfg, "--out", out.string()}) == 0);
  CHECK(slurp(out / "firms_t1.csv") == firms);
  auto man2 = read_json(out / "manifest.json");
  man.erase("timestamp");
  man2.erase("timestamp");
  CHECK(man == man2);

  // every design choice is recorded
  auto id = man["resolved"]["estimation"]["ident"];
  for (auto k : {"grid_points", "grid_lo", "grid_hi", "bandwidth_rule", "cdf", "norm_quantiles", "anchor_candidates",
                 "anchor_floor", "density_floor", "integ_tol", "region", "min_cell_rows", "overid_threshold"})
    CHECK_MESSAGE(id.contains(k), k);
  auto p = man["design"]["periods"][0];
  for (auto k : {"anchors", "grid", "cdf_bandwidths", "step1_bandwidths", "c0", "c2", "p_m", "z_levels"})
    CHECK_MESSAGE(p.contains(k), k);

  auto summary = read_json(out / "summary.json");
  REQUIRE(summary.contains("recovery"));
  CHECK(summary["recovery"].size() > 0);
}

TEST_CASE("report tabulates a run, compares two runs and rejects incomplete directories") {
  auto out = base() / "ident";
  if (!fs::exists(out / "summary.json")) REQUIRE(cli({"identify", "-q", "-c", ident_config(), "--out", out.string()}) == 0);
  auto rep = run_report(out.string());
  CHECK(rep.text.find("object") != std::string::npos);
  CHECK(fs::exists(out / "report_long.csv"));
  auto table = slurp(out / "report_recovery.csv");
  CHECK(table.substr(0, table.find('\n')) == "object,truth,estimate,rel_error");
  CHECK(table.find("markup[t=1,z=0]") != std::string::npos);

  auto other = base() / "ident2";
  REQUIRE(cli({"identify", "-q", "-c", ident_config(), "--out", other.string(), "--seed", "5"}) == 0);
  run_report(out.string(), other.string());
  CHECK(fs::exists(out / "report_compare.csv"));

  auto empty = base() / "empty";
  fs::create_directories(empty);
  try {
    run_report(empty.string());
    FAIL("expected an incomplete-directory error");
  } catch (const IncompleteResults& e) {
    std::string msg = e.what();
    CHECK(msg.find("manifest.json") != std::string::npos);
    CHECK(msg.find("summary.json") != std::string::npos);
  }
  CHECK(cli({"report", "-q", empty.string()}) == 1);
}

TEST_CASE("montecarlo summarizes markup error per shifter cell") {
  auto out = base() / "mc";
  auto cfg = write("mc.toml", "[dgp]\nn_firms = 2000\n[io]\nreplications = 2\nseed = 3\n");
  REQUIRE(cli({"montecarlo", "-q", "-c", cfg, "--out", out.string()}) == 0);
  auto s = read_json(out / "summary.json");
  REQUIRE(s["markup_error"].size() == 2);
  for (const auto& row : s["markup_error"]) {
    CHECK(row.contains("mean"));
    CHECK(row.contains("sd"));
    CHECK(row.contains("rmse"));
    CHECK(row["replications"] == 2);
  }
  CHECK(fs::exists(out / "replications.csv"));
  CHECK(read_json(out / "manifest.json")["design"]["replication_seeds"].size() == 2);
}

TEST_CASE("exit codes and thread settings") {
  auto out = (base() / "codes").string();
  CHECK(cli({"simulate", "-q", "--out", out, "--seed", "2"}) == 0);
  CHECK(cli({"simulate", "-q", "-c", write("neg.toml", "[dgp]\nsigma_eta = -1.0\n"), "--out", out}) == 2);
  CHECK(cli({"simulate", "-q", "-c", "/nonexistent.toml"}) == 2);
  CHECK(cli({"fly"}) == 2);
  auto broken = write("broken.csv", "id,t,r,k,l,z,mx\nA,0,1,0,0,0,1\n");
  CHECK(cli({"identify", "-q", "-c", write("broken.toml", "[io]\npanel = \"" + broken + "\"\n"), "--out", out}) == 1);

  ::setenv("REVID_THREADS", "x", 1);
  CHECK(cli({"simulate", "-q", "--out", out}) == 2);
  ::setenv("REVID_THREADS", "1", 1);
  CHECK(cli({"simulate", "-q", "--out", out}) == 0);
  ::unsetenv("REVID_THREADS");
  CHECK(cli({"simulate", "-q", "--out", out, "--threads", "1"}) == 0);
}

TEST_CASE("seed override changes the panel; same seed reproduces it") {
  auto a = (base() / "seed_a").string(), b = (base() / "seed_b").string(), c = (base() / "seed_c").string();
  auto cfg = write("small.toml", "[dgp]\nn_firms = 300\n");
  REQUIRE(cli({"simulate", "-q", "-c", cfg, "--out", a, "--seed", "7"}) == 0);
  REQUIRE(cli({"simulate", "-q", "-c", cfg, "--out", b, "--seed", "7"}) == 0);
  REQUIRE(cli({"simulate", "-q", "-c", cfg, "--out", c, "--seed", "8"}) == 0);
  CHECK(slurp(fs::path(a) / "panel.csv") == slurp(fs::path(b) / "panel.csv"));
  CHECK(slurp(fs::path(a) / "panel.csv") != slurp(fs::path(c) / "panel.csv"));
}
