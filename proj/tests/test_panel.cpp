#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "revid/dgp.hpp"
#include "revid/panel.hpp"

using namespace revid;
namespace fs = std::filesystem;

namespace {

std::string tmp_file(const std::string& name, const std::string& content) {
  auto dir = fs::temp_directory_path() / "revid_test_panel";
  fs::create_directories(dir);
  auto p = dir / name;
  std::ofstream(p) << content;
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

FirmRecord rec(const std::string& id, int t, double z = 0.0) {
  FirmRecord r;
  r.firm_id = id;
  r.period = t;
  r.r = 1.0 + t;
  r.m = 0.5;
  r.k = 0.1 * t;
  r.l = 0.2;
  r.z = z;
  r.mx = std::exp(0.5);
  return r;
}

}  // namespace

TEST_CASE("load_csv ingests a small panel") {
  auto p = tmp_file("three.csv", "id,t,r,m,k,l,z,mx\nA,0,1.5,0.2,0.1,0.3,0,1.2\nB,0,1.4,0.1,0.2,0.3,1,1.1\nA,1,1.6,0.3,0.1,0.2,0,1.35\n");
  auto panel = load_csv(p);
  CHECK(panel.size() == 3);
  CHECK_FALSE(panel.has_truth());
  CHECK(panel.counts_per_period().at(0) == 2);
  CHECK(panel.counts_per_period().at(1) == 1);
  CHECK(panel.z_discrete());
  CHECK(panel.records()[1].firm_id == "B");
  CHECK(panel.records()[2].mx == doctest::Approx(1.35));
}

TEST_CASE("load_csv names a missing column") {
  auto p = tmp_file("nomx.csv", "id,t,r,m,k,l,z\nA,0,1,0,0,0,0\n");
  try {
    load_csv(p);
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("mx") != std::string::npos);
  }
}

TEST_CASE("load_csv rejects duplicates and non-finite values") {
  auto dup = tmp_file("dup.csv", "id,t,r,m,k,l,z,mx\nA,0,1,0,0,0,0,1\nA,0,1,0,0,0,0,1\n");
  CHECK_THROWS_AS(load_csv(dup), SchemaError);
  auto inf = tmp_file("inf.csv", "id,t,r,m,k,l,z,mx\nA,0,inf,0,0,0,0,1\n");
  CHECK_THROWS_AS(load_csv(inf), SchemaError);
  auto neg = tmp_file("negmx.csv", "id,t,r,m,k,l,z,mx\nA,0,1,0,0,0,0,-1\n");
  CHECK_THROWS(load_csv(neg));
}

TEST_CASE("rows with empty required cells are dropped and counted") {
  auto p = tmp_file("missing.csv", "id,t,r,m,k,l,z,mx\nA,0,1,0,0,0,0,1\nB,0,,0,0,0,0,1\nC,0,1,0,0,0,1,1\n");
  auto panel = load_csv(p);
  CHECK(panel.size() == 2);
  CHECK(panel.dropped_rows() == 1);
}

TEST_CASE("schema map renames columns") {
  auto p = tmp_file("renamed.csv", "firm,year,rev,mat,cap,lab,d,spend\nA,0,1,0,0,0,0,1\n");
  Schema s;
  s.id = "firm";
  s.t = "year";
  s.r = "rev";
  s.m = "mat";
  s.k = "cap";
  s.l = "lab";
  s.z = "d";
  s.mx = "spend";
  auto panel = load_csv(p, s);
  CHECK(panel.size() == 1);
  CHECK(panel.records()[0].firm_id == "A");
}

TEST_CASE("continuous shifter is not treated as discrete") {
  std::string csv = "id,t,r,m,k,l,z,mx\n";
  for (int i = 0; i < 30; ++i) csv += "F" + std::to_string(i) + ",0,1,0,0,0," + std::to_string(0.01 * i) + ",1\n";
  auto panel = load_csv(tmp_file("cont.csv", csv));
  CHECK_FALSE(panel.z_discrete());
  CHECK(load_csv(tmp_file("cont.csv", csv), {}, 40).z_discrete());
}

TEST_CASE("simulated panel round-trips bit for bit") {
  TrueStructure ts;
  auto panel = simulate_ces(ts, 200, 3, 42);
  auto p = (fs::temp_directory_path() / "revid_test_panel" / "sim.csv").string();
  fs::create_directories(fs::path(p).parent_path());
  save_csv(panel, p);
  auto back = load_csv(p);
  REQUIRE(back.size() == panel.size());
  CHECK(back.has_truth());
  for (std::size_t i = 0; i < panel.size(); ++i) {
    const auto &a = panel.records()[i], &b = back.records()[i];
    CHECK(a.firm_id == b.firm_id);
    CHECK(a.period == b.period);
    CHECK(a.r == b.r);
    CHECK(a.m == b.m);
    CHECK(a.k == b.k);
    CHECK(a.l == b.l);
    CHECK(a.z == b.z);
    CHECK(a.mx == b.mx);
    CHECK(a.truth.omega == b.truth.omega);
    CHECK(a.truth.markup == b.truth.markup);
    CHECK(a.truth.eta == b.truth.eta);
  }
  // save(load(csv)) reproduces the file
  auto p2 = p + ".again";
  save_csv(back, p2);
  CHECK(slurp(p) == slurp(p2));
}

TEST_CASE("make_pair inner-joins on firm id") {
  std::vector<FirmRecord> rs{rec("A", 0), rec("B", 0), rec("A", 1), rec("B", 1), rec("C", 1)};
  FirmPanel panel(rs);
  auto pr = make_pair(panel, 1, 1);
  CHECK(pr.size() == 2);
  CHECK(pr.attrition == 1);
  CHECK(pr.firm_id[0] == "A");
  CHECK(pr.r[0] == doctest::Approx(2.0));
  CHECK(pr.k1[0] == doctest::Approx(0.0));
  CHECK(pr.k[0] == doctest::Approx(0.1));
  auto v = pr.v(1);
  REQUIRE(v.size() == 7);
  CHECK(v[0] == pr.k[1]);
  CHECK(v[3] == pr.m1[1]);
}

TEST_CASE("make_pair enforces the minimum row count and period existence") {
  std::vector<FirmRecord> rs{rec("A", 0), rec("A", 1)};
  FirmPanel panel(rs);
  CHECK_THROWS(make_pair(panel, 1, 5));
  CHECK_THROWS(make_pair(panel, 3, 1));
}

TEST_CASE("balanced simulated panel pairs every firm") {
  TrueStructure ts;
  auto panel = simulate_ces(ts, 500, 2, 3);
  auto pr = make_pair(panel, 1);
  CHECK(pr.size() == 500);
  CHECK(pr.attrition == 0);
  CHECK(pr.has_truth);
  CHECK(pr.z_discrete);
}

TEST_CASE("split_csv handles quoted fields") {
  auto f = split_csv("a, \"b,c\" ,d");
  REQUIRE(f.size() == 3);
  CHECK(f[1] == "b,c");
  CHECK(f[2] == "d");
}
