#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "revid/dgp.hpp"
#include "revid/ident.hpp"
#include "revid/norm.hpp"

using namespace revid;

namespace {

double sd(const std::vector<double>& v, const std::vector<unsigned char>& use) {
  double m = 0, n = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (use[i]) {
      m += v[i];
      n += 1;
    }
  m /= n;
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (use[i]) s += (v[i] - m) * (v[i] - m);
  return std::sqrt(s / (n - 1));
}

struct Run {
  TrueStructure ts;
  FirmPanel panel;
  std::vector<PanelPair> pairs;
  std::vector<PeriodResult> res;
};

Run identify_all(const TrueStructure& ts, std::size_t n, int periods, std::uint64_t seed, const IdentOptions& o = {}) {
  Run r;
  r.ts = ts;
  r.panel = simulate_ces(ts, n, periods, seed);
  for (int t = 1; t < periods; ++t) {
    r.pairs.push_back(make_pair(r.panel, t));
    r.res.push_back(identify_period(r.pairs.back(), o));
  }
  return r;
}

const Run& stationary() {
  static Run r = identify_all(TrueStructure{}, 30000, 3, 201);
  return r;
}

}  // namespace

TEST_CASE("stationary periods give a unit scale ratio under every method") {
  const auto& r = stationary();
  auto region = quantile_region(r.pairs[0], 0.40, 0.60);
  auto v = scale_ratio(r.res[0], r.res[1], ScaleMethod::EtaVariance, region);
  auto e = scale_ratio(r.res[0], r.res[1], ScaleMethod::ElasticityConstancy, region);
  auto c = scale_ratio(r.res[0], r.res[1], ScaleMethod::ReturnsConstancy, region);
  CHECK(v.b_ratio == doctest::Approx(1.0).epsilon(0.05));
  CHECK(v.b_ratio > 0.0);
  for (double a : {v.b_ratio, e.b_ratio, c.b_ratio})
    for (double b : {v.b_ratio, e.b_ratio, c.b_ratio}) CHECK(std::abs(a / b - 1.0) < 0.10);
}

TEST_CASE("variance ratio tracks a renormalized later period and ignores common renormalization") {
  const auto& r = stationary();
  IdentOptions o;
  o.norm_q0 = 0.2;
  o.norm_q1 = 0.8;
  auto alt0 = identify_period(r.pairs[0], o);
  auto alt1 = identify_period(r.pairs[1], o);
  auto region = quantile_region(r.pairs[0], 0.40, 0.60);
  double base = scale_ratio(r.res[0], r.res[1], ScaleMethod::EtaVariance, region).b_ratio;

  // both periods renormalized the same way
  double both = scale_ratio(alt0, alt1, ScaleMethod::EtaVariance, region).b_ratio;
  CHECK(both == doctest::Approx(base).epsilon(0.02));

  // only the later period renormalized: the ratio moves by the imposed factor
  double c = sd(alt1.s2.omega, alt1.s2.inside) / sd(r.res[1].s2.omega, r.res[1].s2.inside);
  double moved = scale_ratio(r.res[0], alt1, ScaleMethod::EtaVariance, region).b_ratio;
  CHECK(moved == doctest::Approx(c * base).epsilon(0.05));
}

TEST_CASE("local CRS scale matches the identified-scale oracle and rescales markups") {
  const auto& r = stationary();
  auto region = quantile_region(r.pairs[0], 0.40, 0.60);
  auto link = scale_from_crs(r.res[0], region);
  auto oi = oracle_identified(r.ts, r.res[0].grid.np, 1);
  CHECK(link.b_t == doctest::Approx(oi.b_crs()).epsilon(0.05));
  CHECK(link.assumption_dependent);

  auto res = r.res[0];
  apply_scale(res, link.b_t);
  auto again = scale_from_crs(res, region);
  CHECK(again.b_t == doctest::Approx(1.0).epsilon(1e-10));
  double s[2] = {0, 0}, n[2] = {0, 0};
  for (auto i : interior_firms(res)) {
    int z = static_cast<int>(r.pairs[0].z[i]);
    s[z] += res.s3.markup[i];
    n[z] += 1;
  }
  CHECK(s[0] / n[0] == doctest::Approx(1.25).epsilon(0.05));
  CHECK(s[1] / n[1] == doctest::Approx(1.0 / 0.75).epsilon(0.05));

  // disjoint regions agree under global constant returns
  auto lo = quantile_region(r.pairs[0], 0.25, 0.40);
  auto hi = quantile_region(r.pairs[0], 0.60, 0.75);
  CHECK(scale_from_crs(r.res[0], lo).b_t == doctest::Approx(scale_from_crs(r.res[0], hi).b_t).epsilon(0.05));
}

TEST_CASE("asserting CRS on decreasing returns still forces a unit sum") {
  TrueStructure ts;
  ts.theta_m = 0.30;
  ts.theta_k = 0.25;
  ts.theta_l = 0.35;
  auto r = identify_all(ts, 8000, 2, 202);
  auto region = quantile_region(r.pairs[0], 0.40, 0.60);
  auto link = scale_from_crs(r.res[0], region);
  CHECK(link.assumption_dependent);
  apply_scale(r.res[0], link.b_t);
  CHECK(scale_from_crs(r.res[0], region).b_t == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("apply_scale divides scale-carrying objects and keeps the accounting identity") {
  const auto& r = stationary();
  auto res = r.res[0];
  apply_scale(res, 2.0);
  const auto& o = r.res[0];
  for (std::size_t i = 0; i < res.s3.y.size(); i += 97) {
    if (!std::isfinite(o.s3.y[i])) continue;
    CHECK(res.s2.omega[i] == doctest::Approx(o.s2.omega[i] / 2.0));
    CHECK(res.s3.markup[i] == doctest::Approx(o.s3.markup[i] / 2.0));
    CHECK(std::abs(res.s3.p[i] - (res.s1.rbar[i] - res.s3.y[i])) <= 1e-12);
  }
  CHECK(res.s2.Minv.values()[5] == doctest::Approx(o.s2.Minv.values()[5] / 2.0));
  CHECK_THROWS(apply_scale(res, 0.0));
}

TEST_CASE("Laspeyres index: one product and homogeneity") {
  auto one = laspeyres({{0.0}, {std::log(2.0)}}, {1.3});
  CHECK(one[0] == 1.0);
  CHECK(one[1] == doctest::Approx(2.0).epsilon(1e-15));
  std::vector<std::vector<double>> lp{{0.1, -0.2, 0.4}, {0.3, 0.0, 0.1}};
  std::vector<double> y0{1.0, 0.5, -0.3};
  auto base = laspeyres(lp, y0);
  for (auto& p : lp[1]) p += std::log(3.0);
  CHECK(laspeyres(lp, y0)[1] == doctest::Approx(3.0 * base[1]).epsilon(1e-14));
}

TEST_CASE("price index CSV round trip") {
  std::map<int, double> idx{{0, 1.0}, {1, 1.0471975511965976}, {2, 0.3333333333333333}};
  auto p = (std::filesystem::temp_directory_path() / "revid_pindex.csv").string();
  save_price_index(idx, p);
  CHECK(load_price_index(p) == idx);
}

TEST_CASE("location links: accounting identity and price homogeneity") {
  const auto& r = stationary();
  std::vector<PeriodResult> res = r.res;
  auto region = quantile_region(r.pairs[0], 0.40, 0.60);
  for (auto& p : res) apply_scale(p, scale_from_crs(p, region).b_t);
  auto xbar = pooled_median_inputs(r.pairs);
  std::map<int, double> P{{1, 1.0}, {2, 1.0}};
  auto links = location_links(res, r.pairs, P, xbar);
  REQUIRE(links.size() == 1);
  const auto& L = links[0];
  REQUIRE(L.firm_id.size() > 1000);
  for (std::size_t i = 0; i < L.firm_id.size(); ++i)
    CHECK(std::abs(L.y_growth[i] - (L.rbar_growth[i] - L.p_growth[i])) <= 1e-10);
  // symmetric periods without an aggregate shift
  CHECK(std::abs(L.a12_diff) < 0.05);

  // doubling every price at the later period, with the observed index doubling too
  auto doubled = res;
  for (auto& v : doubled[1].s1.rbar) v += std::log(2.0);
  for (auto& v : doubled[1].s3.p) v += std::log(2.0);
  std::map<int, double> P2{{1, 1.0}, {2, 2.0}};
  auto L2 = location_links(doubled, r.pairs, P2, xbar)[0];
  for (std::size_t i = 0; i < L.firm_id.size(); ++i)
    CHECK(L2.y_growth[i] == doctest::Approx(L.y_growth[i]).epsilon(1e-12));

  CHECK_THROWS(location_links(res, r.pairs, {{1, 1.0}}, xbar));
  CHECK_THROWS(location_links(res, r.pairs, P, {50.0, 0.0, 0.0}));
}

TEST_CASE("scale method names round trip") {
  for (auto m : {ScaleMethod::EtaVariance, ScaleMethod::ElasticityConstancy, ScaleMethod::ReturnsConstancy})
    CHECK(parse_scale_method(to_string(m)) == m);
  CHECK_THROWS(parse_scale_method("bogus"));
}
