#include <doctest.h>

#include <cmath>
#include <tuple>
#include <vector>

#include "revid/dgp.hpp"

using namespace revid;

namespace {

double rbar_of(const FirmRecord& r) { return r.r - r.truth.eps; }

}  // namespace

TEST_CASE("perfect competition: material share equals theta_m") {
  TrueStructure ts;
  ts.rho = {1.0, 0.0};
  ts.theta_m = 0.3;
  auto panel = simulate_ces(ts, 300, 2, 1);
  for (const auto& r : panel.records()) CHECK(r.mx / std::exp(rbar_of(r)) == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("material share and beta_m at rho 0.8, theta_m 0.25") {
  TrueStructure ts;
  ts.rho = {0.8, -0.05};
  ts.theta_m = 0.25;
  auto oc = oracle_control(ts);
  CHECK(oc.s(0.0) == doctest::Approx(0.20).epsilon(1e-14));
  CHECK(oc.beta_m(0.0) == doctest::Approx(1.0).epsilon(1e-14));
  auto panel = simulate_ces(ts, 200, 2, 2);
  for (const auto& r : panel.records())
    if (r.z == 0.0) CHECK(r.mx / std::exp(rbar_of(r)) == doctest::Approx(0.20).epsilon(1e-12));
}

TEST_CASE("zero measurement noise leaves revenue exact") {
  TrueStructure ts;
  ts.sigma_eps = 0.0;
  auto panel = simulate_ces(ts, 100, 2, 3);
  for (const auto& r : panel.records()) {
    CHECK(r.truth.eps == 0.0);
    CHECK(r.r == rbar_of(r));
  }
}

TEST_CASE("oracle_control closed forms") {
  TrueStructure ts;
  ts.rho = {0.8, -0.05};
  ts.theta_m = 0.25;
  ts.theta_k = 0.30;
  ts.theta_l = 0.45;
  auto oc = oracle_control(ts);
  CHECK(oc.beta_m(0.0) == doctest::Approx(1.0));
  CHECK(oc.beta_k() == doctest::Approx(-0.30));
  CHECK(oc.beta_l() == doctest::Approx(-0.45));
  CHECK(oc.s(1.0) == doctest::Approx(0.75 * 0.25));
  CHECK(oc.s(1.0) == doctest::Approx(0.1875));

  TrueStructure pc;
  pc.rho = {1.0, 0.0};
  pc.theta_m = 0.3;
  CHECK(oracle_control(pc).beta_m(0.0) == doctest::Approx(0.7));
}

TEST_CASE("oracle_identified maps the share to the identified structure") {
  TrueStructure ts;
  ts.rho = {0.8, -0.05};
  ts.theta_m = 0.25;
  ts.theta_k = 0.30;
  ts.theta_l = 0.45;
  OracleIdentified oi;
  oi.ctl = oracle_control(ts);
  oi.scale = 1.0;  // beta_m(0) = 1, so the identified scale is the true one
  CHECK(oi.theta_m() == doctest::Approx(0.25));
  CHECK(oi.rho(0.0) == doctest::Approx(0.80));
  CHECK(oi.rho(1.0) == doctest::Approx(0.75));
  CHECK(oi.markup(0.0) == doctest::Approx(1.25));

  // constant returns: b times the true coefficients are the identified ones
  TrueStructure crs;
  crs.theta_m = 0.35;
  crs.theta_k = 0.25;
  crs.theta_l = 0.40;
  NormPoints np{-0.4, 0.6, 0.0, 0.0, 0.0};
  auto o = oracle_identified(crs, np);
  double b = o.b_crs();
  CHECK(o.theta_m() == doctest::Approx(b * 0.35).epsilon(1e-12));
  CHECK(o.theta_k() == doctest::Approx(b * 0.25).epsilon(1e-12));
  CHECK(o.theta_l() == doctest::Approx(b * 0.40).epsilon(1e-12));
  CHECK(b == doctest::Approx(o.scale).epsilon(1e-12));
  // identified b from shares: s(0)/(1-s(0)) - beta_k - beta_l
  double s0 = o.ctl.s(0.0);
  CHECK(b == doctest::Approx(s0 / (1.0 - s0) * o.beta_m(0.0) - o.beta_k() - o.beta_l()).epsilon(1e-12));

  // perfect competition: identified markup 1
  TrueStructure pc;
  pc.rho = {1.0, 0.0};
  pc.theta_m = 0.3;
  OracleIdentified op;
  op.ctl = oracle_control(pc);
  CHECK(op.rho(0.0) == doctest::Approx(1.0));
  CHECK(op.markup(0.0) == doctest::Approx(1.0));
}

TEST_CASE("oracle normalization pins the control function at the two points") {
  TrueStructure ts;
  NormPoints np{-0.3, 0.4, 0.1, -0.2, 0.0};
  auto o = oracle_identified(ts, np);
  CHECK(o.omega(np.m0, np.k, np.l, np.z) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(o.omega(np.m1, np.k, np.l, np.z) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(o.f(np.m0, np.k, np.l) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("material FOC holds for every simulated firm") {
  TrueStructure ts;
  auto panel = simulate_ces(ts, 1000, 3, 4);
  double worst = 0.0;
  for (const auto& r : panel.records()) {
    double s = ts.rho(r.z) * ts.theta_m;
    worst = std::max(worst, std::abs(s - r.mx / std::exp(rbar_of(r))));
    CHECK(std::log(r.mx) - r.m == doctest::Approx(ts.p_m));
    CHECK(r.truth.markup == doctest::Approx(1.0 / ts.rho(r.z)));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("revenue elasticity of material is one and TFP passes through at rho") {
  TrueStructure ts;
  auto oc = oracle_control(ts);
  for (double z : {0.0, 1.0}) CHECK(ts.rho(z) * (ts.theta_m + oc.beta_m(z)) == doctest::Approx(1.0).epsilon(1e-14));
  // rbar = alpha + rho (theta0 + theta.x + omega): a common shift d omega moves rbar by rho d omega
  auto panel = simulate_ces(ts, 300, 2, 5);
  for (const auto& r : panel.records()) {
    double f = ts.theta0 + ts.theta_m * r.m + ts.theta_k * r.k + ts.theta_l * r.l;
    CHECK(rbar_of(r) == doctest::Approx(ts.alpha_at(r.z, r.period) + ts.rho(r.z) * (f + r.truth.omega)).epsilon(1e-12));
  }
}

TEST_CASE("equivalent structure reproduces the observed panel under matched seeds") {
  TrueStructure ts;
  auto a = simulate_ces(ts, 500, 3, 9);
  for (auto [a1, a2, b] : {std::tuple{0.3, -0.2, 1.7}, std::tuple{-1.0, 0.5, 0.9}}) {
    auto tb = equivalence_transform(ts, a1, a2, b);
    auto c = simulate_ces(tb, 500, 3, 9);
    REQUIRE(c.size() == a.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto &x = a.records()[i], &y = c.records()[i];
      for (auto d : {x.r - y.r, x.m - y.m, x.k - y.k, x.l - y.l, x.z - y.z, std::log(x.mx) - std::log(y.mx)})
        worst = std::max(worst, std::abs(d));
    }
    CHECK(worst <= 1e-10);
  }
}

TEST_CASE("per-firm streams do not depend on panel size") {
  TrueStructure ts;
  auto small = simulate_ces(ts, 50, 2, 17);
  auto big = simulate_ces(ts, 80, 2, 17);
  for (std::size_t i = 0; i < small.size(); ++i) CHECK(small.records()[i].r == big.records()[i].r);
  auto other = simulate_ces(ts, 50, 2, 18);
  CHECK(other.records()[0].r != small.records()[0].r);
}

TEST_CASE("TrueStructure invariants are enforced") {
  TrueStructure ts;
  ts.rho = {1.1, 0.0};
  CHECK_THROWS(ts.validate());
  ts.rho = {0.8, 0.0};
  ts.theta_m = 1.3;
  CHECK_THROWS(ts.validate());
  ts.theta_m = 0.35;
  ts.h1 = 1.0;
  CHECK_THROWS(ts.validate());
  ts.h1 = 0.8;
  CHECK_NOTHROW(ts.validate());
  CHECK_THROWS(simulate_ces(ts, 10, 1, 1));
}

TEST_CASE("continuous shifter law") {
  TrueStructure ts;
  ts.z_law = ZLaw::Uniform;
  auto panel = simulate_ces(ts, 400, 2, 6);
  CHECK_FALSE(panel.z_discrete());
  for (const auto& r : panel.records()) {
    CHECK(r.z >= 0.0);
    CHECK(r.z <= 1.0);
    CHECK(r.truth.markup == doctest::Approx(1.0 / (0.8 - 0.05 * r.z)));
  }
}

TEST_CASE("HSA variant with a CES share function has markups 1/rho") {
  TrueStructure prod;
  HsaShare share;
  share.delta = 0.0;
  std::vector<double> agg;
  auto panel = simulate_hsa(share, prod, 400, 2, 8, {}, &agg);
  REQUIRE(agg.size() == 2);
  for (const auto& r : panel.records()) CHECK(r.truth.markup == doctest::Approx(1.0 / prod.rho(r.z)).epsilon(1e-8));
}

TEST_CASE("HSA variant: shares sum to one and markups vary with delta > 0") {
  TrueStructure prod;
  HsaShare share;
  share.delta = 0.05;
  HsaSimOptions opt;
  std::vector<double> agg;
  auto panel = simulate_hsa(share, prod, 500, 2, 10, opt, &agg);
  double lo = 1e9, hi = -1e9;
  std::vector<double> sum(2, 0.0);
  for (const auto& r : panel.records()) {
    lo = std::min(lo, r.truth.markup);
    hi = std::max(hi, r.truth.markup);
    sum[r.period] += std::exp(rbar_of(r) - opt.log_budget);
  }
  CHECK(hi - lo > 1e-3);
  for (double s : sum) CHECK(s == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("HSA variant: symmetric firms choose equal inputs") {
  TrueStructure prod;
  prod.k_law.sd = 0.0;
  prod.l_law.sd = 0.0;
  prod.sigma_eta = 0.0;
  prod.z_prob = 1.0;
  HsaShare share;
  auto panel = simulate_hsa(share, prod, 50, 2, 11);
  for (const auto& r : panel.records()) {
    CHECK(r.m == doctest::Approx(panel.records()[0].m).epsilon(1e-10));
    CHECK(r.truth.markup == doctest::Approx(panel.records()[0].truth.markup).epsilon(1e-10));
  }
}

TEST_CASE("HSA variant: doubling the budget doubles revenue and keeps markups") {
  TrueStructure prod;
  HsaShare share;
  HsaSimOptions a, b;
  b.log_budget = a.log_budget + std::log(2.0);
  auto pa = simulate_hsa(share, prod, 300, 2, 12, a);
  auto pb = simulate_hsa(share, prod, 300, 2, 12, b);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto &x = pa.records()[i], &y = pb.records()[i];
    CHECK(rbar_of(y) - rbar_of(x) == doctest::Approx(std::log(2.0)).epsilon(1e-8));
    CHECK(y.truth.markup == doctest::Approx(x.truth.markup).epsilon(1e-8));
  }
}
