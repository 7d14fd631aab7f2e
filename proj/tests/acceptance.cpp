// Acceptance checks: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "revid/cond_cdf.hpp"
#include "revid/demand.hpp"
#include "revid/dgp.hpp"
#include "revid/ident.hpp"
#include "revid/integrate.hpp"
#include "revid/kernel.hpp"
#include "revid/norm.hpp"

using namespace revid;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double corr(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= a.size();
  mb /= b.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

TrueStructure base_structure() {
  TrueStructure ts;
  ts.rho = {0.8, -0.05};
  ts.theta_m = 0.35;
  ts.theta_k = 0.25;
  ts.theta_l = 0.40;
  ts.h1 = 0.8;
  ts.sigma_eta = 0.2;
  ts.sigma_eps = 0.1;
  return ts;
}

constexpr std::size_t kN = 50000;

struct Baseline {
  TrueStructure ts = base_structure();
  FirmPanel panel;
  PanelPair pr;
  PeriodResult raw;     // identified scale
  PeriodResult scaled;  // after the CRS scale
  double seconds = 0.0;
};

const Baseline& baseline() {
  static Baseline b = [] {
    Baseline x;
    auto t0 = std::chrono::steady_clock::now();
    x.panel = simulate_ces(x.ts, kN, 2, 1001);
    x.pr = make_pair(x.panel, 1);
    x.raw = identify_period(x.pr, IdentOptions{});
    x.scaled = x.raw;
    IdentOptions o;
    apply_scale(x.scaled, scale_from_crs(x.raw, quantile_region(x.pr, o.region_lo, o.region_hi)).b_t);
    x.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return x;
  }();
  return b;
}

Outcome oracle_recovery() {
  const auto& b = baseline();
  auto ids = interior_firms(b.scaled);
  double mu[2] = {0, 0}, n[2] = {0, 0}, el[3] = {0, 0, 0};
  std::vector<double> w, wt;
  for (auto i : ids) {
    int z = static_cast<int>(b.pr.z[i]);
    mu[z] += b.scaled.s3.markup[i];
    n[z] += 1;
    el[0] += b.scaled.s3.el_m[i];
    el[1] += b.scaled.s3.el_k[i];
    el[2] += b.scaled.s3.el_l[i];
    w.push_back(b.scaled.s2.omega[i]);
    wt.push_back(b.pr.truth[i].omega);
  }
  const double target[2] = {1.0 / 0.8, 1.0 / 0.75};
  const double theta[3] = {0.35, 0.25, 0.40};
  double mu_err = 0, el_err = 0;
  for (int z = 0; z < 2; ++z) mu_err = std::max(mu_err, std::abs(mu[z] / n[z] / target[z] - 1.0));
  for (int q = 0; q < 3; ++q) el_err = std::max(el_err, std::abs(el[q] / ids.size() - theta[q]));
  double r = corr(w, wt);
  bool pass = mu_err <= 0.05 && el_err <= 0.05 && r > 0.95 && b.seconds <= 300.0;
  return {pass, fmt::format("markup rel err {:.4f} (<= 0.05), elasticity abs err {:.4f} (<= 0.05), tfp corr {:.4f} "
                            "(> 0.95), {:.0f}s (<= 300s), {} interior firms",
                            mu_err, el_err, r, b.seconds, ids.size())};
}

Outcome dlw_degeneracy() {
  const auto& b = baseline();
  double worst = 0.0;
  auto ids = interior_firms(b.raw);
  for (auto i : ids) worst = std::max(worst, std::abs(b.raw.s3.dlw_markup[i] - 1.0));
  return {worst <= 0.02, fmt::format("max |revenue-elasticity markup - 1| {:.4f} (<= 0.02) over {} firms", worst, ids.size())};
}

Outcome observational_equivalence() {
  const auto& b = baseline();
  const double a1 = 0.3, a2 = -0.2, sc = 1.7;
  auto tb = equivalence_transform(b.ts, a1, a2, sc);
  auto other = simulate_ces(tb, kN, 2, 1001);
  double data_diff = 0.0, omega_map = 0.0, markup_map = 0.0;
  for (std::size_t i = 0; i < other.size(); ++i) {
    const auto &x = b.panel.records()[i], &y = other.records()[i];
    for (double d : {x.r - y.r, x.m - y.m, x.k - y.k, x.l - y.l, x.z - y.z, std::log(x.mx) - std::log(y.mx)})
      data_diff = std::max(data_diff, std::abs(d));
    omega_map = std::max(omega_map, std::abs(y.truth.omega - (a2 + sc * x.truth.omega)));
    markup_map = std::max(markup_map, std::abs(y.truth.markup - sc * x.truth.markup));
  }
  auto pr = make_pair(other, 1);
  auto res = identify_period(pr, IdentOptions{});
  // normalized outputs absorb the map, so both runs should coincide
  auto ids = interior_firms(b.raw);
  double out_diff = 0.0;
  for (auto i : ids)
    out_diff = std::max(out_diff, std::abs(res.s2.omega[i] - b.raw.s2.omega[i]));
  std::size_t ref = ids[ids.size() / 2];
  double ratio_err = 0.0;
  for (auto i : ids) {
    double ra = b.raw.s3.markup[i] / b.raw.s3.markup[ref], rb = res.s3.markup[i] / res.s3.markup[ref];
    ratio_err = std::max(ratio_err, std::abs(rb / ra - 1.0));
  }
  bool pass = data_diff <= 1e-10 && omega_map <= 1e-10 && markup_map <= 1e-10 && out_diff <= 1e-6 && ratio_err <= 0.01;
  return {pass, fmt::format("data diff {:.2e} (<= 1e-10), truth maps {:.2e}/{:.2e}, identified omega diff {:.2e}, "
                            "markup ratio diff {:.2e} (<= 0.01)",
                            data_diff, omega_map, markup_map, out_diff, ratio_err)};
}

Outcome normalization_invariance() {
  const auto& b = baseline();
  IdentOptions o;
  o.norm_q0 = 0.2;
  o.norm_q1 = 0.8;
  auto alt = identify_period(b.pr, o);
  std::vector<unsigned char> in_alt(b.pr.size(), 0);
  for (auto i : interior_firms(alt)) in_alt[i] = 1;
  std::vector<double> ratio;
  for (auto i : interior_firms(b.raw))
    if (in_alt[i]) ratio.push_back(alt.s3.markup[i] / b.raw.s3.markup[i]);
  double m = 0, v = 0;
  for (double x : ratio) m += x;
  m /= ratio.size();
  for (double x : ratio) v += (x - m) * (x - m);
  double cv = std::sqrt(v / ratio.size()) / m;
  return {cv < 0.02, fmt::format("CV of markup ratio {:.4f} (< 0.02), common factor {:.4f}, {} firms", cv, m, ratio.size())};
}

struct ThreePeriods {
  TrueStructure ts;
  FirmPanel panel;
  std::vector<PanelPair> pairs;
  std::vector<PeriodResult> res;
};

ThreePeriods three_periods(const TrueStructure& ts, std::uint64_t seed) {
  ThreePeriods x;
  x.ts = ts;
  x.panel = simulate_ces(ts, kN, 3, seed);
  for (int t = 1; t <= 2; ++t) {
    x.pairs.push_back(make_pair(x.panel, t));
    x.res.push_back(identify_period(x.pairs.back(), IdentOptions{}));
  }
  return x;
}

Outcome variance_ratio() {
  IdentOptions o;
  double err[2];
  double got[2], want[2];
  for (int c = 0; c < 2; ++c) {
    auto ts = base_structure();
    ts.sigma_eta_by_period = {0.2, 0.2, c == 0 ? 0.2 : 0.4};
    auto x = three_periods(ts, 2001 + c);
    auto region = quantile_region(x.pairs[0], o.region_lo, o.region_hi);
    got[c] = scale_ratio(x.res[0], x.res[1], ScaleMethod::EtaVariance, region).b_ratio;
    // identified scale of each period under its own normalization points
    double s1 = oracle_identified(x.ts, x.res[0].grid.np, 1).scale, s2 = oracle_identified(x.ts, x.res[1].grid.np, 2).scale;
    want[c] = (c == 0 ? 1.0 : 2.0) * s2 / s1;
    err[c] = std::abs(got[c] / want[c] - 1.0);
  }
  bool pass = err[0] <= 0.05 && err[1] <= 0.05;
  return {pass, fmt::format("stationary {:.4f} vs {:.4f} (err {:.4f}), doubled shock sd {:.4f} vs {:.4f} (err {:.4f}), "
                            "tolerance 0.05",
                            got[0], want[0], err[0], got[1], want[1], err[1])};
}

Outcome location_recovery() {
  auto ts = base_structure();
  ts.alpha_shift = {0.0, 0.0, 0.3};
  auto x = three_periods(ts, 3001);
  IdentOptions o;
  auto region = quantile_region(x.pairs[0], o.region_lo, o.region_hi);
  for (auto& r : x.res) apply_scale(r, scale_from_crs(r, region).b_t);
  auto P = true_price_index(x.panel, {1, 2});
  auto links = location_links(x.res, x.pairs, P, pooled_median_inputs(x.pairs));
  const auto& L = links.at(0);
  std::unordered_map<std::string, std::size_t> p0, p1;
  for (std::size_t i = 0; i < x.pairs[0].size(); ++i) p0[x.pairs[0].firm_id[i]] = i;
  for (std::size_t i = 0; i < x.pairs[1].size(); ++i) p1[x.pairs[1].firm_id[i]] = i;
  double err = 0.0;
  for (std::size_t i = 0; i < L.firm_id.size(); ++i) {
    const auto& id = L.firm_id[i];
    double truth = x.pairs[1].truth[p1.at(id)].omega - x.pairs[0].truth[p0.at(id)].omega;
    err += std::abs(L.tfp_growth[i] - truth);
  }
  err /= L.firm_id.size();
  return {err <= 0.05, fmt::format("mean |tfp growth error| {:.4f} (<= 0.05) over {} firms, P* ratio {:.4f}", err,
                                   L.firm_id.size(), L.P_star_t1 / L.P_star_t)};
}

Outcome hsa_suite() {
  auto curve = [](double rho) {
    RevenueCurve c;
    for (int j = 0; j <= 20; ++j) {
      double u = -3.0 + 0.3 * j;
      c.y.push_back(u);
      c.r.push_back(-5.3 + rho * u);
    }
    return c;
  };
  const int n = 200;
  std::vector<double> ly0(n), z0(n), Y0(n), Y(n), Y2(n);
  for (int i = 0; i < n; ++i) {
    ly0[i] = std::sin(i);
    z0[i] = i % 2;
    Y0[i] = std::exp(ly0[i]);
    Y[i] = Y0[i] * std::exp(0.3 * std::cos(3.0 * i));
    Y2[i] = 2.0 * Y[i];
  }
  HsaSystem s({0.0, 1.0}, {curve(0.8), curve(0.75)}, true, ly0, z0);
  double a_one = std::abs(solve_aggregator(s, Y0, z0).A - 1.0);
  auto a = solve_aggregator(s, Y, z0);
  double homog = std::abs(solve_aggregator(s, Y2, z0).A - 2.0 * a.A) / a.A;
  auto P = inverse_demand_all(s, Y, z0, a);
  double spend = 0.0;
  for (int i = 0; i < n; ++i) spend += P[i] * Y[i];
  double budget = std::abs(spend / std::exp(s.log_Phi()) - 1.0);
  double u_homog = std::abs(log_utility(s, Y2, z0) - log_utility(s, Y, z0) - std::log(2.0));
  std::vector<double> zz(n, 0.0);
  HsaSystem c({0.0}, {curve(0.8)}, true, ly0, zz);
  auto ces = [](const std::vector<double>& v) {
    double t = 0.0;
    for (double x : v) t += std::pow(x, 0.8);
    return std::log(t) / 0.8;
  };
  double ces_err = std::abs((log_utility(c, Y, zz) - log_utility(c, Y0, zz)) - (ces(Y) - ces(Y0)));
  bool pass = a_one <= 1e-10 && homog <= 1e-8 && budget <= 1e-8 && u_homog <= 1e-6 && ces_err <= 1e-4;
  return {pass, fmt::format("|A(Y0)-1| {:.1e}, homogeneity {:.1e}, budget {:.1e}, utility homogeneity {:.1e}, "
                            "CES utility diff {:.1e}",
                            a_one, homog, budget, u_homog, ces_err)};
}

Outcome nonparametric_primitives() {
  std::mt19937_64 eng(4001);
  std::normal_distribution<double> nd;
  const std::size_t n = 3000;
  std::vector<std::vector<double>> x(3, std::vector<double>(n));
  for (auto& c : x)
    for (auto& v : c) v = nd(eng);
  std::vector<double> y(n), m(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = 0.5 - 1.1 * x[0][i] + 0.7 * x[1][i] + 0.2 * x[2][i];
    m[i] = 0.5 * x[0][i] - 0.3 * x[1][i] + 0.6 * x[2][i];
  }
  double ll_err = 0.0;
  for (double h : {0.2, 0.6, 2.0}) {
    auto g = cond_mean(y, x, {{-1.0, 0.0, 1.0}, {-0.5, 0.5}, {-1.0, 1.0}}, {h, h, h});
    for (std::size_t k = 0; k < g.size(); ++k) {
      auto p = g.node(k);
      ll_err = std::max(ll_err, std::abs(g.values()[k] - (0.5 - 1.1 * p[0] + 0.7 * p[1] + 0.2 * p[2])));
    }
  }
  CondCdf cdf(m, {x[0], x[1]}, {"a", "b"}, {false, false});
  const double step = 1e-4;
  double fd_err = 0.0;
  for (double m0 : {-0.5, 0.0, 0.5})
    for (double a : {-0.5, 0.0, 0.5}) {
      std::vector<double> v{a, 0.1};
      double an = cond_cdf_deriv(cdf, m0, v, 0);
      double fd = (cdf.cdf(m0 + step, v) - cdf.cdf(m0 - step, v)) / (2 * step);
      fd_err = std::max(fd_err, std::abs(an - fd) / std::max(1.0, std::abs(an)));
      for (std::size_t j = 0; j < 2; ++j) {
        auto vp = v, vm = v;
        vp[j] += step;
        vm[j] -= step;
        an = cond_cdf_deriv(cdf, m0, v, 1 + j);
        fd = (cdf.cdf(m0, vp) - cdf.cdf(m0, vm)) / (2 * step);
        fd_err = std::max(fd_err, std::abs(an - fd) / std::max(1.0, std::abs(an)));
      }
    }
  std::vector<AxisDeriv> df{[](std::span<const double> p) { return std::cos(p[0]) * p[1]; },
                            [](std::span<const double> p) { return std::sin(p[0]) + p[2]; },
                            [](std::span<const double> p) { return p[1] + 0.5 * std::exp(0.5 * p[2]); }};
  std::vector<double> o{0.0, 0.5, -1.0}, mid{0.7, -0.2, 0.1}, t{1.3, 0.9, 0.8};
  const double tol = 1e-8;
  double whole = path_integrate(df, o, t, {0, 1, 2}, tol);
  double parts = path_integrate(df, o, mid, {0, 1, 2}, tol) + path_integrate(df, mid, t, {0, 1, 2}, tol);
  double add_err = std::abs(whole - parts);
  bool pass = ll_err <= 1e-8 && fd_err <= 1e-6 && add_err <= 2 * tol;
  return {pass, fmt::format("local-linear affine err {:.1e} (<= 1e-8), CDF derivative rel err {:.1e} (<= 1e-6), "
                            "path additivity {:.1e} (<= {:.0e})",
                            ll_err, fd_err, add_err, 2 * tol)};
}

Outcome labor_iv_branch() {
  auto run = [](double kappa, double ar, std::uint64_t seed) {
    auto ts = base_structure();
    ts.h1 = 0.5;
    ts.labor.endogenous = true;
    ts.labor.kappa = kappa;
    ts.labor.ar = ar;
    IdentOptions o;
    o.labor_endogenous = true;
    auto pr = make_pair(simulate_ces(ts, kN, 2, seed), 1);
    auto r = identify_period(pr, o);
    double target = -oracle_identified(ts, r.grid.np, 1).beta_l();
    return std::tuple{r.iv->theta_l_hat, r.iv->theta_l_ols, target};
  };
  auto [iv, ols, target] = run(0.5, 0.8, 5001);
  double endo_err = std::abs(iv / target - 1.0);
  auto [iv0, ols0, target0] = run(0.0, 0.8, 5002);
  double exo_gap = std::abs(iv0 / ols0 - 1.0);
  bool weak = false;
  try {
    run(0.0, 0.0, 5003);
  } catch (const WeakInstrumentError&) {
    weak = true;
  }
  // with exogenous labor OLS is consistent too; agreement is judged at 5%
  bool pass = endo_err <= 0.10 && exo_gap <= 0.05 && weak;
  return {pass, fmt::format("endogenous: {:.4f} vs {:.4f} (err {:.4f} <= 0.10, OLS {:.4f}); exogenous IV/OLS gap {:.4f} "
                            "(<= 0.05); independent lag raises weak-instrument error: {}",
                            iv, target, endo_err, ols, exo_gap, weak ? "yes" : "no")};
}

Outcome overidentification() {
  IdentOptions o;
  auto check = [&](double eta_k_scale, std::uint64_t seed) {
    auto ts = base_structure();
    ts.eta_k_scale = eta_k_scale;
    auto pr = make_pair(simulate_ces(ts, kN, 2, seed), 1);
    auto g = make_grid(pr, o);
    auto cdf = make_cdf(pr, o.cdf);
    return overid_check(pr, cdf, g, o);
  };
  auto good = check(0.0, 6001);
  auto bad = check(1.0, 6002);
  bool pass = good.ran && good.min_corr > 0.95 && !good.flagged && bad.ran && bad.flagged &&
              bad.slope_gap > o.overid_threshold;
  return {pass, fmt::format("well-specified: omega corr {:.4f} (> 0.95), slope gap {:.4f}, flagged {}; violated: slope gap "
                            "{:.4f} (> {:.2f}), flagged {}",
                            good.min_corr, good.slope_gap, good.flagged ? "yes" : "no", bad.slope_gap,
                            o.overid_threshold, bad.flagged ? "yes" : "no")};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::err);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"closed-form oracle recovery", oracle_recovery},
      {"revenue-elasticity markup degeneracy", dlw_degeneracy},
      {"observational equivalence", observational_equivalence},
      {"normalization-point invariance", normalization_invariance},
      {"variance-based scale ratio", variance_ratio},
      {"location recovery of TFP growth", location_recovery},
      {"HSA demand suite", hsa_suite},
      {"nonparametric primitives", nonparametric_primitives},
      {"labor IV branch", labor_iv_branch},
      {"over-identification diagnostic", overidentification}};
  int failed = 0;
  for (std::size_t c = 0; c < criteria.size(); ++c) {
    Outcome out;
    try {
      out = criteria[c].second();
    } catch (const std::exception& e) {
      out = {false, fmt::format("error: {}", e.what())};
    }
    failed += !out.pass;
    fmt::print("criterion {:>2} {}: {} ({})\n", c + 1, out.pass ? "PASS" : "FAIL", criteria[c].first, out.detail);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
