#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "revid/cond_cdf.hpp"
#include "revid/dgp.hpp"
#include "revid/grid.hpp"
#include "revid/ident.hpp"
#include "revid/integrate.hpp"
#include "revid/kernel.hpp"

using namespace revid;

namespace {

std::vector<std::vector<double>> normal_columns(std::size_t n, std::size_t d, unsigned seed) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> x(d, std::vector<double>(n));
  for (auto& c : x)
    for (auto& v : c) v = nd(eng);
  return x;
}

// interior rows of a tensor grid: drop the outer node on every axis
bool interior_node(const GridFn& g, std::size_t k) {
  auto idx = g.unflat(k);
  for (std::size_t d = 0; d < g.dims(); ++d)
    if (g.axis(d).size() > 2 && (idx[d] == 0 || idx[d] + 1 == g.axis(d).size())) return false;
  return true;
}

}  // namespace

TEST_CASE("cond_mean of a constant is that constant") {
  auto x = normal_columns(500, 2, 1);
  std::vector<double> y(500, 3.25);
  auto g = cond_mean(y, x, {{-1, 0, 1}, {-0.5, 0.5}}, {0.4, 0.4});
  for (double v : g.values()) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("cond_mean reproduces affine targets for any bandwidth") {
  auto x = normal_columns(800, 3, 2);
  std::vector<double> y(800);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = 0.7 - 1.2 * x[0][i] + 0.4 * x[1][i] + 2.0 * x[2][i];
  for (double h : {0.15, 0.5, 3.0}) {
    auto g = cond_mean(y, x, {{-1, 0, 1}, {-1, 1}, {-0.5, 0.0, 0.5}}, {h, h, h});
    for (std::size_t k = 0; k < g.size(); ++k) {
      auto p = g.node(k);
      double truth = 0.7 - 1.2 * p[0] + 0.4 * p[1] + 2.0 * p[2];
      CHECK(std::abs(g.values()[k] - truth) <= 1e-8);
      CHECK(g.deriv(p, 0) == doctest::Approx(-1.2).epsilon(1e-8));
      CHECK(g.deriv(p, 2) == doctest::Approx(2.0).epsilon(1e-8));
    }
  }
}

TEST_CASE("cond_mean conditions exactly on zero-bandwidth columns") {
  auto x = normal_columns(600, 1, 3);
  std::vector<double> z(600), y(600);
  for (std::size_t i = 0; i < 600; ++i) {
    z[i] = static_cast<double>(i % 2);
    y[i] = (z[i] == 0.0 ? 1.0 : 5.0) + x[0][i];
  }
  auto g = cond_mean(y, {x[0], z}, {{-0.5, 0.5}, {0.0, 1.0}}, {0.3, 0.0});
  CHECK(g({0.5, 0.0}) == doctest::Approx(1.5).epsilon(1e-8));
  CHECK(g({0.5, 1.0}) == doctest::Approx(5.5).epsilon(1e-8));
}

TEST_CASE("cond_mean error on the revenue function shrinks with the sample") {
  // with constant material share, rbar = m + p_m - ln(rho(z) theta_m)
  TrueStructure ts;
  double err[2];
  std::size_t sizes[2] = {5000, 50000};
  for (int s = 0; s < 2; ++s) {
    auto panel = simulate_ces(ts, sizes[s], 2, 21);
    auto pr = make_pair(panel, 1);
    std::vector<double> r, m, k, l;
    for (std::size_t i = 0; i < pr.size(); ++i)
      if (pr.z[i] == 0.0) {
        r.push_back(pr.r[i]);
        m.push_back(pr.m[i]);
        k.push_back(pr.k[i]);
        l.push_back(pr.l[i]);
      }
    auto bw = select_bandwidth({m, k, l}, BandwidthRule::Silverman, 3);
    auto axes = std::vector<std::vector<double>>{quantile_grid(m, 7, 0.1, 0.9), quantile_grid(k, 7, 0.1, 0.9),
                                                 quantile_grid(l, 7, 0.1, 0.9)};
    auto g = cond_mean(r, {m, k, l}, axes, bw);
    double c = ts.p_m - std::log(ts.rho(0.0) * ts.theta_m), worst = 0.0;
    for (std::size_t q = 0; q < g.size(); ++q)
      if (interior_node(g, q)) worst = std::max(worst, std::abs(g.values()[q] - (g.node(q)[0] + c)));
    err[s] = worst;
  }
  CHECK(err[1] < err[0]);
  CHECK(err[1] < 0.02);
}

TEST_CASE("select_bandwidth follows the normal-reference rule") {
  auto x = normal_columns(1000, 1, 4);
  auto h = select_bandwidth(x, BandwidthRule::Silverman);
  double m = 0.0, s = 0.0;
  for (double v : x[0]) m += v;
  m /= 1000.0;
  for (double v : x[0]) s += (v - m) * (v - m);
  double sd = std::sqrt(s / 999.0);
  CHECK(h[0] == doctest::Approx(1.06 * sd * std::pow(1000.0, -0.2)).epsilon(1e-12));
  CHECK(h[0] / sd == doctest::Approx(0.266).epsilon(0.01));

  auto twice = select_bandwidth({x[0], x[0]}, BandwidthRule::Silverman, 2);
  CHECK(twice[0] == twice[1]);

  auto lscv = select_bandwidth(x, BandwidthRule::Lscv);
  CHECK(lscv[0] > 0.0);
}

TEST_CASE("select_bandwidth names a constant column") {
  std::vector<double> c(100, 2.0);
  try {
    select_bandwidth({c}, BandwidthRule::Silverman, 1, {"capital"});
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("capital") != std::string::npos);
  }
}

TEST_CASE("conditional CDF stays in [0,1] and is nondecreasing in m") {
  auto x = normal_columns(2000, 3, 5);
  std::vector<double> m(2000);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * x[0][i] - 0.3 * x[1][i] + 0.6 * x[2][i];
  CondCdf cdf(m, {x[0], x[1]}, {"a", "b"}, {false, false});
  for (double a : {-1.0, 0.0, 1.0})
    for (double b : {-1.0, 0.5}) {
      std::vector<double> v{a, b};
      double prev = -1.0;
      for (double q = -3.0; q <= 3.0; q += 0.25) {
        double g = cdf.cdf(q, v);
        CHECK(g >= 0.0);
        CHECK(g <= 1.0);
        CHECK(g >= prev - 1e-14);
        prev = g;
      }
    }
}

TEST_CASE("analytic CDF derivatives match central differences") {
  auto x = normal_columns(3000, 3, 6);
  std::vector<double> m(3000);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * x[0][i] - 0.3 * x[1][i] + 0.6 * x[2][i];
  CondCdf cdf(m, {x[0], x[1]}, {"a", "b"}, {false, false});
  const double h = 1e-4;
  for (double m0 : {-0.5, 0.0, 0.4})
    for (double a : {-0.5, 0.3}) {
      std::vector<double> v{a, 0.2};
      double fd_m = (cdf.cdf(m0 + h, v) - cdf.cdf(m0 - h, v)) / (2 * h);
      double an_m = cond_cdf_deriv(cdf, m0, v, 0);
      CHECK(an_m > 0.0);
      CHECK(std::abs(an_m - fd_m) <= 1e-6 * std::max(1.0, std::abs(an_m)));
      for (std::size_t j = 0; j < 2; ++j) {
        auto vp = v, vm = v;
        vp[j] += h;
        vm[j] -= h;
        double fd = (cdf.cdf(m0, vp) - cdf.cdf(m0, vm)) / (2 * h);
        double an = cond_cdf_deriv(cdf, m0, v, 1 + j);
        CHECK(std::abs(an - fd) <= 1e-6 * std::max(1.0, std::abs(an)));
      }
    }
}

TEST_CASE("CDF derivative ratio recovers the control-function slope ratio") {
  TrueStructure ts;
  auto panel = simulate_ces(ts, 50000, 2, 7);
  auto pr = make_pair(panel, 1);
  CondCdfOptions o;
  auto cdf = make_cdf(pr, o);
  auto oc = oracle_control(ts);
  double target = oc.beta_k() / oc.beta_m(0.0);
  std::vector<double> v{quantile(pr.k, 0.5), quantile(pr.l, 0.5), 0.0, quantile(pr.m1, 0.5),
                        quantile(pr.k1, 0.5), quantile(pr.l1, 0.5), 0.0};
  double m0 = quantile(pr.m, 0.5);
  std::vector<std::vector<double>> v_axes;
  for (double c : v) v_axes.push_back({c});
  auto grad = cdf_gradient_grid(cdf, {m0}, v_axes);
  REQUIRE(grad.ok[0]);
  // G(m | v) = F(Minv(m, k, l, z) | lags): the ratio is dMinv/dk over dMinv/dm
  double ratio = grad.Gv[kVk].values()[0] / grad.Gm.values()[0];
  CHECK(ratio == doctest::Approx(target).epsilon(0.10));
}

TEST_CASE("CDF refuses too small an effective sample") {
  auto x = normal_columns(200, 1, 8);
  std::vector<double> m(x[0]);
  CondCdfOptions o;
  o.min_effective_n = 150;
  CondCdf cdf(m, {x[0]}, {"a"}, {false}, o);
  std::vector<double> far{8.0};
  CHECK_THROWS(cdf.cdf(0.0, far));
}

TEST_CASE("path_integrate: zero and constant fields") {
  std::vector<AxisDeriv> zero(3, [](std::span<const double>) { return 0.0; });
  std::vector<double> o{0.1, -0.2, 0.3}, t{1.0, 0.5, -0.7};
  CHECK(path_integrate(zero, o, t, {0, 1, 2}) == 0.0);
  std::vector<AxisDeriv> cst{[](std::span<const double>) { return 1.5; },
                             [](std::span<const double>) { return -0.4; },
                             [](std::span<const double>) { return 2.0; }};
  double exact = 1.5 * 0.9 - 0.4 * 0.7 + 2.0 * (-1.0);
  CHECK(std::abs(path_integrate(cst, o, t, {2, 0, 1}) - exact) <= 1e-10);
}

TEST_CASE("path_integrate recovers a potential and is additive") {
  // F = sin(x) y + exp(z / 2)
  std::vector<AxisDeriv> df{[](std::span<const double> p) { return std::cos(p[0]) * p[1]; },
                            [](std::span<const double> p) { return std::sin(p[0]); },
                            [](std::span<const double> p) { return 0.5 * std::exp(0.5 * p[2]); }};
  auto F = [](const std::vector<double>& p) { return std::sin(p[0]) * p[1] + std::exp(0.5 * p[2]); };
  std::vector<double> o{0.0, 0.5, -1.0}, mid{0.7, -0.2, 0.1}, t{1.3, 0.9, 0.8};
  const double tol = 1e-8;
  double full = path_integrate(df, o, t, {0, 1, 2}, tol);
  CHECK(std::abs(full - (F(t) - F(o))) <= 3 * 2 * tol);
  double a = path_integrate(df, o, mid, {0, 1, 2}, tol), b = path_integrate(df, mid, t, {0, 1, 2}, tol);
  CHECK(std::abs(a + b - full) <= 2 * 3 * tol);
  CHECK(adaptive_simpson([](double x) { return x * x; }, 0.0, 3.0) == doctest::Approx(9.0).epsilon(1e-10));
}

TEST_CASE("GridFn interpolates exactly at breakpoints and multilinearly between") {
  GridFn g({{0.0, 1.0, 3.0}, {-1.0, 2.0}}, {1, 2, 3, 4, 5, 6}, {"a", "b"});
  CHECK(g({1.0, 2.0}) == 4.0);
  CHECK(g({3.0, -1.0}) == 5.0);
  CHECK(g({0.5, -1.0}) == doctest::Approx(2.0));
  CHECK(g({2.0, 0.5}) == doctest::Approx(0.5 * (3 + 5) * 0.5 + 0.5 * (4 + 6) * 0.5));
  CHECK(g.deriv({2.0, 0.5}, 0) == doctest::Approx(1.0));
  CHECK(g.inside(std::vector<double>{2.0, 0.0}));
  CHECK_FALSE(g.inside(std::vector<double>{3.5, 0.0}));
  auto back = GridFn::from_json(g.to_json());
  CHECK(back.values() == g.values());
  CHECK(back.names() == g.names());
  CHECK_THROWS(GridFn({{0.0, 0.0}}, {1.0, 2.0}));
  CHECK_THROWS(GridFn({{0.0, 1.0}}, {1.0, NAN}));
  auto p = std::filesystem::temp_directory_path() / "revid_grid.csv";
  g.write_csv(p.string());
  CHECK(std::filesystem::file_size(p) > 0);
}

TEST_CASE("quantile helpers") {
  std::vector<double> x{4, 1, 3, 2};
  CHECK(quantile(x, 0.5) == doctest::Approx(2.5));
  CHECK(quantile(x, 0.0) == 1.0);
  CHECK(quantile(x, 1.0) == 4.0);
  auto g = quantile_grid(x, 3, 0.0, 1.0);
  REQUIRE(g.size() == 3);
  CHECK(g[1] == doctest::Approx(2.5));
}
