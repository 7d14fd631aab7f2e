#include "revid/norm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <fmt/format.h>

#include "revid/kernel.hpp"

namespace revid {

std::string to_string(ScaleMethod m) {
  switch (m) {
    case ScaleMethod::EtaVariance: return "eta_variance";
    case ScaleMethod::ElasticityConstancy: return "elasticity_constancy";
    case ScaleMethod::ReturnsConstancy: return "returns_constancy";
  }
  return "?";
}

ScaleMethod parse_scale_method(const std::string& s) {
  if (s == "eta_variance") return ScaleMethod::EtaVariance;
  if (s == "elasticity_constancy") return ScaleMethod::ElasticityConstancy;
  if (s == "returns_constancy") return ScaleMethod::ReturnsConstancy;
  throw std::invalid_argument(fmt::format("unknown scale method '{}'", s));
}

bool Region::contains(double m, double k, double l) const {
  const double x[3] = {m, k, l};
  for (int d = 0; d < 3; ++d)
    if (x[d] < lo[d] || x[d] > hi[d]) return false;
  return true;
}

nlohmann::json Region::to_json() const { return {{"lo", lo}, {"hi", hi}}; }

Region quantile_region(const PanelPair& pr, double q_lo, double q_hi) {
  if (!(q_lo >= 0.0 && q_lo < q_hi && q_hi <= 1.0)) throw std::invalid_argument("region quantiles need 0 <= lo < hi <= 1");
  Region r;
  for (const auto* col : {&pr.m, &pr.k, &pr.l}) {
    auto q = quantiles(*col, {q_lo, q_hi});
    r.lo.push_back(q[0]);
    r.hi.push_back(q[1]);
  }
  return r;
}

std::vector<std::vector<double>> region_points(const Region& r, std::size_t n) {
  if (r.lo.size() != 3 || r.hi.size() != 3) throw std::invalid_argument("region needs bounds for m, k and l");
  if (n == 0) throw std::invalid_argument("empty region lattice");
  std::vector<std::vector<double>> out;
  auto at = [&](int d, std::size_t i) { return n == 1 ? 0.5 * (r.lo[d] + r.hi[d]) : r.lo[d] + (r.hi[d] - r.lo[d]) * i / (n - 1.0); };
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < n; ++c) out.push_back({at(0, a), at(1, b), at(2, c)});
  return out;
}

nlohmann::json ScaleLink::to_json() const {
  nlohmann::json j{{"method", to_string(method)},
                   {"b_ratio", b_ratio},
                   {"region", region.to_json()},
                   {"n_points", n_points},
                   {"assumption_dependent", assumption_dependent}};
  if (b_t > 0.0) j["b_t"] = b_t;
  if (method == ScaleMethod::ElasticityConstancy) j["input"] = input;
  return j;
}

namespace {

double variance(const std::vector<double>& x) {
  double s = 0, s2 = 0, n = 0;
  for (double v : x)
    if (std::isfinite(v)) {
      s += v;
      s2 += v * v;
      n += 1;
    }
  if (n < 2) return 0.0;
  double m = s / n;
  return (s2 - n * m * m) / (n - 1);
}

std::size_t input_axis(const std::string& q) {
  if (q == "m") return 0;
  if (q == "k") return 1;
  if (q == "l") return 2;
  throw std::invalid_argument(fmt::format("unknown input '{}' (expected m, k or l)", q));
}

std::vector<std::vector<double>> points_inside(const Region& region, std::initializer_list<const GridFn*> fns) {
  std::vector<std::vector<double>> out;
  for (auto& x : region_points(region)) {
    bool ok = true;
    for (const GridFn* f : fns) ok = ok && f->inside(x);
    if (ok) out.push_back(std::move(x));
  }
  if (out.empty()) throw std::invalid_argument("empty region: no region point lies inside the support");
  return out;
}

double elasticity_sum(const GridFn& f, const std::vector<double>& x) {
  return f.deriv(x, 0) + f.deriv(x, 1) + f.deriv(x, 2);
}

void scale_grid(GridFn& f, double b) {
  if (f.size() == 0) return;
  for (double& v : f.values()) v /= b;
  for (std::size_t d = 0; d < f.dims(); ++d)
    if (f.has_deriv(d)) {
      auto dv = f.deriv_values(d);
      for (double& v : dv) v /= b;
      f.set_deriv(d, std::move(dv));
    }
}

void scale_vec(std::vector<double>& v, double b) {
  for (double& x : v) x /= b;
}

}  // namespace

ScaleLink scale_ratio(const PeriodResult& rt, const PeriodResult& rt1, ScaleMethod method, const Region& region,
                      const std::string& input) {
  ScaleLink out;
  out.method = method;
  out.region = region;
  out.input = input;
  if (method == ScaleMethod::EtaVariance) {
    // all firms: trimming to the hull truncates the innovation distribution
    double v0 = variance(rt.s2.eta), v1 = variance(rt1.s2.eta);
    if (!(v0 > 0.0) || !(v1 > 0.0)) throw std::invalid_argument("scale_ratio: productivity innovations have zero variance");
    // identified eta carries the period scale, var(eta_t) = b_t^2 var(eta*_t)
    out.b_ratio = std::sqrt(v1 / v0);
    out.n_points = rt.s2.eta.size() + rt1.s2.eta.size();
    return out;
  }
  auto pts = points_inside(region, {&rt.s3.f, &rt1.s3.f});
  const std::size_t q = method == ScaleMethod::ElasticityConstancy ? input_axis(input) : 0;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& x : pts) {
    double a = method == ScaleMethod::ElasticityConstancy ? rt.s3.f.deriv(x, q) : elasticity_sum(rt.s3.f, x);
    double b = method == ScaleMethod::ElasticityConstancy ? rt1.s3.f.deriv(x, q) : elasticity_sum(rt1.s3.f, x);
    if (a == 0.0 || !std::isfinite(a) || !std::isfinite(b)) continue;
    sum += b / a;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("scale_ratio: no region point with a nonzero elasticity");
  out.b_ratio = sum / static_cast<double>(n);
  out.n_points = n;
  if (!(out.b_ratio > 0.0)) throw std::runtime_error(fmt::format("scale_ratio: nonpositive ratio {}", out.b_ratio));
  return out;
}

ScaleLink scale_from_crs(const PeriodResult& r, const Region& region) {
  auto pts = points_inside(region, {&r.s3.f});
  double sum = 0.0;
  for (const auto& x : pts) sum += elasticity_sum(r.s3.f, x);
  ScaleLink out;
  out.method = ScaleMethod::ReturnsConstancy;
  out.region = region;
  out.n_points = pts.size();
  out.b_t = sum / static_cast<double>(pts.size());
  out.b_ratio = 1.0;
  out.assumption_dependent = true;
  if (!(out.b_t > 0.0))
    throw std::runtime_error(fmt::format("elasticity sum on the region is nonpositive ({:.4g})", out.b_t));
  return out;
}

void apply_scale(PeriodResult& r, double b) {
  if (!(b > 0.0) || !std::isfinite(b)) throw std::invalid_argument("apply_scale needs a positive finite scale");
  auto& s2 = r.s2;
  scale_grid(s2.Minv, b);
  scale_grid(s2.dhbar, b);
  scale_grid(s2.hbar, b);
  scale_vec(s2.omega, b);
  scale_vec(s2.eta, b);
  scale_vec(s2.eta_sorted, b);
  scale_vec(s2.c0, b);
  scale_vec(s2.c2, b);
  s2.dh_anchor /= b;
  s2.theta_l_hat /= b;
  auto& s3 = r.s3;
  for (auto* v : {&s3.markup, &s3.el_m, &s3.el_k, &s3.el_l, &s3.y}) scale_vec(*v, b);
  for (auto* f : {&s3.markup_fn, &s3.el_m_fn, &s3.el_k_fn, &s3.el_l_fn, &s3.f}) scale_grid(*f, b);
  for (std::size_t i = 0; i < s3.p.size(); ++i) s3.p[i] = r.s1.rbar[i] - s3.y[i];
  if (r.iv) {
    r.iv->theta_l_hat /= b;
    r.iv->theta_l_ols /= b;
  }
}

std::vector<double> laspeyres(const std::vector<std::vector<double>>& logp, const std::vector<double>& logy0) {
  if (logp.empty()) throw std::invalid_argument("laspeyres: no periods");
  const std::size_t n = logy0.size();
  if (n == 0) throw std::invalid_argument("laspeyres: empty product set");
  for (const auto& p : logp)
    if (p.size() != n) throw std::invalid_argument("laspeyres: product sets differ across periods");
  // log-sum-exp with a common shift
  double shift = -std::numeric_limits<double>::infinity();
  for (const auto& p : logp)
    for (std::size_t i = 0; i < n; ++i) shift = std::max(shift, p[i] + logy0[i]);
  auto total = [&](const std::vector<double>& p) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::exp(p[i] + logy0[i] - shift);
    return s;
  };
  const double base = total(logp[0]);
  std::vector<double> out;
  for (const auto& p : logp) out.push_back(total(p) / base);
  return out;
}

std::map<int, double> load_price_index(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open price index file '{}'", path));
  std::map<int, double> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    double t = 0.0, v = 0.0;
    if (!(ss >> t >> v)) {
      if (lineno == 1) continue;  // header
      throw std::runtime_error(fmt::format("{}:{}: expected 'period,index'", path, lineno));
    }
    if (!(v > 0.0)) throw std::runtime_error(fmt::format("{}:{}: price index must be positive", path, lineno));
    out[static_cast<int>(std::lround(t))] = v;
  }
  if (out.empty()) throw std::runtime_error(fmt::format("price index file '{}' has no rows", path));
  return out;
}

void save_price_index(const std::map<int, double>& idx, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path));
  out << "period,index\n";
  for (const auto& [t, v] : idx) out << t << ',' << fmt::format("{:.17g}", v) << '\n';
}

nlohmann::json LocationLink::to_json() const {
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  return {{"t", t},
          {"t1", t1},
          {"P_star", {P_star_t, P_star_t1}},
          {"P_hat", {P_hat_t, P_hat_t1}},
          {"a12_diff", a12_diff},
          {"a1_diff", a1_diff},
          {"a2_diff", a2_diff},
          {"xbar", xbar},
          {"firms", firm_id.size()},
          {"mean_y_growth", mean(y_growth)},
          {"mean_tfp_growth", mean(tfp_growth)}};
}

std::vector<LocationLink> location_links(const std::vector<PeriodResult>& periods,
                                         const std::vector<PanelPair>& pairs,
                                         const std::map<int, double>& P_star, const std::vector<double>& xbar) {
  const std::size_t T = periods.size();
  if (T < 2 || pairs.size() != T) throw std::invalid_argument("location_links needs at least two periods with their panels");
  if (xbar.size() != 3) throw std::invalid_argument("xbar needs (m, k, l)");
  std::vector<std::unordered_map<std::string, std::size_t>> pos(T);
  for (std::size_t j = 0; j < T; ++j)
    for (std::size_t i = 0; i < pairs[j].size(); ++i) pos[j][pairs[j].firm_id[i]] = i;
  for (std::size_t j = 0; j < T; ++j) {
    if (!P_star.contains(periods[j].t))
      throw std::invalid_argument(fmt::format("price index has no entry for period {}", periods[j].t));
    if (!periods[j].s3.f.inside(xbar))
      throw std::invalid_argument(fmt::format("xbar lies outside the support of period {}", periods[j].t));
  }

  // balanced product set
  std::vector<std::string> prod;
  for (const auto& id : pairs[0].firm_id) {
    bool all = true;
    for (std::size_t j = 1; j < T && all; ++j) all = pos[j].contains(id);
    if (all) prod.push_back(id);
  }
  if (prod.empty()) throw std::invalid_argument("no firm is present in every period; product sets mismatched");
  std::vector<std::vector<double>> logp(T, std::vector<double>(prod.size()));
  std::vector<double> logy0(prod.size());
  for (std::size_t i = 0; i < prod.size(); ++i) {
    logy0[i] = periods[0].s3.y[pos[0].at(prod[i])];
    for (std::size_t j = 0; j < T; ++j) logp[j][i] = periods[j].s3.p[pos[j].at(prod[i])];
  }
  const auto P_hat = laspeyres(logp, logy0);
  const double P0 = P_star.at(periods[0].t);
  // a12_t - a12_0 = ln P*_t - ln P_hat_t with both indexes on the same base
  std::vector<double> a12(T);
  for (std::size_t j = 0; j < T; ++j) a12[j] = std::log(P_star.at(periods[j].t) / P0) - std::log(P_hat[j]);

  std::vector<LocationLink> out;
  for (std::size_t j = 0; j + 1 < T; ++j) {
    LocationLink L;
    const auto &A = periods[j], &B = periods[j + 1];
    L.t = A.t;
    L.t1 = B.t;
    L.P_star_t = P_star.at(A.t) / P0;
    L.P_star_t1 = P_star.at(B.t) / P0;
    L.P_hat_t = P_hat[j];
    L.P_hat_t1 = P_hat[j + 1];
    L.a12_diff = a12[j + 1] - a12[j];
    L.a1_diff = B.s3.f(xbar) - A.s3.f(xbar);
    L.a2_diff = L.a12_diff - L.a1_diff;
    L.xbar = xbar;
    for (std::size_t i = 0; i < pairs[j].size(); ++i) {
      const auto& id = pairs[j].firm_id[i];
      auto it = pos[j + 1].find(id);
      if (it == pos[j + 1].end()) continue;
      const std::size_t k = it->second;
      L.firm_id.push_back(id);
      L.rbar_growth.push_back(B.s1.rbar[k] - A.s1.rbar[i]);
      L.y_growth.push_back(B.s3.y[k] - A.s3.y[i] - L.a12_diff);
      L.p_growth.push_back(B.s3.p[k] - A.s3.p[i] + L.a12_diff);
      L.tfp_growth.push_back(B.s2.omega[k] - A.s2.omega[i] - L.a2_diff);
    }
    out.push_back(std::move(L));
  }
  return out;
}

std::vector<double> pooled_median_inputs(const std::vector<PanelPair>& pairs) {
  std::vector<double> m, k, l;
  for (const auto& p : pairs) {
    m.insert(m.end(), p.m.begin(), p.m.end());
    k.insert(k.end(), p.k.begin(), p.k.end());
    l.insert(l.end(), p.l.begin(), p.l.end());
  }
  if (m.empty()) throw std::invalid_argument("pooled_median_inputs: no rows");
  return {quantile(m, 0.5), quantile(k, 0.5), quantile(l, 0.5)};
}

std::map<int, double> true_price_index(const FirmPanel& panel, const std::vector<int>& periods) {
  if (!panel.has_truth()) throw std::invalid_argument("true_price_index needs a panel with latent truth");
  if (periods.empty()) throw std::invalid_argument("true_price_index: no periods");
  std::vector<std::unordered_map<std::string, const FirmRecord*>> at(periods.size());
  for (const auto& r : panel.records())
    for (std::size_t j = 0; j < periods.size(); ++j)
      if (r.period == periods[j]) at[j][r.firm_id] = &r;
  std::vector<std::string> prod;
  for (const auto& [id, rec] : at[0]) {
    bool all = true;
    for (std::size_t j = 1; j < periods.size() && all; ++j) all = at[j].contains(id);
    if (all) prod.push_back(id);
  }
  std::sort(prod.begin(), prod.end());
  if (prod.empty()) throw std::invalid_argument("true_price_index: no firm is present in every period");
  std::vector<std::vector<double>> logp(periods.size(), std::vector<double>(prod.size()));
  std::vector<double> logy0(prod.size());
  for (std::size_t i = 0; i < prod.size(); ++i) {
    logy0[i] = at[0].at(prod[i])->truth.y;
    for (std::size_t j = 0; j < periods.size(); ++j) logp[j][i] = at[j].at(prod[i])->truth.p;
  }
  auto P = laspeyres(logp, logy0);
  std::map<int, double> out;
  for (std::size_t j = 0; j < periods.size(); ++j) out[periods[j]] = P[j];
  return out;
}

}  // namespace revid
