#include "revid/demand.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <boost/math/tools/roots.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "revid/kernel.hpp"

namespace revid {

namespace {

std::size_t segment(const std::vector<double>& y, double yy) {
  auto it = std::upper_bound(y.begin(), y.end(), yy);
  std::size_t j = it == y.begin() ? 0 : static_cast<std::size_t>(it - y.begin()) - 1;
  return std::min(j, y.size() - 2);
}

double log_sum_exp(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace

void RevenueCurve::check() const {
  if (y.size() < 2 || y.size() != r.size()) throw std::invalid_argument("revenue curve needs at least two nodes");
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (!std::isfinite(y[j]) || !std::isfinite(r[j])) throw std::invalid_argument("revenue curve has non-finite nodes");
    if (j > 0 && !(y[j] > y[j - 1])) throw std::invalid_argument("revenue curve nodes must increase in y");
  }
}

double RevenueCurve::operator()(double yy, bool* extrapolated) const {
  if (extrapolated) *extrapolated = yy < y.front() || yy > y.back();
  std::size_t j = segment(y, yy);
  double s = (r[j + 1] - r[j]) / (y[j + 1] - y[j]);
  return r[j] + s * (yy - y[j]);
}

double RevenueCurve::slope(double yy) const {
  std::size_t j = segment(y, yy);
  return (r[j + 1] - r[j]) / (y[j + 1] - y[j]);
}

double RevenueCurve::integral_exp(double a, double b, double shift) const {
  if (a == b) return 0.0;
  if (a > b) return -integral_exp(b, a, shift);
  std::vector<double> cuts{a};
  for (double v : y)
    if (v > a && v < b) cuts.push_back(v);
  cuts.push_back(b);
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    double u1 = cuts[i], u2 = cuts[i + 1];
    double r1 = (*this)(u1) - shift, d = (*this)(u2) - shift - r1;
    double f = std::abs(d) < 1e-300 ? 1.0 : std::expm1(d) / d;
    total += std::exp(r1) * (u2 - u1) * f;
  }
  return total;
}

HsaSystem::HsaSystem(std::vector<double> z_nodes, std::vector<RevenueCurve> curves, bool z_discrete,
                     std::vector<double> log_Y0, std::vector<double> z0)
    : z_nodes_(std::move(z_nodes)),
      curves_(std::move(curves)),
      z_discrete_(z_discrete),
      log_Y0_(std::move(log_Y0)),
      z0_(std::move(z0)) {
  if (z_nodes_.empty() || z_nodes_.size() != curves_.size())
    throw std::invalid_argument("HsaSystem: one revenue curve per shifter node required");
  for (std::size_t j = 1; j < z_nodes_.size(); ++j)
    if (!(z_nodes_[j] > z_nodes_[j - 1])) throw std::invalid_argument("HsaSystem: shifter nodes must increase");
  if (log_Y0_.empty() || log_Y0_.size() != z0_.size())
    throw std::invalid_argument("HsaSystem: data point needs matching quantity and shifter vectors");
  y_min_ = std::numeric_limits<double>::infinity();
  y_max_ = -y_min_;
  for (const auto& c : curves_) {
    c.check();
    y_min_ = std::min(y_min_, c.y.front());
    y_max_ = std::max(y_max_, c.y.back());
  }
  std::vector<double> rr(log_Y0_.size());
  for (std::size_t i = 0; i < rr.size(); ++i) {
    if (!std::isfinite(log_Y0_[i])) throw std::invalid_argument("HsaSystem: non-finite data-point quantity");
    rr[i] = curve_at(z0_[i])(log_Y0_[i]);
  }
  log_Phi_ = log_sum_exp(rr);
  check_share_conditions();
}

void HsaSystem::set_firm_ids(std::vector<std::string> ids) {
  if (!ids.empty() && ids.size() != log_Y0_.size())
    throw std::invalid_argument("HsaSystem: one firm id per data-point firm required");
  firm_ids_ = std::move(ids);
}

std::size_t HsaSystem::level_index(double z) const {
  for (std::size_t j = 0; j < z_nodes_.size(); ++j)
    if (std::abs(z_nodes_[j] - z) <= 1e-9 * std::max(1.0, std::abs(z))) return j;
  throw std::invalid_argument(fmt::format("shifter value {} is not an identified level", z));
}

RevenueCurve HsaSystem::curve_at(double z) const {
  if (z_discrete_ || curves_.size() == 1) return curves_[z_discrete_ ? level_index(z) : 0];
  double zc = std::clamp(z, z_nodes_.front(), z_nodes_.back());
  std::size_t j = segment(z_nodes_, zc);
  double w = (zc - z_nodes_[j]) / (z_nodes_[j + 1] - z_nodes_[j]);
  const auto &a = curves_[j], &b = curves_[j + 1];
  RevenueCurve out;
  std::merge(a.y.begin(), a.y.end(), b.y.begin(), b.y.end(), std::back_inserter(out.y));
  out.y.erase(std::unique(out.y.begin(), out.y.end()), out.y.end());
  for (double v : out.y) out.r.push_back((1.0 - w) * a(v) + w * b(v));
  return out;
}

double HsaSystem::log_share(double lnY, double z, bool* extrapolated) const {
  return curve_at(z)(lnY, extrapolated) - log_Phi_;
}

double HsaSystem::share(double Y, double z) const {
  if (!(Y > 0.0)) throw std::invalid_argument("share needs a positive quantity");
  return std::exp(log_share(std::log(Y), z));
}

void HsaSystem::check_share_conditions() {
  violations_.clear();
  for (std::size_t j = 0; j < curves_.size(); ++j) {
    const auto& c = curves_[j];
    for (std::size_t s = 0; s + 1 < c.y.size(); ++s) {
      double e = (c.r[s + 1] - c.r[s]) / (c.y[s + 1] - c.y[s]);
      // shares increase in quantity and rise less than proportionally
      if (!(e > 0.0 && e < 1.0)) violations_.push_back({z_nodes_[j], 0.5 * (c.y[s] + c.y[s + 1]), e});
    }
  }
  if (!violations_.empty())
    spdlog::warn("share conditions fail at {} curve segments (first: z = {:.4g}, ln Y = {:.4g}, elasticity {:.4g})",
                 violations_.size(), violations_[0].z, violations_[0].y, violations_[0].elasticity);
}

nlohmann::json HsaSystem::to_json() const {
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : curves_) cs.push_back({{"y", c.y}, {"r", c.r}});
  nlohmann::json v = nlohmann::json::array();
  for (const auto& x : violations_) v.push_back({{"z", x.z}, {"y", x.y}, {"elasticity", x.elasticity}});
  return {{"z_nodes", z_nodes_}, {"z_discrete", z_discrete_}, {"curves", cs},   {"log_Phi", log_Phi_},
          {"log_Y0", log_Y0_},   {"z0", z0_},                 {"firm_id", firm_ids_}, {"violations", v}};
}

HsaSystem HsaSystem::from_json(const nlohmann::json& j) {
  std::vector<RevenueCurve> cs;
  for (const auto& c : j.at("curves")) cs.push_back({c.at("y").get<std::vector<double>>(), c.at("r").get<std::vector<double>>()});
  HsaSystem s(j.at("z_nodes").get<std::vector<double>>(), std::move(cs), j.at("z_discrete").get<bool>(),
              j.at("log_Y0").get<std::vector<double>>(), j.at("z0").get<std::vector<double>>());
  if (j.contains("firm_id")) s.set_firm_ids(j.at("firm_id").get<std::vector<std::string>>());
  return s;
}

namespace {

RevenueCurve invert_fit(const std::vector<double>& rgrid, const std::vector<double>& yfit, double z) {
  RevenueCurve c;
  for (std::size_t j = 0; j < rgrid.size(); ++j) {
    if (j > 0 && !(yfit[j] > yfit[j - 1]))
      throw std::runtime_error(fmt::format(
          "identified quantity is not increasing in revenue at z = {:.4g}, rbar = {:.4g}; cannot invert", z, rgrid[j]));
    c.y.push_back(yfit[j]);
    c.r.push_back(rgrid[j]);
  }
  return c;
}

}  // namespace

HsaSystem build_hsa(const PeriodResult& res, const PanelPair& pr, const HsaBuildOptions& opt) {
  const auto& rbar = res.s1.rbar;
  const auto& y = res.s3.y;
  if (rbar.size() != pr.size() || y.size() != pr.size()) throw std::invalid_argument("build_hsa: result and panel sizes differ");
  std::vector<double> zn;
  std::vector<RevenueCurve> curves;
  if (pr.z_discrete) {
    for (double zl : pr.z_levels) {
      std::vector<double> rr, yy;
      for (std::size_t i = 0; i < pr.size(); ++i)
        if (pr.z[i] == zl) {
          rr.push_back(rbar[i]);
          yy.push_back(y[i]);
        }
      if (rr.size() < 10) continue;
      auto rgrid = quantile_grid(rr, opt.nodes, opt.q_lo, opt.q_hi);
      auto bw = select_bandwidth({rr}, BandwidthRule::Silverman, 1);
      auto fit = cond_mean(yy, {rr}, {rgrid}, {bw[0] * opt.bw_scale}, {"rbar"});
      zn.push_back(zl);
      curves.push_back(invert_fit(rgrid, fit.values(), zl));
    }
  } else {
    auto rgrid = quantile_grid(rbar, opt.nodes, opt.q_lo, opt.q_hi);
    auto zgrid = quantile_grid(pr.z, opt.z_nodes, 0.05, 0.95);
    auto bw = select_bandwidth({rbar, pr.z}, BandwidthRule::Silverman, 2);
    auto fit = cond_mean(y, {rbar, pr.z}, {rgrid, zgrid}, {bw[0] * opt.bw_scale, bw[1] * opt.bw_scale}, {"rbar", "z"});
    for (std::size_t e = 0; e < zgrid.size(); ++e) {
      std::vector<double> yf(rgrid.size());
      for (std::size_t a = 0; a < rgrid.size(); ++a) yf[a] = fit.values()[a * zgrid.size() + e];
      zn.push_back(zgrid[e]);
      curves.push_back(invert_fit(rgrid, yf, zgrid[e]));
    }
  }
  if (curves.empty()) throw std::runtime_error("build_hsa: no shifter level has enough firms");
  std::vector<double> z0(pr.z);
  if (pr.z_discrete)
    for (double v : z0)
      if (std::find(zn.begin(), zn.end(), v) == zn.end())
        throw std::runtime_error(fmt::format("build_hsa: too few firms to fit shifter level {}", v));
  HsaSystem sys(std::move(zn), std::move(curves), pr.z_discrete, y, std::move(z0));
  sys.set_firm_ids(pr.firm_id);
  return sys;
}

namespace {

struct FirmCurves {
  std::vector<RevenueCurve> own;  // continuous z
  std::vector<const RevenueCurve*> ptr;
};

FirmCurves firm_curves(const HsaSystem& sys, const std::vector<double>& z) {
  FirmCurves fc;
  fc.ptr.resize(z.size());
  if (!sys.z_discrete() && sys.curves().size() > 1) {
    fc.own.reserve(z.size());
    for (double v : z) fc.own.push_back(sys.curve_at(v));
    for (std::size_t i = 0; i < z.size(); ++i) fc.ptr[i] = &fc.own[i];
    return fc;
  }
  const auto& zn = sys.z_nodes();
  for (std::size_t i = 0; i < z.size(); ++i) {
    std::size_t j = 0;
    if (sys.z_discrete()) {
      while (j < zn.size() && std::abs(zn[j] - z[i]) > 1e-9 * std::max(1.0, std::abs(z[i]))) ++j;
      if (j == zn.size()) throw std::invalid_argument(fmt::format("shifter value {} is not an identified level", z[i]));
    }
    fc.ptr[i] = &sys.curves()[j];
  }
  return fc;
}

void check_inputs(const std::vector<double>& Y, const std::vector<double>& z) {
  if (Y.empty() || Y.size() != z.size()) throw std::invalid_argument("quantity and shifter vectors must match and be non-empty");
  for (double v : Y)
    if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("quantities must be positive and finite");
}

}  // namespace

AggregatorResult solve_aggregator(const HsaSystem& sys, const std::vector<double>& Y, const std::vector<double>& z,
                                  int max_doublings) {
  check_inputs(Y, z);
  auto fc = firm_curves(sys, z);
  std::vector<double> lnY(Y.size());
  for (std::size_t i = 0; i < Y.size(); ++i) lnY[i] = std::log(Y[i]);
  std::vector<double> buf(Y.size());
  // log of the share sum; strictly decreasing in a = ln A
  auto h = [&](double a) {
    for (std::size_t i = 0; i < Y.size(); ++i) buf[i] = (*fc.ptr[i])(lnY[i] - a);
    return log_sum_exp(buf) - sys.log_Phi();
  };
  double lo = *std::min_element(lnY.begin(), lnY.end()) - sys.y_max();
  double hi = *std::max_element(lnY.begin(), lnY.end()) - sys.y_min();
  if (!(hi > lo)) hi = lo + 1.0;
  double hlo = h(lo), hhi = h(hi);
  int k = 0;
  for (; k < max_doublings && !(hlo >= 0.0 && hhi <= 0.0); ++k) {
    double w = hi - lo;
    if (hlo < 0.0) {
      lo -= w;
      hlo = h(lo);
    }
    if (hhi > 0.0) {
      hi += w;
      hhi = h(hi);
    }
  }
  if (!(hlo >= 0.0 && hhi <= 0.0))
    throw std::runtime_error(fmt::format("aggregator bracket not found after {} doublings", max_doublings));
  AggregatorResult out;
  double a;
  if (hlo == 0.0) {
    a = lo;
  } else if (hhi == 0.0) {
    a = hi;
  } else {
    boost::uintmax_t iters = 200;
    auto tol = [](double x, double y) { return std::abs(x - y) <= 1e-14 * std::max(1.0, std::abs(x)); };
    auto root = boost::math::tools::toms748_solve(h, lo, hi, hlo, hhi, tol, iters);
    a = 0.5 * (root.first + root.second);
    out.iterations = static_cast<std::size_t>(iters);
  }
  out.log_A = a;
  out.A = std::exp(a);
  for (std::size_t i = 0; i < Y.size(); ++i) {
    double u = lnY[i] - a;
    if (u < fc.ptr[i]->y.front() || u > fc.ptr[i]->y.back()) ++out.extrapolated;
  }
  return out;
}

std::vector<double> inverse_demand_all(const HsaSystem& sys, const std::vector<double>& Y,
                                       const std::vector<double>& z, const AggregatorResult& agg) {
  check_inputs(Y, z);
  auto fc = firm_curves(sys, z);
  std::vector<double> P(Y.size());
  for (std::size_t i = 0; i < Y.size(); ++i) {
    double lnY = std::log(Y[i]);
    // Phi / Y * S(Y / A) with S = exp(r - ln Phi)
    P[i] = std::exp((*fc.ptr[i])(lnY - agg.log_A) - lnY);
  }
  return P;
}

double inverse_demand(const HsaSystem& sys, const std::vector<double>& Y, const std::vector<double>& z,
                      std::size_t i) {
  if (i >= Y.size()) throw std::out_of_range("inverse_demand: firm index out of range");
  auto agg = solve_aggregator(sys, Y, z);
  return inverse_demand_all(sys, Y, z, agg)[i];
}

double log_utility(const HsaSystem& sys, const std::vector<double>& Y, const std::vector<double>& z,
                   const AggregatorResult& agg) {
  check_inputs(Y, z);
  if (Y.size() != sys.log_Y0().size())
    throw std::invalid_argument("utility needs one quantity per firm of the data point");
  auto fc = firm_curves(sys, z);
  double s = agg.log_A;
  for (std::size_t i = 0; i < Y.size(); ++i)
    s += fc.ptr[i]->integral_exp(sys.log_Y0()[i], std::log(Y[i]) - agg.log_A, sys.log_Phi());
  return s;
}

double log_utility(const HsaSystem& sys, const std::vector<double>& Y, const std::vector<double>& z) {
  return log_utility(sys, Y, z, solve_aggregator(sys, Y, z));
}

}  // namespace revid
