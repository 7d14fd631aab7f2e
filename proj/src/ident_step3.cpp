#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "ident_internal.hpp"
#include "revid/ident.hpp"

namespace revid {

using namespace detail;

Step3Result step3(const PanelPair& pr, const Step1Result& s1, const ControlResult& s2, const IdentGrid& g,
                  const IdentOptions& opt) {
  (void)opt;
  const std::size_t n = pr.size();
  if (s1.rbar.size() != n || s2.omega.size() != n) throw std::invalid_argument("step3: result sizes do not match the panel");
  const GridFn& phi = s1.phi;
  const GridFn& M = s2.Minv;
  if (phi.axes() != M.axes()) throw std::invalid_argument("step3: step-1 and step-2 grids differ");

  Step3Result out;
  std::vector<double> lp(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(pr.mx[i] > 0.0)) throw std::invalid_argument("step3: material expenditure must be positive");
    lp[i] = std::log(pr.mx[i]) - pr.m[i];
  }
  out.p_m = quantile(lp, 0.5);

  // node fields
  const std::size_t nn = M.size();
  const std::size_t nq = g.z_discrete ? 3 : 4;
  std::vector<double> mu(nn), el[3];
  for (auto& e : el) e.assign(nn, 0.0);
  std::vector<unsigned char> good(nn, 0);
  for (std::size_t k = 0; k < nn; ++k) {
    auto x = M.node(k);
    double share = std::exp(out.p_m + x[0] - phi.values()[k]);
    double den = phi.deriv_values(0)[k] - share;
    if (!(den > 0.0)) {
      ++out.flagged_nodes;
      continue;
    }
    good[k] = 1;
    mu[k] = M.deriv_values(0)[k] / den;
    for (std::size_t q = 0; q < 3; ++q) el[q][k] = mu[k] * phi.deriv_values(q)[k] - M.deriv_values(q)[k];
  }
  if (out.flagged_nodes > 0)
    spdlog::warn("markup denominator nonpositive at {} of {} grid nodes; filled from neighbours", out.flagged_nodes, nn);
  fill_unusable({g.m.size(), g.k.size(), g.l.size(), g.z.size()}, {true, true, true, !g.z_discrete}, good,
                {&mu, &el[0], &el[1], &el[2]});
  const auto axes = g.current_axes();
  const std::vector<std::string> names{"m", "k", "l", "z"};
  std::vector<double> bad(nn);
  for (std::size_t k = 0; k < nn; ++k) bad[k] = good[k] ? 0.0 : 1.0;
  const GridFn bad_fn(axes, std::move(bad), names);
  out.markup_fn = GridFn(axes, mu, names);
  out.el_m_fn = GridFn(axes, el[0], names);
  out.el_k_fn = GridFn(axes, el[1], names);
  out.el_l_fn = GridFn(axes, el[2], names);
  // revenue elasticity of material at fixed productivity
  std::vector<double> rev(nn);
  for (std::size_t k = 0; k < nn; ++k) rev[k] = el[0][k] / mu[k];
  const GridFn rev_fn(axes, std::move(rev), names);

  // f: elasticities averaged over z (firm-count weights for discrete z), integrated from (m*_0, k*, l*)
  std::vector<double> wz(g.z.size(), 1.0);
  if (g.z_discrete) {
    std::fill(wz.begin(), wz.end(), 0.0);
    for (double z : pr.z) wz[axis_index(g.z, z)] += 1.0;
  }
  double wsum = 0.0;
  for (double w : wz) wsum += w;
  GridFn fshape(std::vector<std::vector<double>>{g.m, g.k, g.l}, {"m", "k", "l"});
  std::vector<double> fe[3];
  for (auto& e : fe) e.assign(fshape.size(), 0.0);
  const std::size_t nz = g.z.size();
  for (std::size_t k = 0; k < nn; ++k) {
    std::size_t kf = k / nz, zi = k % nz;
    for (std::size_t q = 0; q < 3; ++q) fe[q][kf] += wz[zi] / wsum * el[q][k];
  }
  std::vector<std::size_t> origin{axis_index(g.m, g.np.m0), axis_index(g.k, g.np.k), axis_index(g.l, g.np.l)};
  auto fv = integrate_on_grid(fshape, {&fe[0], &fe[1], &fe[2]}, origin, {2, 1, 0});
  out.f = GridFn({g.m, g.k, g.l}, std::move(fv), {"m", "k", "l"});
  for (std::size_t q = 0; q < 3; ++q) out.f.set_deriv(q, fe[q]);

  // per firm
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.markup.assign(n, nan);
  out.el_m.assign(n, nan);
  out.el_k.assign(n, nan);
  out.el_l.assign(n, nan);
  out.share.resize(n);
  out.y.resize(n);
  out.p.resize(n);
  out.dlw_markup.assign(n, nan);
  out.flag_denominator.assign(n, 0);
  std::vector<double> dlw_in;
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> x{pr.m[i], pr.k[i], pr.l[i], pr.z[i]};
    out.share[i] = pr.mx[i] / std::exp(s1.rbar[i]);
    double dphi[4], dM[4];
    for (std::size_t q = 0; q < nq; ++q) {
      dphi[q] = phi.deriv(x, q);
      dM[q] = M.deriv(x, q);
    }
    double den = dphi[0] - out.share[i];
    // firms interpolated from a node with a nonpositive denominator are flagged as well
    out.flag_denominator[i] = !(den > 0.0) || bad_fn(x) > 0.0;
    if (den > 0.0) {
      double m = dM[0] / den;
      out.markup[i] = m;
      out.el_m[i] = m * dphi[0] - dM[0];
      out.el_k[i] = m * dphi[1] - dM[1];
      out.el_l[i] = m * dphi[2] - dM[2];
    }
    out.y[i] = eval_extrap(out.f, std::span<const double>(x.data(), 3)) + s2.omega[i];
    out.p[i] = s1.rbar[i] - out.y[i];
    out.dlw_markup[i] = rev_fn(x) / out.share[i];
    if (s2.inside[i] && !out.flag_denominator[i]) dlw_in.push_back(out.dlw_markup[i]);
  }
  out.dlw_markup_median = dlw_in.empty() ? nan : quantile(dlw_in, 0.5);
  return out;
}

PeriodResult identify_period(const PanelPair& pr, const IdentOptions& opt) {
  PeriodResult r;
  r.t = pr.t;
  r.grid = make_grid(pr, opt);
  r.s1 = step1(pr, r.grid, opt);
  CondCdf cdf = make_cdf(pr, opt.cdf);
  r.cdf_bw = cdf.bandwidths();
  auto anchors = rank_anchors(cdf, r.grid, opt);
  spdlog::info("period {}: anchor {} at ({:.3f}, {:.3f}, {:.3f}, {:.3f}), score {:.4g}, {} valid", pr.t,
               anchors.front().name(), anchors.front().point[0], anchors.front().point[1], anchors.front().point[2],
               anchors.front().point[3], anchors.front().score, anchors.size());
  if (opt.labor_endogenous) {
    LaborIvResult iv;
    r.s2 = step2_labor(pr, cdf, anchors, r.grid, opt, &iv);
    r.iv = std::move(iv);
  } else {
    r.s2 = step2(pr, cdf, anchors, r.grid, opt);
  }
  r.s3 = step3(pr, r.s1, r.s2, r.grid, opt);
  return r;
}

std::vector<std::size_t> interior_firms(const PeriodResult& r) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < r.s2.inside.size(); ++i)
    if (r.s2.inside[i] && !r.s3.flag_denominator[i] && std::isfinite(r.s3.markup[i])) out.push_back(i);
  return out;
}

}  // namespace revid
