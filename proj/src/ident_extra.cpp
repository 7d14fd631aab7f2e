#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ident_internal.hpp"
#include "revid/ident.hpp"

namespace revid {

using namespace detail;

nlohmann::json OveridReport::to_json() const {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& x : anchors) a.push_back(x.to_json());
  nlohmann::json sa = nlohmann::json::array();
  for (const auto& x : slope_anchors) sa.push_back(x.to_json());
  return {{"ran", ran},
          {"anchors", a},
          {"sup_discrepancy", sup_discrepancy},
          {"omega_corr", omega_corr},
          {"max_discrepancy", max_discrepancy},
          {"min_corr", min_corr},
          {"slope_anchors", sa},
          {"slope_ratios", slope_ratios},
          {"slope_gap", slope_gap},
          {"flagged", flagged},
          {"note", note}};
}

namespace {

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

bool interior_node(const GridFn& f, std::size_t k, std::size_t dims) {
  auto idx = f.unflat(k);
  for (std::size_t d = 0; d < dims; ++d) {
    std::size_t n = f.axis(d).size(), cut = n / 5;
    if (n > 1 && (idx[d] < cut || idx[d] + cut >= n)) return false;
  }
  return true;
}

}  // namespace

LaborIvResult labor_iv(const std::vector<double>& H, const std::vector<double>& R, const std::vector<double>& l,
                       const std::vector<double>& l1, double l_star, const std::vector<int>& cell,
                       std::size_t n_cells, const std::vector<unsigned char>& use, double weak_threshold) {
  const std::size_t n = H.size();
  if (R.size() != n || l.size() != n || l1.size() != n || cell.size() != n || (!use.empty() && use.size() != n))
    throw std::invalid_argument("labor_iv: input lengths differ");
  if (n_cells == 0) throw std::invalid_argument("labor_iv: need at least one cell");
  LaborIvResult out;
  out.H = H;
  out.R = R;
  out.used.assign(n, 0);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i) {
    if (!use.empty() && !use[i]) continue;
    if (cell[i] < 0 || static_cast<std::size_t>(cell[i]) >= n_cells)
      throw std::invalid_argument("labor_iv: cell index out of range");
    if (!std::isfinite(H[i]) || !std::isfinite(R[i])) continue;
    rows.push_back(i);
    out.used[i] = 1;
  }
  if (rows.size() < n_cells + 10) throw std::invalid_argument("labor_iv: too few usable rows");

  std::vector<double> ls, l1s;
  for (auto i : rows) {
    ls.push_back(l[i]);
    l1s.push_back(l1[i]);
  }
  double l1min = *std::min_element(l1s.begin(), l1s.end()), l1max = *std::max_element(l1s.begin(), l1s.end());
  if (!(l1max > l1min)) throw std::invalid_argument("labor_iv: lagged labor has zero variance");
  out.first_stage_corr = correlation(ls, l1s);

  // within-cell demeaning absorbs the cell intercepts
  std::vector<double> mh(n_cells, 0), mx(n_cells, 0), mz(n_cells, 0), cnt(n_cells, 0);
  auto X = [&](std::size_t i) { return (l[i] - l_star) - R[i]; };
  for (auto i : rows) {
    mh[cell[i]] += H[i];
    mx[cell[i]] += X(i);
    mz[cell[i]] += l1[i];
    cnt[cell[i]] += 1;
  }
  for (std::size_t c = 0; c < n_cells; ++c)
    if (cnt[c] > 0) {
      mh[c] /= cnt[c];
      mx[c] /= cnt[c];
      mz[c] /= cnt[c];
    }
  double szx = 0, szh = 0, sxx = 0, sxh = 0, szz = 0;
  for (auto i : rows) {
    double h = H[i] - mh[cell[i]], x = X(i) - mx[cell[i]], z = l1[i] - mz[cell[i]];
    szx += z * x;
    szh += z * h;
    sxx += x * x;
    sxh += x * h;
    szz += z * z;
  }
  std::size_t used_cells = 0;
  for (double c : cnt) used_cells += c > 0;
  const double dof = static_cast<double>(rows.size() - used_cells - 1);
  const double fs_ssr = std::max(sxx - szx * szx / szz, 0.0);
  out.first_stage_f = fs_ssr > 0 ? (szx * szx / szz) / (fs_ssr / dof) : std::numeric_limits<double>::infinity();
  if (std::abs(out.first_stage_corr) < weak_threshold || out.first_stage_f < 10.0)
    throw WeakInstrumentError(fmt::format(
        "weak instrument: corr(l_t, l_t-1) = {:.3f} (threshold {:.3f}), first-stage F = {:.1f}",
        out.first_stage_corr, weak_threshold, out.first_stage_f));
  out.theta_l_hat = szh / szx;
  out.theta_l_ols = sxx > 0 ? sxh / sxx : std::numeric_limits<double>::quiet_NaN();
  out.cell_effects.assign(n_cells, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < n_cells; ++c)
    if (cnt[c] > 0) out.cell_effects[c] = mh[c] - out.theta_l_hat * mx[c];
  out.d = out.cell_effects[0];

  std::vector<double> e, z;
  double se = 0;
  for (auto i : rows) {
    double r = H[i] - out.theta_l_hat * X(i) - out.cell_effects[cell[i]];
    e.push_back(r);
    z.push_back(l1[i]);
    se += r;
  }
  out.resid_mean = se / static_cast<double>(rows.size());
  out.resid_lag_corr = correlation(e, z);
  return out;
}

ControlResult step2_labor(const PanelPair& pr, const CondCdf& cdf, const std::vector<Anchor>& anchors,
                          const IdentGrid& g, const IdentOptions& opt, LaborIvResult* iv_out) {
  for (const auto& a : anchors)
    if (a.axis == kVl1) throw std::invalid_argument("lagged labor cannot serve as anchor when labor is endogenous");
  const std::size_t n = pr.size();
  const std::size_t L = g.z_discrete ? g.z.size() : 1;
  std::vector<int> cell(n, 0);
  if (g.z_discrete) {
    auto c = cell_index(pr, g, opt.min_cell_rows);
    for (std::size_t i = 0; i < n; ++i) cell[i] = static_cast<int>(c[i]);
  }

  auto df = derivative_fields(cdf, anchors, g, opt);
  ControlResult out = start_control(df);
  out.labor = true;
  GridFn shape(g.current_axes());
  const std::size_t nn = shape.size();
  const auto origin = norm_index(g);

  // Lambda_lt: the control function net of its labor profile (path never moves l)
  auto lam_vals = g.z_discrete ? integrate_on_grid(shape, {&df.D[0], &df.D[1], &df.D[2], &df.D[3]}, origin, {1, 0}, {2, 3})
                               : integrate_on_grid(shape, {&df.D[0], &df.D[1], &df.D[2], &df.D[3]}, origin, {3, 1, 0}, {2});
  GridFn lam_lt(g.current_axes(), lam_vals, {"m", "k", "l", "z"});
  lam_lt.set_deriv(0, df.D[0]);
  lam_lt.set_deriv(1, df.D[1]);
  if (!g.z_discrete) lam_lt.set_deriv(3, df.D[3]);

  // lag side without the l1 segment
  auto lf = lag_fields(cdf, g, lam_lt, opt);
  GridFn lag_shape(lf.axes);
  auto lh_vals = g.z_discrete
                     ? integrate_on_grid(lag_shape, {&lf.H[0], &lf.H[1], &lf.H[2], &lf.H[3]}, lf.origin, {1, 0}, {2, 3})
                     : integrate_on_grid(lag_shape, {&lf.H[0], &lf.H[1], &lf.H[2], &lf.H[3]}, lf.origin, {3, 1, 0}, {2});
  GridFn lam_h(lf.axes, std::move(lh_vals), {"m1", "k1", "l1", "z1"});
  lam_h.set_deriv(0, lf.H[0]);
  lam_h.set_deriv(1, lf.H[1]);
  if (!g.z_discrete) lam_h.set_deriv(3, lf.H[3]);

  // R(l1): integral over lagged labor of (dhbar/dm1) / (dMinv/dm) at (m1*, k1*, s, z1), with the
  // current-period dMinv/dm standing in for the lagged one
  const auto &l1ax = lf.axes[2], &z1ax = lf.axes[3];
  GridFn rshape(std::vector<std::vector<double>>{l1ax, z1ax}, std::vector<std::string>{"l1", "z1"});
  std::vector<double> ratio(rshape.size()), zero(rshape.size(), 0.0);
  for (std::size_t c = 0; c < l1ax.size(); ++c)
    for (std::size_t e = 0; e < z1ax.size(); ++e) {
      double hm = lf.H[0][lag_shape.flat(std::vector<std::size_t>{lf.origin[0], lf.origin[1], c, e})];
      double dm = lam_lt.deriv({g.lag_star[0], g.lag_star[1], l1ax[c], z1ax[e]}, 0);
      ratio[rshape.flat(std::vector<std::size_t>{c, e})] = hm / dm;
    }
  auto rvals = integrate_on_grid(rshape, {&ratio, &zero}, {lf.origin[2], 0}, {0}, {1});
  GridFn Rfn(rshape.axes(), std::move(rvals), {"l1", "z1"});
  Rfn.set_deriv(0, ratio);

  std::vector<double> H(n), R(n);
  for (std::size_t i = 0; i < n; ++i) {
    H[i] = eval_extrap(lam_lt, std::vector<double>{pr.m[i], pr.k[i], pr.l[i], pr.z[i]}) -
           eval_extrap(lam_h, std::vector<double>{pr.m1[i], pr.k1[i], pr.l1[i], pr.z1[i]});
    R[i] = eval_extrap(Rfn, std::vector<double>{pr.l1[i], pr.z1[i]});
  }
  auto iv = labor_iv(H, R, pr.l, pr.l1, g.np.l, cell, L * L, {}, opt.weak_iv_threshold);
  spdlog::info("labor IV: theta_l = {:.4f} (OLS {:.4f}), first-stage corr {:.3f}, F {:.1f}", iv.theta_l_hat,
               iv.theta_l_ols, iv.first_stage_corr, iv.first_stage_f);

  out.c0.assign(L, 0.0);
  if (g.z_discrete) {
    const std::size_t zs = axis_index(g.z, g.np.z);
    for (std::size_t a = 0; a < L; ++a) out.c0[a] = iv.cell_effects[zs * L + zs] - iv.cell_effects[a * L + zs];
  }
  out.theta_l_hat = iv.theta_l_hat;
  const std::size_t nz = g.z.size();
  std::vector<double> vals(nn);
  for (std::size_t k = 0; k < nn; ++k) {
    auto idx = shape.unflat(k);
    vals[k] = lam_vals[k] + (g.z_discrete ? out.c0[k % nz] : 0.0) - iv.theta_l_hat * (g.l[idx[2]] - g.np.l);
  }
  DerivFields fin = df;
  fin.D[2].assign(nn, -iv.theta_l_hat);
  out.Minv = with_derivs(g, std::move(vals), fin);
  finish_control(pr, g, opt, out);
  if (iv_out) *iv_out = std::move(iv);
  return out;
}

namespace {

ControlResult run_anchor(const PanelPair& pr, const CondCdf& cdf, const Anchor& a, const IdentGrid& g,
                         const IdentOptions& opt) {
  IdentOptions o = opt;
  o.anchor_average = 1;
  return o.labor_endogenous ? step2_labor(pr, cdf, {a}, g, o) : step2(pr, cdf, {a}, g, o);
}

// mean dMinv/dq / dMinv/dm over hull-inside firms; labor is skipped when endogenous, z when discrete
std::vector<double> slope_ratios(const PanelPair& pr, const ControlResult& r, const IdentGrid& g,
                                 const IdentOptions& opt) {
  std::vector<double> s(3, 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < pr.size(); ++i) {
    if (!r.inside[i]) continue;
    const std::vector<double> x{pr.m[i], pr.k[i], pr.l[i], pr.z[i]};
    const double dm = r.Minv.deriv(x, 0);
    if (!(std::abs(dm) > 0.0)) continue;
    s[0] += r.Minv.deriv(x, 1) / dm;
    if (!opt.labor_endogenous) s[1] += r.Minv.deriv(x, 2) / dm;
    if (!g.z_discrete) s[2] += r.Minv.deriv(x, 3) / dm;
    ++n;
  }
  for (double& v : s) v = n > 0 ? v / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  return s;
}

void set_slope_gap(OveridReport& rep, const IdentOptions& opt) {
  rep.slope_gap = 0.0;
  for (std::size_t a = 0; a < rep.slope_ratios.size(); ++a)
    for (std::size_t b = a + 1; b < rep.slope_ratios.size(); ++b)
      for (std::size_t q = 0; q < 3; ++q)
        rep.slope_gap = std::max(rep.slope_gap, std::abs(rep.slope_ratios[a][q] - rep.slope_ratios[b][q]));
  rep.flagged = rep.slope_gap > opt.overid_threshold;
  if (rep.flagged)
    rep.note = fmt::format("slope ratios from different anchors differ by up to {:.3f} (threshold {:.3f})",
                           rep.slope_gap, opt.overid_threshold);
}

}  // namespace

OveridReport overid_compare(const PanelPair& pr, const CondCdf& cdf, const IdentGrid& g, const IdentOptions& opt,
                            const std::vector<Anchor>& anchors) {
  OveridReport rep;
  rep.anchors = anchors;
  if (anchors.size() < 2) {
    rep.note = "fewer than two valid anchors; nothing to compare";
    return rep;
  }
  std::vector<ControlResult> res;
  for (const auto& a : anchors) res.push_back(run_anchor(pr, cdf, a, g, opt));
  const std::size_t na = anchors.size(), dims = g.z_discrete ? 3 : 4;
  rep.sup_discrepancy.assign(na, std::vector<double>(na, 0.0));
  rep.omega_corr.assign(na, std::vector<double>(na, 1.0));
  rep.max_discrepancy = 0.0;
  rep.min_corr = 1.0;
  for (std::size_t a = 0; a < na; ++a)
    for (std::size_t b = a + 1; b < na; ++b) {
      const auto &A = res[a].Minv, &B = res[b].Minv;
      double sup = 0.0;
      for (std::size_t k = 0; k < A.size(); ++k)
        if (interior_node(A, k, dims)) sup = std::max(sup, std::abs(A.values()[k] - B.values()[k]));
      std::vector<double> wa, wb;
      for (std::size_t i = 0; i < pr.size(); ++i)
        if (res[a].inside[i]) {
          wa.push_back(res[a].omega[i]);
          wb.push_back(res[b].omega[i]);
        }
      double c = correlation(wa, wb);
      rep.sup_discrepancy[a][b] = rep.sup_discrepancy[b][a] = sup;
      rep.omega_corr[a][b] = rep.omega_corr[b][a] = c;
      rep.max_discrepancy = std::max(rep.max_discrepancy, sup);
      rep.min_corr = std::min(rep.min_corr, c);
    }
  rep.slope_anchors = anchors;
  for (const auto& r : res) rep.slope_ratios.push_back(slope_ratios(pr, r, g, opt));
  rep.ran = true;
  set_slope_gap(rep, opt);
  return rep;
}

OveridReport overid_check(const PanelPair& pr, const CondCdf& cdf, const IdentGrid& g, const IdentOptions& opt,
                          std::size_t max_anchors) {
  std::vector<Anchor> ranked;
  try {
    ranked = rank_anchors(cdf, g, opt);
  } catch (const std::runtime_error& e) {
    OveridReport rep;
    rep.note = fmt::format("no valid anchor: {}", e.what());
    return rep;
  }
  // prefer anchors that differ from every chosen one in both the lagged variable and the point
  std::vector<Anchor> chosen{ranked.front()};
  auto add_pass = [&](bool need_axis, bool need_point) {
    for (const auto& a : ranked) {
      if (chosen.size() >= max_anchors) return;
      bool ok = true;
      for (const auto& c : chosen) {
        bool same_axis = c.axis == a.axis, same_point = c.point == a.point;
        if ((same_axis && same_point) || (need_axis && same_axis) || (need_point && same_point)) ok = false;
      }
      if (ok) chosen.push_back(a);
    }
  };
  add_pass(true, true);
  add_pass(false, true);
  add_pass(false, false);
  OveridReport rep = overid_compare(pr, cdf, g, opt, chosen);
  if (!rep.ran) return rep;

  // slope test: the wide default bandwidths pool over lagged states and hide violations
  CondCdfOptions co = opt.cdf;
  co.bw_scale = opt.overid_bw_scale;
  co.m_bw_scale = 1.0;
  const CondCdf narrow = make_cdf(pr, co);
  Anchor lo;
  lo.axis = kVm1;
  lo.sign = -1;
  for (const auto& a : ranked)
    if (a.axis == kVm1) {
      lo.sign = a.sign;
      break;
    }
  lo.point = g.lag_star;
  Anchor hi = lo;
  lo.point[0] = quantile(pr.m1, opt.overid_quantile);
  hi.point[0] = quantile(pr.m1, 1.0 - opt.overid_quantile);
  rep.slope_anchors = {lo, hi};
  rep.slope_ratios.clear();
  rep.note.clear();
  try {
    for (const auto& a : rep.slope_anchors)
      rep.slope_ratios.push_back(slope_ratios(pr, run_anchor(pr, narrow, a, g, opt), g, opt));
  } catch (const std::exception& e) {
    rep.slope_ratios.clear();
    rep.slope_gap = 0.0;
    rep.flagged = false;
    rep.note = fmt::format("slope test skipped: {}", e.what());
    return rep;
  }
  set_slope_gap(rep, opt);
  return rep;
}

}  // namespace revid
