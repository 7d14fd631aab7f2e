#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ident_internal.hpp"
#include "revid/ident.hpp"

namespace revid {

nlohmann::json Anchor::to_json() const {
  return {{"q", name()}, {"point", point}, {"score", score}, {"sign", sign}, {"usable", usable}, {"scanned", scanned}};
}

namespace detail {

std::size_t axis_index(const std::vector<double>& ax, double x) {
  auto it = std::find(ax.begin(), ax.end(), x);
  if (it == ax.end()) throw std::logic_error("axis_index: value is not a grid node");
  return static_cast<std::size_t>(it - ax.begin());
}

double eval_extrap(const GridFn& f, std::span<const double> x) {
  double xs[GridFn::kMaxDims];
  for (std::size_t d = 0; d < f.dims(); ++d) xs[d] = std::clamp(x[d], f.axis(d).front(), f.axis(d).back());
  std::span<const double> sp(xs, f.dims());
  double v = f(sp);
  for (std::size_t d = 0; d < f.dims(); ++d)
    if (xs[d] != x[d] && f.has_deriv(d)) v += f.deriv(sp, d) * (x[d] - xs[d]);
  return v;
}

double line_integral(const GridFn& shape, const std::vector<double>& field, std::vector<std::size_t> idx,
                     std::size_t d, std::size_t i0, std::size_t i1) {
  if (i0 == i1) return 0.0;
  const auto& ax = shape.axis(d);
  std::size_t lo = std::min(i0, i1), hi = std::max(i0, i1);
  double acc = 0.0;
  idx[d] = lo;
  double prev = field[shape.flat(idx)];
  for (std::size_t i = lo; i < hi; ++i) {
    idx[d] = i + 1;
    double next = field[shape.flat(idx)];
    acc += 0.5 * (prev + next) * (ax[i + 1] - ax[i]);
    prev = next;
  }
  return i1 > i0 ? acc : -acc;
}

std::vector<double> integrate_on_grid(const GridFn& shape, const std::vector<const std::vector<double>*>& fields,
                                      const std::vector<std::size_t>& origin, const std::vector<std::size_t>& order,
                                      const std::vector<std::size_t>& slice_axes) {
  std::vector<double> out(shape.size(), 0.0);
  for (std::size_t k = 0; k < shape.size(); ++k) {
    auto target = shape.unflat(k);
    auto cur = origin;
    for (std::size_t a : slice_axes) cur[a] = target[a];
    double total = 0.0;
    for (std::size_t a : order) {
      total += line_integral(shape, *fields[a], cur, a, cur[a], target[a]);
      cur[a] = target[a];
    }
    if (cur != target) throw std::logic_error("integrate_on_grid: path order misses an axis");
    out[k] = total;
  }
  return out;
}

void fill_unusable(const std::vector<std::size_t>& shape, const std::vector<bool>& connected,
                   const std::vector<unsigned char>& usable, std::vector<std::vector<double>*> fields) {
  const std::size_t nd = shape.size();
  std::vector<std::size_t> stride(nd, 1);
  for (std::size_t d = nd; d-- > 1;) stride[d - 1] = stride[d] * shape[d];
  const std::size_t n = usable.size();
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> src(n, kNone);
  std::deque<std::size_t> q;
  for (std::size_t k = 0; k < n; ++k)
    if (usable[k]) {
      src[k] = k;
      q.push_back(k);
    }
  while (!q.empty()) {
    std::size_t k = q.front();
    q.pop_front();
    for (std::size_t d = 0; d < nd; ++d) {
      if (!connected[d]) continue;
      std::size_t i = k / stride[d] % shape[d];
      for (int dir : {-1, 1}) {
        if ((dir < 0 && i == 0) || (dir > 0 && i + 1 == shape[d])) continue;
        std::size_t nb = dir < 0 ? k - stride[d] : k + stride[d];
        if (src[nb] != kNone) continue;
        src[nb] = src[k];
        q.push_back(nb);
      }
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (src[k] == kNone) throw std::runtime_error("grid slice without any node passing the density floor");
    if (src[k] != k)
      for (auto* f : fields) (*f)[k] = (*f)[src[k]];
  }
}

AnchorFields anchor_fields(const CondCdf& cdf, const IdentGrid& g, const Anchor& a, const IdentOptions& opt) {
  GridFn shape(g.current_axes());
  const std::size_t n = shape.size(), nk = g.k.size(), nl = g.l.size();
  AnchorFields f;
  for (auto& t : f.T) t.assign(n, 0.0);
  f.usable.assign(n, 0);
  std::vector<double> gm(n, 0.0), gq(n, 0.0);
  std::vector<unsigned char> ok(n, 0);
  const auto& p = a.point;

  auto take = [&](const CdfGradient& gr, std::size_t zi, bool zaxis) {
    // lag axes (and a discrete z axis) are singletons, so the flat order is (m, k, l[, z])
    const std::size_t nzc = zaxis ? g.z.size() : 1;
    for (std::size_t src = 0; src < gr.G.size(); ++src) {
      std::size_t r = src;
      std::size_t zz = zaxis ? r % nzc : zi;
      r /= nzc;
      std::size_t c = r % nl;
      r /= nl;
      std::size_t b = r % nk, am = r / nk;
      std::size_t dst = shape.flat(std::vector<std::size_t>{am, b, c, zz});
      ok[dst] = gr.ok[src];
      gm[dst] = gr.Gm.values()[src];
      gq[dst] = gr.Gv[a.axis].values()[src];
      f.T[1][dst] = gr.Gv[kVk].values()[src];
      f.T[2][dst] = gr.Gv[kVl].values()[src];
      f.T[3][dst] = zaxis ? gr.Gv[kVz].values()[src] : 0.0;
    }
  };
  if (g.z_discrete) {
    for (std::size_t zi = 0; zi < g.z.size(); ++zi)
      take(cdf_gradient_grid(cdf, g.m, {g.k, g.l, {g.z[zi]}, {p[0]}, {p[1]}, {p[2]}, {p[3]}}), zi, false);
  } else {
    take(cdf_gradient_grid(cdf, g.m, {g.k, g.l, g.z, {p[0]}, {p[1]}, {p[2]}, {p[3]}}), 0, true);
  }

  // density floor relative to the maximum within each z slice (one slice when z is continuous)
  const std::size_t nz = g.z.size();
  std::vector<double> gmax(g.z_discrete ? nz : 1, 0.0);
  auto slice = [&](std::size_t k) { return g.z_discrete ? k % nz : 0; };
  for (std::size_t k = 0; k < n; ++k)
    if (ok[k]) gmax[slice(k)] = std::max(gmax[slice(k)], gm[k]);
  for (std::size_t k = 0; k < n; ++k) {
    bool use = ok[k] && gm[k] > opt.density_floor * gmax[slice(k)] &&
               (gq[k] > 0 ? 1 : -1) == a.sign && std::abs(gq[k]) >= opt.anchor_floor * gm[k] && gq[k] != 0.0;
    f.usable[k] = use;
    if (!use) {
      ++f.unusable;
      continue;
    }
    f.T[0][k] = gm[k] / gq[k];
    for (std::size_t q = 1; q < 4; ++q) f.T[q][k] /= gq[k];
  }
  return f;
}

}  // namespace detail

using namespace detail;

namespace {

std::size_t candidate_axis(const std::string& name) {
  if (name == "m1") return kVm1;
  if (name == "k1") return kVk1;
  if (name == "l1") return kVl1;
  if (name == "z1") return kVz1;
  throw std::invalid_argument(fmt::format("unknown anchor candidate '{}'", name));
}

std::vector<double> unique_sorted(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

// every step-th interior node of an axis, keeping away from the two outermost nodes on each side
std::vector<double> subsample(const std::vector<double>& ax, std::size_t step) {
  std::vector<double> out;
  for (std::size_t i = 2; i + 2 < ax.size(); i += step) out.push_back(ax[i]);
  if (out.empty()) out.push_back(ax[ax.size() / 2]);
  return out;
}

struct Tally {
  double min_ratio = std::numeric_limits<double>::infinity();
  std::size_t pos = 0, neg = 0, usable = 0, scanned = 0;
};

}  // namespace

namespace detail {

DerivFields derivative_fields(const CondCdf& cdf, const std::vector<Anchor>& anchors, const IdentGrid& g,
                              const IdentOptions& opt) {
  if (anchors.empty()) throw std::invalid_argument("step 2 needs at least one anchor");
  GridFn shape(g.current_axes(), {"m", "k", "l", "z"});
  const std::size_t n = shape.size();
  const std::size_t nav = std::min(anchors.size(), std::max<std::size_t>(opt.anchor_average, 1));
  const std::size_t im0 = axis_index(g.m, g.np.m0), im1 = axis_index(g.m, g.np.m1), ik = axis_index(g.k, g.np.k),
                    il = axis_index(g.l, g.np.l), iz = axis_index(g.z, g.np.z);
  const std::vector<std::size_t> sizes{g.m.size(), g.k.size(), g.l.size(), g.z.size()};

  DerivFields out;
  for (auto& d : out.D) d.assign(n, 0.0);
  for (std::size_t j = 0; j < nav; ++j) {
    const Anchor& a = anchors[j];
    auto F = anchor_fields(cdf, g, a, opt);
    for (std::size_t i = im0; i <= im1; ++i)
      if (!F.usable[shape.flat(std::vector<std::size_t>{i, ik, il, iz})])
        throw std::runtime_error(fmt::format(
            "density floor violated on the normalization path (anchor {} at m = {:.4g})", a.name(), g.m[i]));
    if (static_cast<double>(F.unusable) > opt.max_unusable_share * static_cast<double>(n))
      throw std::runtime_error(fmt::format("{} of {} grid nodes fail the density or sign checks for anchor {}",
                                           F.unusable, n, a.name()));
    fill_unusable(sizes, {true, true, true, !g.z_discrete}, F.usable, {&F.T[0], &F.T[1], &F.T[2], &F.T[3]});
    double I = line_integral(shape, F.T[0], {im0, ik, il, iz}, 0, im0, im1);
    if (!std::isfinite(I) || I == 0.0) throw std::runtime_error("scale constant is not finite");
    double S = 1.0 / I;
    for (std::size_t q = 0; q < 4; ++q)
      for (std::size_t k = 0; k < n; ++k) out.D[q][k] += S * F.T[q][k] / static_cast<double>(nav);
    out.S.push_back(S);
    out.anchors.push_back(a);
    out.unusable += F.unusable;
  }
  return out;
}

GridFn with_derivs(const IdentGrid& g, std::vector<double> values, const DerivFields& df) {
  GridFn f(g.current_axes(), std::move(values), {"m", "k", "l", "z"});
  for (std::size_t q = 0; q < (g.z_discrete ? 3u : 4u); ++q) f.set_deriv(q, df.D[q]);
  return f;
}

LagFields lag_fields(const CondCdf& cdf, const IdentGrid& g, const GridFn& Minv, const IdentOptions& opt) {
  const auto& np = g.np;
  std::vector<double> ma;
  for (std::size_t i = 0; i < g.m.size(); i += 2) ma.push_back(g.m[i]);
  std::vector<double> dm(ma.size());
  for (std::size_t a = 0; a < ma.size(); ++a) dm[a] = Minv.deriv({ma[a], np.k, np.l, np.z}, 0);

  // continuous z1 needs one joint call over all lag axes, so those axes are thinned
  auto thin = [&](const std::vector<double>& ax, double keep) {
    if (g.z_discrete) return ax;
    std::vector<double> out;
    for (std::size_t i = 0; i < ax.size(); ++i)
      if (i % 2 == 0 || i + 1 == ax.size() || ax[i] == keep) out.push_back(ax[i]);
    return out;
  };
  LagFields out;
  out.axes = {thin(g.m1, g.lag_star[0]), thin(g.k1, g.lag_star[1]), thin(g.l1, g.lag_star[2]),
              thin(g.z1, g.lag_star[3])};
  GridFn shape(out.axes, {"m1", "k1", "l1", "z1"});
  const std::size_t nlag = shape.size();
  for (auto& h : out.H) h.assign(nlag, 0.0);
  std::vector<double> den(nlag, 0.0);
  std::vector<unsigned char> ok(nlag, 0), usable(nlag, 0);
  const std::array<std::size_t, 4> qcol{kVm1, kVk1, kVl1, kVz1};
  const std::size_t nqc = g.z_discrete ? 3 : 4;

  auto take = [&](const CdfGradient& gr, std::size_t e_fixed) {
    const auto& ax = gr.G.axes();
    std::vector<std::size_t> src(8, 0), dst(4, 0);
    for (src[4] = 0; src[4] < ax[4].size(); ++src[4])
      for (src[5] = 0; src[5] < ax[5].size(); ++src[5])
        for (src[6] = 0; src[6] < ax[6].size(); ++src[6])
          for (src[7] = 0; src[7] < ax[7].size(); ++src[7]) {
            dst = {src[4], src[5], src[6], g.z_discrete ? e_fixed : src[7]};
            std::size_t k = shape.flat(dst);
            double num[4] = {0, 0, 0, 0}, d = 0.0;
            bool any = false;
            for (src[0] = 0; src[0] < ma.size(); ++src[0]) {
              std::size_t s = gr.G.flat(src);
              if (!gr.ok[s]) continue;
              any = true;
              d += gr.Gm.values()[s];
              for (std::size_t q = 0; q < nqc; ++q) num[q] += gr.Gv[qcol[q]].values()[s] * dm[src[0]];
            }
            src[0] = 0;
            ok[k] = any;
            den[k] = d;
            for (std::size_t q = 0; q < nqc; ++q) out.H[q][k] = any && d > 0 ? -num[q] / d : 0.0;
          }
  };
  if (g.z_discrete) {
    for (std::size_t e = 0; e < g.z1.size(); ++e)
      take(cdf_gradient_grid(cdf, ma, {{np.k}, {np.l}, {np.z}, out.axes[0], out.axes[1], out.axes[2], {g.z1[e]}}), e);
  } else {
    take(cdf_gradient_grid(cdf, ma, {{np.k}, {np.l}, {np.z}, out.axes[0], out.axes[1], out.axes[2], out.axes[3]}), 0);
  }
  double dmax = 0.0;
  for (std::size_t k = 0; k < nlag; ++k)
    if (ok[k]) dmax = std::max(dmax, den[k]);
  std::size_t bad = 0;
  for (std::size_t k = 0; k < nlag; ++k) {
    usable[k] = ok[k] && den[k] > opt.density_floor * dmax;
    bad += !usable[k];
  }
  if (static_cast<double>(bad) > opt.max_unusable_share * static_cast<double>(nlag))
    throw std::runtime_error(fmt::format("{} of {} lag-grid nodes fail the density floor", bad, nlag));
  fill_unusable({out.axes[0].size(), out.axes[1].size(), out.axes[2].size(), out.axes[3].size()},
                {true, true, true, !g.z_discrete}, usable, {&out.H[0], &out.H[1], &out.H[2], &out.H[3]});
  out.origin = {axis_index(out.axes[0], g.lag_star[0]), axis_index(out.axes[1], g.lag_star[1]),
                axis_index(out.axes[2], g.lag_star[2]), axis_index(out.axes[3], g.lag_star[3])};
  return out;
}

// omega, hbar and eta from a finished Minv
void finish_control(const PanelPair& pr, const IdentGrid& g, const IdentOptions& opt, ControlResult& out) {
  const std::size_t n = pr.size();
  out.omega.resize(n);
  out.inside.assign(n, 0);
  std::vector<unsigned char> cur_in(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.omega[i] = eval_extrap(out.Minv, std::vector<double>{pr.m[i], pr.k[i], pr.l[i], pr.z[i]});
    cur_in[i] = g.inside_current(pr.m[i], pr.k[i], pr.l[i], pr.z[i]);
  }
  // hbar uses every firm: trimming on current inputs would select on eta
  const auto &w = out.omega, &m1 = pr.m1, &k1 = pr.k1, &l1 = pr.l1, &z1 = pr.z1;
  std::vector<std::vector<double>> cols{m1, k1, l1};
  std::vector<std::string> names{"m1", "k1", "l1"};
  if (!g.z_discrete) {
    cols.push_back(z1);
    names.emplace_back("z1");
  }
  auto h = select_bandwidth(cols, opt.rule, cols.size(), names);
  for (double& v : h) v *= opt.mean_bw_scale;
  if (g.z_discrete) h.push_back(0.0);
  out.hbar = cond_mean(w, {m1, k1, l1, z1}, g.lag_axes(), h, {"m1", "k1", "l1", "z1"});

  out.eta.resize(n);
  out.eta_sorted.clear();
  for (std::size_t i = 0; i < n; ++i) {
    out.eta[i] = out.omega[i] - eval_extrap(out.hbar, std::vector<double>{pr.m1[i], pr.k1[i], pr.l1[i], pr.z1[i]});
    out.inside[i] = cur_in[i] && g.inside_lag(pr.m1[i], pr.k1[i], pr.l1[i], pr.z1[i]);
    if (out.inside[i]) out.eta_sorted.push_back(out.eta[i]);
  }
  std::sort(out.eta_sorted.begin(), out.eta_sorted.end());
}

ControlResult start_control(DerivFields& df) {
  ControlResult out;
  out.anchors = df.anchors;
  out.S = df.S;
  out.dh_anchor = -out.S.front();
  out.unusable_nodes = df.unusable;
  return out;
}

std::vector<std::size_t> norm_index(const IdentGrid& g) {
  return {axis_index(g.m, g.np.m0), axis_index(g.k, g.np.k), axis_index(g.l, g.np.l), axis_index(g.z, g.np.z)};
}

}  // namespace detail

std::vector<Anchor> rank_anchors(const CondCdf& cdf, const IdentGrid& g, const IdentOptions& opt) {
  std::vector<std::size_t> cand;
  for (const auto& name : opt.anchor_candidates) {
    std::size_t ax = candidate_axis(name);
    if (ax == kVz1 && g.z_discrete) continue;
    if (ax == kVl1 && opt.labor_endogenous) continue;
    if (std::find(cand.begin(), cand.end(), ax) == cand.end()) cand.push_back(ax);
  }
  std::sort(cand.begin(), cand.end());
  if (cand.empty()) throw std::invalid_argument("no admissible anchor candidates");

  auto m1q = unique_sorted(quantiles(cdf.v(kVm1), opt.anchor_levels));
  auto k1q = unique_sorted(quantiles(cdf.v(kVk1), opt.anchor_levels));
  auto l1q = unique_sorted(quantiles(cdf.v(kVl1), opt.anchor_levels));
  auto z1q = g.z_discrete ? g.z1 : unique_sorted(quantiles(cdf.v(kVz1), opt.anchor_levels));
  const std::size_t step = g.z_discrete ? 2 : 4;
  auto msub = subsample(g.m, step), ksub = subsample(g.k, step), lsub = subsample(g.l, step);
  auto zsub = g.z_discrete ? g.z : subsample(g.z, step);

  const std::size_t n1 = m1q.size(), n2 = k1q.size(), n3 = l1q.size(), np = z1q.size() * n1 * n2 * n3;
  auto point_index = [&](std::size_t e, std::size_t a, std::size_t b, std::size_t c) {
    return ((e * n1 + a) * n2 + b) * n3 + c;
  };
  std::vector<Tally> tally(cand.size() * np);

  auto scan = [&](const CdfGradient& gr, std::size_t e_off) {
    const auto& ax = gr.G.axes();
    std::vector<std::size_t> idx(8, 0);
    for (std::size_t e = 0; e < ax[7].size(); ++e)
      for (std::size_t a = 0; a < n1; ++a)
        for (std::size_t b = 0; b < n2; ++b)
          for (std::size_t c = 0; c < n3; ++c) {
            idx[4] = a, idx[5] = b, idx[6] = c, idx[7] = e;
            std::size_t p = point_index(e_off + e, a, b, c);
            double gmax = 0.0;
            std::vector<std::size_t> nodes;
            for (idx[0] = 0; idx[0] < ax[0].size(); ++idx[0])
              for (idx[1] = 0; idx[1] < ax[1].size(); ++idx[1])
                for (idx[2] = 0; idx[2] < ax[2].size(); ++idx[2])
                  for (idx[3] = 0; idx[3] < ax[3].size(); ++idx[3]) {
                    std::size_t k = gr.G.flat(idx);
                    nodes.push_back(k);
                    if (gr.ok[k]) gmax = std::max(gmax, gr.Gm.values()[k]);
                  }
            for (std::size_t ci = 0; ci < cand.size(); ++ci) {
              Tally& t = tally[ci * np + p];
              const auto& gq = gr.Gv[cand[ci]].values();
              for (std::size_t k : nodes) {
                ++t.scanned;
                double gm = gr.Gm.values()[k];
                if (!gr.ok[k] || !(gm > opt.density_floor * gmax)) continue;
                ++t.usable;
                if (gq[k] > 0) ++t.pos;
                if (gq[k] < 0) ++t.neg;
                t.min_ratio = std::min(t.min_ratio, std::abs(gq[k]) / gm);
              }
            }
          }
  };
  if (g.z_discrete) {
    for (double zl : zsub)
      for (std::size_t e = 0; e < z1q.size(); ++e)
        scan(cdf_gradient_grid(cdf, msub, {ksub, lsub, {zl}, m1q, k1q, l1q, {z1q[e]}}), e);
  } else {
    scan(cdf_gradient_grid(cdf, msub, {ksub, lsub, zsub, m1q, k1q, l1q, z1q}), 0);
  }

  std::vector<Anchor> out;
  double best_invalid = 0.0;
  for (std::size_t ci = 0; ci < cand.size(); ++ci)
    for (std::size_t e = 0; e < z1q.size(); ++e)
      for (std::size_t a = 0; a < n1; ++a)
        for (std::size_t b = 0; b < n2; ++b)
          for (std::size_t c = 0; c < n3; ++c) {
            const Tally& t = tally[ci * np + point_index(e, a, b, c)];
            bool enough = static_cast<double>(t.usable) >=
                              (1.0 - opt.max_unusable_share) * static_cast<double>(t.scanned) &&
                          t.usable > 0;
            bool one_sign = (t.pos == t.usable) || (t.neg == t.usable);
            if (!(enough && one_sign && t.min_ratio >= opt.anchor_floor)) {
              if (enough) best_invalid = std::max(best_invalid, std::max(t.pos, t.neg) / double(t.usable));
              continue;
            }
            Anchor an;
            an.axis = cand[ci];
            an.point = {m1q[a], k1q[b], l1q[c], z1q[e]};
            an.score = t.min_ratio;
            an.sign = t.pos > 0 ? 1 : -1;
            an.usable = t.usable;
            an.scanned = t.scanned;
            out.push_back(std::move(an));
          }
  std::stable_sort(out.begin(), out.end(), [](const Anchor& x, const Anchor& y) { return x.score > y.score; });
  if (out.empty())
    throw std::runtime_error(fmt::format(
        "generalized rank condition fails: no lagged input or shifter has a conditional-CDF derivative of one "
        "sign bounded away from zero over the evaluation grid (best sign agreement {:.2f})",
        best_invalid));
  spdlog::debug("anchor ranking: {} valid, best {} score {:.4g}", out.size(), out.front().name(), out.front().score);
  return out;
}

Anchor select_anchor(const CondCdf& cdf, const IdentGrid& g, const IdentOptions& opt) {
  return rank_anchors(cdf, g, opt).front();
}

ControlResult step2(const PanelPair& pr, const CondCdf& cdf, const std::vector<Anchor>& anchors, const IdentGrid& g,
                    const IdentOptions& opt) {
  if (g.z_discrete) return step2_discrete_z(pr, cdf, anchors, g, opt);
  auto df = derivative_fields(cdf, anchors, g, opt);
  ControlResult out = start_control(df);
  GridFn shape(g.current_axes());
  auto vals = integrate_on_grid(shape, {&df.D[0], &df.D[1], &df.D[2], &df.D[3]}, norm_index(g), {3, 2, 1, 0});
  out.Minv = with_derivs(g, std::move(vals), df);
  out.c0 = {0.0};
  finish_control(pr, g, opt, out);
  return out;
}

std::vector<std::size_t> detail::cell_index(const PanelPair& pr, const IdentGrid& g, std::size_t min_rows) {
  const std::size_t L = g.z.size();
  std::vector<std::size_t> cell(pr.size()), count(L * L, 0);
  for (std::size_t i = 0; i < pr.size(); ++i) {
    cell[i] = axis_index(g.z, pr.z[i]) * L + axis_index(g.z1, pr.z1[i]);
    ++count[cell[i]];
  }
  for (std::size_t a = 0; a < L; ++a)
    for (std::size_t b = 0; b < L; ++b)
      if (count[a * L + b] < std::max<std::size_t>(min_rows, 1))
        throw std::runtime_error(fmt::format("(z, z_lag) cell ({}, {}) has {} rows, below the minimum {}", g.z[a],
                                             g.z1[b], count[a * L + b], min_rows));
  return cell;
}

ControlResult step2_discrete_z(const PanelPair& pr, const CondCdf& cdf, const std::vector<Anchor>& anchors,
                               const IdentGrid& g, const IdentOptions& opt) {
  if (!g.z_discrete) throw std::invalid_argument("step2_discrete_z needs a discrete shifter");
  const std::size_t L = g.z.size();
  auto cell = cell_index(pr, g, opt.min_cell_rows);

  auto df = derivative_fields(cdf, anchors, g, opt);
  ControlResult out = start_control(df);
  GridFn shape(g.current_axes());
  auto vals = integrate_on_grid(shape, {&df.D[0], &df.D[1], &df.D[2], &df.D[3]}, norm_index(g), {2, 1, 0}, {3});
  out.Minv = with_derivs(g, std::move(vals), df);
  out.c0.assign(L, 0.0);
  out.c2.assign(L, 0.0);
  if (L == 1) {
    finish_control(pr, g, opt, out);
    return out;
  }

  // hbar up to z1 constants, from its lag derivatives
  auto lf = lag_fields(cdf, g, out.Minv, opt);
  GridFn lag_shape(lf.axes);
  auto lam = integrate_on_grid(lag_shape, {&lf.H[0], &lf.H[1], &lf.H[2], &lf.H[3]}, lf.origin, {2, 1, 0}, {3});
  GridFn lam_h(lf.axes, std::move(lam), {"m1", "k1", "l1", "z1"});
  for (std::size_t q = 0; q < 3; ++q) lam_h.set_deriv(q, lf.H[q]);

  // cell means of Lambda_m - Lambda_hbar identify c2(z1) - c0(z); every firm enters (linear extension
  // beyond the grid) since trimming on current inputs would select on eta
  std::vector<double> sum(L * L, 0.0);
  std::vector<std::size_t> cnt(L * L, 0);
  for (std::size_t i = 0; i < pr.size(); ++i) {
    double lm = eval_extrap(out.Minv, std::vector<double>{pr.m[i], pr.k[i], pr.l[i], pr.z[i]});
    double lh = eval_extrap(lam_h, std::vector<double>{pr.m1[i], pr.k1[i], pr.l1[i], pr.z1[i]});
    sum[cell[i]] += lm - lh;
    ++cnt[cell[i]];
  }
  auto Ht = [&](std::size_t a, std::size_t b) { return sum[a * L + b] / static_cast<double>(cnt[a * L + b]); };
  const std::size_t zs = axis_index(g.z, g.np.z);
  for (std::size_t e = 0; e < L; ++e) out.c2[e] = Ht(zs, e);
  for (std::size_t a = 0; a < L; ++a) out.c0[a] = Ht(zs, zs) - Ht(a, zs);

  auto& mv = out.Minv.values();
  for (std::size_t k = 0; k < mv.size(); ++k) mv[k] += out.c0[k % L];
  out.dhbar = std::move(lam_h);
  finish_control(pr, g, opt, out);
  return out;
}

}  // namespace revid
