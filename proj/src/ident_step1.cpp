#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "revid/ident.hpp"

namespace revid {

const char* v_name(std::size_t j) {
  static const char* names[] = {"k", "l", "z", "m1", "k1", "l1", "z1"};
  if (j >= kVDims) throw std::out_of_range("v_name");
  return names[j];
}

namespace {

// insert x into a sorted axis; snaps onto an existing node when within rounding
void insert_node(std::vector<double>& ax, double x) {
  double span = ax.empty() ? 1.0 : std::max(1.0, ax.back() - ax.front());
  for (double& a : ax)
    if (std::abs(a - x) <= 1e-12 * span) {
      a = x;
      return;
    }
  ax.insert(std::upper_bound(ax.begin(), ax.end(), x), x);
}

bool within(const std::vector<double>& ax, double x) { return x >= ax.front() && x <= ax.back(); }

}  // namespace

bool IdentGrid::inside_current(double mm, double kk, double ll, double zz) const {
  return within(m, mm) && within(k, kk) && within(l, ll) && (z_discrete || within(z, zz));
}

bool IdentGrid::inside_lag(double mm, double kk, double ll, double zz) const {
  return within(m1, mm) && within(k1, kk) && within(l1, ll) && (z_discrete || within(z1, zz));
}

nlohmann::json IdentGrid::to_json() const {
  return {{"m", m},   {"k", k},   {"l", l},   {"z", z},   {"m1", m1},
          {"k1", k1}, {"l1", l1}, {"z1", z1}, {"z_discrete", z_discrete},
          {"norm_points", {{"m0", np.m0}, {"m1", np.m1}, {"k", np.k}, {"l", np.l}, {"z", np.z}}},
          {"lag_origin", lag_star}};
}

IdentGrid make_grid(const PanelPair& pr, const IdentOptions& opt) {
  if (opt.grid_points < 3) throw std::invalid_argument("grid_points must be at least 3");
  if (!(opt.grid_lo >= 0.0 && opt.grid_lo < opt.grid_hi && opt.grid_hi <= 1.0))
    throw std::invalid_argument("grid quantile range must satisfy 0 <= lo < hi <= 1");
  IdentGrid g;
  const auto n = opt.grid_points;
  g.z_discrete = pr.z_discrete;
  g.m = quantile_grid(pr.m, n, opt.grid_lo, opt.grid_hi);
  g.k = quantile_grid(pr.k, n, opt.grid_lo, opt.grid_hi);
  g.l = quantile_grid(pr.l, n, opt.grid_lo, opt.grid_hi);
  g.m1 = quantile_grid(pr.m1, n, opt.grid_lo, opt.grid_hi);
  g.k1 = quantile_grid(pr.k1, n, opt.grid_lo, opt.grid_hi);
  g.l1 = quantile_grid(pr.l1, n, opt.grid_lo, opt.grid_hi);
  if (g.z_discrete) {
    g.z = pr.z_levels;
    g.z1 = discrete_levels(pr.z1, std::max<std::size_t>(pr.z_levels.size(), 1) + 8);
    for (double v : g.z1)
      if (std::find(g.z.begin(), g.z.end(), v) == g.z.end())
        throw std::invalid_argument("make_grid: lagged z takes a level absent in the current period");
    g.z1 = g.z;
  } else {
    g.z = quantile_grid(pr.z, n, opt.grid_lo, opt.grid_hi);
    g.z1 = quantile_grid(pr.z1, n, opt.grid_lo, opt.grid_hi);
  }

  if (opt.norm_points) {
    g.np = *opt.norm_points;
  } else {
    g.np.m0 = quantile(pr.m, opt.norm_q0);
    g.np.m1 = quantile(pr.m, opt.norm_q1);
    g.np.k = quantile(pr.k, 0.5);
    g.np.l = quantile(pr.l, 0.5);
    g.np.z = g.z_discrete ? g.z.front() : quantile(pr.z, 0.5);
  }
  if (!(g.np.m0 < g.np.m1)) throw std::invalid_argument("normalization points need m*_0 < m*_1");
  auto inside_axis = [](const std::vector<double>& ax, double x, const char* what) {
    if (!within(ax, x)) throw std::invalid_argument(fmt::format("normalization point {} lies outside the grid", what));
  };
  inside_axis(g.m, g.np.m0, "m*_0");
  inside_axis(g.m, g.np.m1, "m*_1");
  inside_axis(g.k, g.np.k, "k*");
  inside_axis(g.l, g.np.l, "l*");
  insert_node(g.m, g.np.m0);
  insert_node(g.m, g.np.m1);
  insert_node(g.k, g.np.k);
  insert_node(g.l, g.np.l);
  if (g.z_discrete) {
    if (std::find(g.z.begin(), g.z.end(), g.np.z) == g.z.end())
      throw std::invalid_argument("normalization point z* is not a level of z");
  } else {
    inside_axis(g.z, g.np.z, "z*");
    insert_node(g.z, g.np.z);
  }

  g.lag_star = {quantile(pr.m1, 0.5), quantile(pr.k1, 0.5), quantile(pr.l1, 0.5),
                g.z_discrete ? g.z1.front() : quantile(pr.z1, 0.5)};
  insert_node(g.m1, g.lag_star[0]);
  insert_node(g.k1, g.lag_star[1]);
  insert_node(g.l1, g.lag_star[2]);
  if (!g.z_discrete) insert_node(g.z1, g.lag_star[3]);
  return g;
}

CondCdf make_cdf(const PanelPair& pr, const CondCdfOptions& opt) {
  std::vector<std::vector<double>> v{pr.k, pr.l, pr.z, pr.m1, pr.k1, pr.l1, pr.z1};
  std::vector<std::string> names;
  for (std::size_t j = 0; j < kVDims; ++j) names.emplace_back(v_name(j));
  std::vector<bool> disc{false, false, pr.z_discrete, false, false, false, pr.z_discrete};
  return CondCdf(pr.m, std::move(v), std::move(names), std::move(disc), opt);
}

Step1Result step1(const PanelPair& pr, const IdentGrid& g, const IdentOptions& opt) {
  std::vector<std::vector<double>> cols{pr.m, pr.k, pr.l};
  std::vector<std::string> names{"m", "k", "l"};
  if (!g.z_discrete) {
    cols.push_back(pr.z);
    names.emplace_back("z");
  }
  auto h = select_bandwidth(cols, opt.rule, cols.size(), names);
  for (double& v : h) v *= opt.mean_bw_scale;
  if (g.z_discrete) h.push_back(0.0);

  Step1Result out;
  out.bw = h;
  out.phi = cond_mean(pr.r, {pr.m, pr.k, pr.l, pr.z}, g.current_axes(), h, {"m", "k", "l", "z"});
  const std::size_t n = pr.size();
  out.rbar.resize(n);
  out.eps.resize(n);
  out.inside.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.rbar[i] = out.phi({pr.m[i], pr.k[i], pr.l[i], pr.z[i]});
    out.eps[i] = pr.r[i] - out.rbar[i];
    out.inside[i] = g.inside_current(pr.m[i], pr.k[i], pr.l[i], pr.z[i]);
  }
  return out;
}

}  // namespace revid
