#include "revid/cond_cdf.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace revid {

namespace {

constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double norm_pdf(double u) { return kInvSqrt2Pi * std::exp(-0.5 * u * u); }
inline double norm_cdf(double u) { return 0.5 * std::erfc(-u / std::sqrt(2.0)); }

}  // namespace

CondCdf::CondCdf(std::vector<double> m, std::vector<std::vector<double>> v, std::vector<std::string> names,
                 std::vector<bool> discrete, const CondCdfOptions& opt)
    : m_(std::move(m)), v_(std::move(v)), names_(std::move(names)), discrete_(std::move(discrete)) {
  init(opt);
  std::vector<std::vector<double>> cols{m_};
  std::vector<std::string> cnames{"m"};
  for (std::size_t j = 0; j < v_.size(); ++j)
    if (!discrete_[j]) {
      cols.push_back(v_[j]);
      cnames.push_back(names_[j]);
    }
  auto h = select_bandwidth(cols, opt.rule, cols.size(), cnames);
  bw_.assign(1 + v_.size(), 0.0);
  bw_[0] = h[0] * opt.bw_scale * opt.m_bw_scale;
  std::size_t c = 1;
  for (std::size_t j = 0; j < v_.size(); ++j)
    if (!discrete_[j]) bw_[1 + j] = h[c++] * opt.bw_scale;
}

CondCdf::CondCdf(std::vector<double> m, std::vector<std::vector<double>> v, std::vector<std::string> names,
                 std::vector<bool> discrete, std::vector<double> bw, const CondCdfOptions& opt)
    : m_(std::move(m)), v_(std::move(v)), names_(std::move(names)), discrete_(std::move(discrete)),
      bw_(std::move(bw)) {
  init(opt);
  if (bw_.size() != 1 + v_.size()) throw std::invalid_argument("CondCdf: bandwidth count mismatch");
  for (std::size_t j = 0; j < bw_.size(); ++j) {
    if (j > 0 && discrete_[j - 1]) {
      bw_[j] = 0.0;
      continue;
    }
    if (!(bw_[j] > 0.0)) throw std::invalid_argument("CondCdf: bandwidths must be positive");
  }
}

void CondCdf::init(const CondCdfOptions& opt) {
  if (names_.empty())
    for (std::size_t j = 0; j < v_.size(); ++j) names_.push_back(fmt::format("v{}", j));
  if (discrete_.empty()) discrete_.assign(v_.size(), false);
  if (names_.size() != v_.size() || discrete_.size() != v_.size())
    throw std::invalid_argument("CondCdf: names/discrete flags must match conditioning columns");
  for (const auto& col : v_)
    if (col.size() != m_.size()) throw std::invalid_argument("CondCdf: column length mismatch");
  for (double x : m_)
    if (!std::isfinite(x)) throw std::invalid_argument("CondCdf: non-finite m");
  min_eff_ = opt.min_effective_n;
  ll_ = opt.ll;
}

double CondCdf::weights(std::span<const double> v0, std::vector<double>& w) const {
  if (v0.size() != v_.size()) throw std::invalid_argument("CondCdf: query dimension mismatch");
  w.assign(m_.size(), 1.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    double lw = 0.0;
    bool keep = true;
    for (std::size_t j = 0; j < v_.size() && keep; ++j) {
      if (discrete_[j]) {
        keep = v_[j][i] == v0[j];
      } else {
        double u = (v_[j][i] - v0[j]) / bw_[1 + j];
        lw += u * u;
      }
    }
    w[i] = keep ? std::exp(-0.5 * lw) : 0.0;
    sum += w[i];
  }
  return sum;
}

double CondCdf::effective_n(std::span<const double> v0) const {
  std::vector<double> w;
  double s = weights(v0, w), s2 = 0.0;
  for (double x : w) s2 += x * x;
  return s2 > 0.0 ? s * s / s2 : 0.0;
}

double CondCdf::cdf(double m0, std::span<const double> v0) const {
  std::vector<double> w;
  double s = weights(v0, w), s2 = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    s2 += w[i] * w[i];
    acc += w[i] * norm_cdf((m0 - m_[i]) / bw_[0]);
  }
  if (!(s > 0.0) || s * s / s2 < min_eff_)
    throw std::runtime_error("CondCdf: effective local sample below threshold");
  return acc / s;
}

double CondCdf::deriv(double m0, std::span<const double> v0, std::size_t axis) const {
  if (axis > v_.size()) throw std::out_of_range("CondCdf::deriv axis");
  if (axis > 0 && discrete_[axis - 1])
    throw std::invalid_argument(fmt::format("CondCdf::deriv: {} is discrete", names_[axis - 1]));
  std::vector<double> w;
  double s = weights(v0, w), s2 = 0.0;
  for (double x : w) s2 += x * x;
  if (!(s > 0.0) || s * s / s2 < min_eff_)
    throw std::runtime_error("CondCdf: effective local sample below threshold");
  const double hm = bw_[0];
  if (axis == 0) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m_.size(); ++i) acc += w[i] * norm_pdf((m0 - m_[i]) / hm) / hm;
    return acc / s;
  }
  const std::size_t j = axis - 1;
  const double h2 = bw_[axis] * bw_[axis];
  double g = 0.0;
  for (std::size_t i = 0; i < m_.size(); ++i) g += w[i] * norm_cdf((m0 - m_[i]) / hm);
  g /= s;
  double acc = 0.0;
  for (std::size_t i = 0; i < m_.size(); ++i)
    acc += w[i] * (v_[j][i] - v0[j]) / h2 * (norm_cdf((m0 - m_[i]) / hm) - g);
  return acc / s;
}

double cond_cdf_deriv(const CondCdf& cdf, double m0, std::span<const double> v0, std::size_t axis) {
  return cdf.deriv(m0, v0, axis);
}

CdfGradient cdf_gradient_grid(const CondCdf& cdf, const std::vector<double>& m_axis,
                              const std::vector<std::vector<double>>& v_axes) {
  const std::size_t d = cdf.dims();
  if (v_axes.size() != d) throw std::invalid_argument("cdf_gradient_grid: axis count mismatch");
  std::vector<std::size_t> disc, cont;
  std::vector<double> dval;
  for (std::size_t j = 0; j < d; ++j) {
    if (cdf.discrete(j)) {
      if (v_axes[j].size() != 1)
        throw std::invalid_argument(
            fmt::format("cdf_gradient_grid: discrete column {} needs a single level", cdf.names()[j]));
      disc.push_back(j);
      dval.push_back(v_axes[j][0]);
    } else {
      cont.push_back(j);
    }
  }
  std::vector<std::vector<double>> vcols;
  for (std::size_t j = 0; j < d; ++j) vcols.push_back(cdf.v(j));
  auto rows = cell_rows(vcols, disc, dval);
  if (rows.empty()) throw std::runtime_error("cdf_gradient_grid: empty conditioning cell");
  if (cont.empty()) throw std::invalid_argument("cdf_gradient_grid: no continuous conditioning column");

  const std::size_t na = m_axis.size();
  const double hm = cdf.bandwidths()[0];
  Eigen::MatrixXd X(rows.size(), cont.size());
  Eigen::MatrixXd Y(rows.size(), 2 * na);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::size_t i = rows[r];
    for (std::size_t c = 0; c < cont.size(); ++c) X(r, c) = vcols[cont[c]][i];
    for (std::size_t a = 0; a < na; ++a) {
      double u = (m_axis[a] - cdf.m()[i]) / hm;
      Y(r, a) = norm_cdf(u);
      Y(r, na + a) = norm_pdf(u) / hm;
    }
  }
  std::vector<std::vector<double>> cax;
  std::vector<double> cbw;
  for (auto j : cont) {
    cax.push_back(v_axes[j]);
    cbw.push_back(cdf.bandwidths()[1 + j]);
  }
  auto fit = local_linear_tensor(X, Y, cax, cbw, cdf.ll_options());

  std::vector<std::vector<double>> axes{m_axis};
  std::vector<std::string> names{"m"};
  for (std::size_t j = 0; j < d; ++j) {
    axes.push_back(v_axes[j]);
    names.push_back(cdf.names()[j]);
  }
  CdfGradient out;
  out.G = GridFn(axes, names);
  out.Gm = GridFn(axes, names);
  out.Gv.resize(d);
  for (auto j : cont) out.Gv[j] = GridFn(axes, names);
  out.ok.assign(out.G.size(), 0);
  out.weight_sum.assign(out.G.size(), 0.0);

  std::vector<std::size_t> idx(1 + d, 0);
  for (std::size_t node = 0; node < fit.n_nodes; ++node) {
    std::size_t rem = node;
    for (std::size_t c = cont.size(); c-- > 0;) {
      idx[1 + cont[c]] = rem % cax[c].size();
      rem /= cax[c].size();
    }
    for (std::size_t a = 0; a < na; ++a) {
      idx[0] = a;
      std::size_t k = out.G.flat(idx);
      out.weight_sum[k] = fit.weight_sum[node];
      if (!fit.ok[node]) continue;
      out.ok[k] = 1;
      out.G.values()[k] = fit.value(node, a);
      out.Gm.values()[k] = fit.local_mean[node * fit.n_resp + na + a];
      for (std::size_t c = 0; c < cont.size(); ++c) out.Gv[cont[c]].values()[k] = fit.slope(node, a, c);
    }
  }
  return out;
}

}  // namespace revid
