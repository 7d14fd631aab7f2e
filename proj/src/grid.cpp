#include "revid/grid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

namespace revid {

namespace {

// cell index lo and weight on lo+1 for x on a sorted axis, clamped to the range
inline void locate(const std::vector<double>& ax, double x, std::size_t& lo, double& w) {
  const std::size_t n = ax.size();
  if (n == 1) {
    lo = 0;
    w = 0.0;
    return;
  }
  if (x <= ax.front()) {
    lo = 0;
    w = 0.0;
    return;
  }
  if (x >= ax.back()) {
    lo = n - 2;
    w = 1.0;
    return;
  }
  auto it = std::upper_bound(ax.begin(), ax.end(), x);
  lo = static_cast<std::size_t>(it - ax.begin()) - 1;
  w = (x - ax[lo]) / (ax[lo + 1] - ax[lo]);
}

}  // namespace

GridFn::GridFn(std::vector<std::vector<double>> axes, std::vector<double> values,
               std::vector<std::string> names)
    : axes_(std::move(axes)), names_(std::move(names)), values_(std::move(values)) {
  check();
}

GridFn::GridFn(std::vector<std::vector<double>> axes, std::vector<std::string> names)
    : axes_(std::move(axes)), names_(std::move(names)) {
  std::size_t n = 1;
  for (const auto& a : axes_) n *= a.size();
  values_.assign(n, 0.0);
  check();
}

void GridFn::check() {
  if (axes_.empty() || axes_.size() > kMaxDims) throw std::invalid_argument("GridFn: bad dimension count");
  std::size_t n = 1;
  for (const auto& a : axes_) {
    if (a.empty()) throw std::invalid_argument("GridFn: empty axis");
    for (std::size_t i = 1; i < a.size(); ++i)
      if (!(a[i] > a[i - 1])) throw std::invalid_argument("GridFn: axis not strictly increasing");
    n *= a.size();
  }
  if (values_.size() != n) throw std::invalid_argument("GridFn: value count does not match axes");
  for (double v : values_)
    if (!std::isfinite(v)) throw std::invalid_argument("GridFn: non-finite value");
  if (names_.empty())
    for (std::size_t d = 0; d < axes_.size(); ++d) names_.push_back(fmt::format("x{}", d));
  if (names_.size() != axes_.size()) throw std::invalid_argument("GridFn: name count mismatch");
  strides_.assign(axes_.size(), 1);
  for (std::size_t d = axes_.size(); d-- > 1;) strides_[d - 1] = strides_[d] * axes_[d].size();
  derivs_.resize(axes_.size());
}

std::size_t GridFn::flat(std::span<const std::size_t> idx) const {
  std::size_t k = 0;
  for (std::size_t d = 0; d < axes_.size(); ++d) k += idx[d] * strides_[d];
  return k;
}

std::vector<std::size_t> GridFn::unflat(std::size_t k) const {
  std::vector<std::size_t> idx(axes_.size());
  for (std::size_t d = 0; d < axes_.size(); ++d) {
    idx[d] = k / strides_[d];
    k %= strides_[d];
  }
  return idx;
}

std::vector<double> GridFn::node(std::size_t k) const {
  auto idx = unflat(k);
  std::vector<double> x(axes_.size());
  for (std::size_t d = 0; d < axes_.size(); ++d) x[d] = axes_[d][idx[d]];
  return x;
}

double GridFn::interp(const std::vector<double>& vals, std::span<const double> x) const {
  const std::size_t nd = axes_.size();
  if (x.size() != nd) throw std::invalid_argument("GridFn: point dimension mismatch");
  std::size_t lo[kMaxDims];
  double w[kMaxDims];
  std::size_t base = 0;
  for (std::size_t d = 0; d < nd; ++d) {
    locate(axes_[d], x[d], lo[d], w[d]);
    base += lo[d] * strides_[d];
  }
  double acc = 0.0;
  const std::size_t corners = std::size_t{1} << nd;
  for (std::size_t c = 0; c < corners; ++c) {
    double wt = 1.0;
    std::size_t off = base;
    for (std::size_t d = 0; d < nd; ++d) {
      if (c >> d & 1U) {
        if (axes_[d].size() == 1 || w[d] == 0.0) {
          wt = 0.0;
          break;
        }
        wt *= w[d];
        off += strides_[d];
      } else {
        wt *= 1.0 - w[d];
      }
    }
    if (wt != 0.0) acc += wt * vals[off];
  }
  return acc;
}

double GridFn::operator()(std::span<const double> x) const { return interp(values_, x); }

double GridFn::deriv(std::span<const double> x, std::size_t d) const {
  if (d >= axes_.size()) throw std::out_of_range("GridFn::deriv axis");
  if (has_deriv(d)) return interp(derivs_[d], x);
  const auto& ax = axes_[d];
  if (ax.size() == 1) return 0.0;
  std::size_t lo;
  double w;
  locate(ax, x[d], lo, w);
  double xs[kMaxDims];
  for (std::size_t j = 0; j < x.size(); ++j) xs[j] = x[j];
  std::span<const double> sp(xs, x.size());
  xs[d] = ax[lo];
  double a = interp(values_, sp);
  xs[d] = ax[lo + 1];
  double b = interp(values_, sp);
  return (b - a) / (ax[lo + 1] - ax[lo]);
}

void GridFn::set_deriv(std::size_t d, std::vector<double> values) {
  if (d >= axes_.size()) throw std::out_of_range("GridFn::set_deriv axis");
  if (!values.empty() && values.size() != values_.size())
    throw std::invalid_argument("GridFn::set_deriv size mismatch");
  derivs_[d] = std::move(values);
}

bool GridFn::inside(std::span<const double> x, double tol) const {
  for (std::size_t d = 0; d < axes_.size(); ++d) {
    double span = axes_[d].back() - axes_[d].front();
    double t = tol * std::max(1.0, span);
    if (x[d] < axes_[d].front() - t || x[d] > axes_[d].back() + t) return false;
  }
  return true;
}

void GridFn::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& n : names_) out << n << ',';
  out << "value";
  for (std::size_t d = 0; d < dims(); ++d)
    if (has_deriv(d)) out << ",d_" << names_[d];
  out << '\n';
  for (std::size_t k = 0; k < values_.size(); ++k) {
    for (double v : node(k)) out << fmt::format("{}", v) << ',';
    out << fmt::format("{}", values_[k]);
    for (std::size_t d = 0; d < dims(); ++d)
      if (has_deriv(d)) out << ',' << fmt::format("{}", derivs_[d][k]);
    out << '\n';
  }
}

nlohmann::json GridFn::to_json() const {
  nlohmann::json j;
  j["names"] = names_;
  j["axes"] = axes_;
  j["values"] = values_;
  nlohmann::json dj = nlohmann::json::object();
  for (std::size_t d = 0; d < dims(); ++d)
    if (has_deriv(d)) dj[names_[d]] = derivs_[d];
  j["derivatives"] = dj;
  return j;
}

GridFn GridFn::from_json(const nlohmann::json& j) {
  GridFn g(j.at("axes").get<std::vector<std::vector<double>>>(), j.at("values").get<std::vector<double>>(),
           j.at("names").get<std::vector<std::string>>());
  if (j.contains("derivatives"))
    for (std::size_t d = 0; d < g.dims(); ++d)
      if (j["derivatives"].contains(g.names_[d]))
        g.set_deriv(d, j["derivatives"][g.names_[d]].get<std::vector<double>>());
  return g;
}

}  // namespace revid
