#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "revid/grid.hpp"
#include "revid/kernel.hpp"

namespace revid {

struct CondCdfOptions {
  BandwidthRule rule = BandwidthRule::Silverman;
  double bw_scale = 3.0;       // multiplies every selected bandwidth
  double m_bw_scale = 2.0;     // extra factor on the m bandwidth
  double min_effective_n = 20; // Kish effective sample of the conditioning weights
  LocalLinearOptions ll{};
};

// Smoothed estimator of P(m <= m0 | v = v0): integrated Gaussian kernel in m,
// product Gaussian kernel over continuous v, exact matching on discrete v.
class CondCdf {
 public:
  CondCdf() = default;
  CondCdf(std::vector<double> m, std::vector<std::vector<double>> v, std::vector<std::string> names,
          std::vector<bool> discrete, const CondCdfOptions& opt = {});
  // explicit bandwidths: bw[0] for m, bw[1 + j] for v column j (ignored when discrete)
  CondCdf(std::vector<double> m, std::vector<std::vector<double>> v, std::vector<std::string> names,
          std::vector<bool> discrete, std::vector<double> bw, const CondCdfOptions& opt = {});

  std::size_t dims() const { return v_.size(); }
  std::size_t size() const { return m_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  bool discrete(std::size_t j) const { return discrete_[j]; }
  const std::vector<double>& bandwidths() const { return bw_; }
  const std::vector<double>& m() const { return m_; }
  const std::vector<double>& v(std::size_t j) const { return v_[j]; }
  const LocalLinearOptions& ll_options() const { return ll_; }

  double effective_n(std::span<const double> v0) const;
  double cdf(double m0, std::span<const double> v0) const;
  // axis 0 is m; axis 1 + j is v column j (continuous columns only)
  double deriv(double m0, std::span<const double> v0, std::size_t axis) const;

 private:
  void init(const CondCdfOptions& opt);
  // kernel weights over rows; returns sum and fills w
  double weights(std::span<const double> v0, std::vector<double>& w) const;

  std::vector<double> m_;
  std::vector<std::vector<double>> v_;
  std::vector<std::string> names_;
  std::vector<bool> discrete_;
  std::vector<double> bw_;
  double min_eff_ = 20;
  LocalLinearOptions ll_{};
};

double cond_cdf_deriv(const CondCdf& cdf, double m0, std::span<const double> v0, std::size_t axis);

// Local-linear estimates of G, dG/dm and dG/dv on the tensor grid
// m_axis x v_axes. Discrete columns must have a single-value axis. G is the
// intercept of the smoothed indicator, dG/dm the intercept of the kernel
// density in m, and dG/dv_j the local slope of the smoothed indicator.
struct CdfGradient {
  GridFn G, Gm;
  std::vector<GridFn> Gv;           // per v column; empty grid for discrete columns
  std::vector<unsigned char> ok;    // per node of G
  std::vector<double> weight_sum;   // conditioning kernel mass per node
};

CdfGradient cdf_gradient_grid(const CondCdf& cdf, const std::vector<double>& m_axis,
                              const std::vector<std::vector<double>>& v_axes);

}  // namespace revid
