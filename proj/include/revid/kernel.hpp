#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "revid/grid.hpp"

namespace revid {

enum class BandwidthRule { Silverman, Lscv };

// Sample quantile with linear interpolation between order statistics.
double quantile(std::vector<double> x, double q);
std::vector<double> quantiles(std::vector<double> x, const std::vector<double>& qs);

// n points at evenly spaced probabilities from lo to hi. Ties collapse, so
// the result may be shorter than n.
std::vector<double> quantile_grid(const std::vector<double>& x, std::size_t n = 21, double lo = 0.05,
                                  double hi = 0.95);

// Normal-reference constant: 1.06 for one dimension, (4/(d+2))^(1/(d+4)) otherwise.
double silverman_constant(std::size_t joint_dims);

// Per-column bandwidths. joint_dims is the number of continuous dimensions the
// kernel will smooth over jointly; it sets the rate n^(-1/(d+4)).
std::vector<double> select_bandwidth(const std::vector<std::vector<double>>& columns, BandwidthRule rule,
                                     std::size_t joint_dims = 1,
                                     const std::vector<std::string>& names = {});

// Local-linear fits of several responses on a tensor grid of query points.
struct LocalLinearFit {
  std::size_t n_nodes = 0, n_resp = 0, dims = 0;
  // coef[(node * n_resp + r) * (dims + 1) + j]: j = 0 intercept, j >= 1 slope on dim j-1
  std::vector<double> coef;
  std::vector<unsigned char> ok;
  std::vector<double> weight_sum;
  std::vector<double> local_mean;  // kernel-weighted mean, local_mean[node * n_resp + r]
  std::size_t widened = 0;

  double value(std::size_t node, std::size_t r) const { return coef[(node * n_resp + r) * (dims + 1)]; }
  double slope(std::size_t node, std::size_t r, std::size_t j) const {
    return coef[(node * n_resp + r) * (dims + 1) + 1 + j];
  }
};

struct LocalLinearOptions {
  double min_weight = 1e-8;     // kernel weight sum below this marks the node singular
  double min_local_var = 1e-6;  // smallest local design variance, in bandwidth units
  int max_widen = 3;
  double widen_factor = 1.5;
};

// X: N x d continuous regressors; Y: N x R responses; axes: d query axes
// (size-one axes fix that coordinate); bw: d positive bandwidths.
// Nodes are ordered row-major over axes (first axis slowest).
LocalLinearFit local_linear_tensor(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                   const std::vector<std::vector<double>>& axes,
                                   const std::vector<double>& bw, const LocalLinearOptions& opt = {});

// Local-linear E[y | x] on the tensor grid given by axes. Columns with a zero
// bandwidth are treated as discrete and conditioned on exactly. Slopes on
// continuous axes are stored as derivative tensors of the result.
GridFn cond_mean(const std::vector<double>& y, const std::vector<std::vector<double>>& X,
                 const std::vector<std::vector<double>>& axes, const std::vector<double>& bw,
                 const std::vector<std::string>& names = {}, const LocalLinearOptions& opt = {});

// Rows i with x[j][i] == value[j] for every listed discrete column.
std::vector<std::size_t> cell_rows(const std::vector<std::vector<double>>& X,
                                   const std::vector<std::size_t>& cols, const std::vector<double>& values);

}  // namespace revid
