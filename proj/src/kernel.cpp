#include "revid/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <stdexcept>

#include <boost/math/tools/minima.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <tbb/parallel_for.h>

namespace revid {

double quantile(std::vector<double> x, double q) {
  if (x.empty()) throw std::invalid_argument("quantile of empty sample");
  q = std::clamp(q, 0.0, 1.0);
  double pos = q * static_cast<double>(x.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  std::nth_element(x.begin(), x.begin() + lo, x.end());
  double a = x[lo];
  if (lo + 1 >= x.size()) return a;
  double b = *std::min_element(x.begin() + lo + 1, x.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

std::vector<double> quantiles(std::vector<double> x, const std::vector<double>& qs) {
  if (x.empty()) throw std::invalid_argument("quantiles of empty sample");
  std::sort(x.begin(), x.end());
  std::vector<double> out;
  for (double q : qs) {
    double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(x.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    double a = x[lo], b = x[std::min(lo + 1, x.size() - 1)];
    out.push_back(a + (pos - static_cast<double>(lo)) * (b - a));
  }
  return out;
}

std::vector<double> quantile_grid(const std::vector<double>& x, std::size_t n, double lo, double hi) {
  std::vector<double> qs(n);
  for (std::size_t i = 0; i < n; ++i)
    qs[i] = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  auto g = quantiles(x, qs);
  g.erase(std::unique(g.begin(), g.end(), [](double a, double b) { return !(b > a); }), g.end());
  return g;
}

double silverman_constant(std::size_t joint_dims) {
  if (joint_dims <= 1) return 1.06;
  double d = static_cast<double>(joint_dims);
  return std::pow(4.0 / (d + 2.0), 1.0 / (d + 4.0));
}

namespace {

double sample_sd(const std::vector<double>& x) {
  double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

// one-dimensional least-squares cross-validation for a Gaussian kernel density
double lscv_1d(const std::vector<double>& full, double h_ref) {
  std::vector<double> x;
  const std::size_t cap = 1500;
  if (full.size() <= cap) {
    x = full;
  } else {
    double step = static_cast<double>(full.size()) / static_cast<double>(cap);
    for (std::size_t i = 0; i < cap; ++i) x.push_back(full[static_cast<std::size_t>(i * step)]);
  }
  const double n = static_cast<double>(x.size());
  const double c = 1.0 / std::sqrt(2.0 * M_PI);
  auto score = [&](double logh) {
    double h = std::exp(logh), a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = i + 1; j < x.size(); ++j) {
        double u = (x[i] - x[j]) / h;
        a += std::exp(-0.25 * u * u);
        b += std::exp(-0.5 * u * u);
      }
    double conv = (n + 2.0 * a) * c / std::sqrt(2.0) / (n * n * h);
    double loo = 2.0 * (2.0 * b) * c / (n * (n - 1.0) * h);
    return conv - loo;
  };
  auto res = boost::math::tools::brent_find_minima(score, std::log(0.05 * h_ref), std::log(3.0 * h_ref), 30);
  return std::exp(res.first);
}

}  // namespace

std::vector<double> select_bandwidth(const std::vector<std::vector<double>>& columns, BandwidthRule rule,
                                     std::size_t joint_dims, const std::vector<std::string>& names) {
  std::vector<double> out;
  for (std::size_t j = 0; j < columns.size(); ++j) {
    const auto& x = columns[j];
    std::string name = j < names.size() ? names[j] : fmt::format("column {}", j);
    if (x.size() < 50)
      throw std::invalid_argument(fmt::format("select_bandwidth: {} has fewer than 50 observations", name));
    double sd = sample_sd(x);
    if (!(sd > 0.0) || !std::isfinite(sd))
      throw std::invalid_argument(fmt::format("select_bandwidth: {} has zero variance", name));
    double n = static_cast<double>(x.size());
    double d = static_cast<double>(std::max<std::size_t>(joint_dims, 1));
    double h = silverman_constant(joint_dims) * sd * std::pow(n, -1.0 / (d + 4.0));
    if (rule == BandwidthRule::Lscv) {
      double h1 = 1.06 * sd * std::pow(n, -0.2);
      h = lscv_1d(x, h1) * h / h1;
    }
    out.push_back(h);
  }
  return out;
}

namespace {

constexpr Eigen::Index kInnerMax = 1024;
constexpr Eigen::Index kChunk = 4096;

struct NodeSolver {
  Eigen::Index d, R;
  const LocalLinearOptions& opt;

  // raw moments M (length P) at standardized query g -> coefficients in standardized units
  bool solve(const double* M, const double* g, double* coef, double& s0) const {
    const Eigen::Index q = d + 1;
    Eigen::MatrixXd A(q, q);
    s0 = M[0];
    A(0, 0) = s0;
    for (Eigen::Index j = 0; j < d; ++j) A(0, j + 1) = A(j + 1, 0) = M[1 + j] - g[j] * s0;
    Eigen::Index idx = 1 + d;
    for (Eigen::Index j = 0; j < d; ++j)
      for (Eigen::Index k = j; k < d; ++k, ++idx) {
        double v = M[idx] - g[j] * M[1 + k] - g[k] * M[1 + j] + g[j] * g[k] * s0;
        A(j + 1, k + 1) = A(k + 1, j + 1) = v;
      }
    if (!(s0 > opt.min_weight)) return false;
    Eigen::MatrixXd C = A.bottomRightCorner(d, d) / s0 -
                        (A.block(1, 0, d, 1) / s0) * (A.block(0, 1, 1, d) / s0);
    if (d > 0) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C, Eigen::EigenvaluesOnly);
      if (!(es.eigenvalues().minCoeff() > opt.min_local_var)) return false;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
    Eigen::VectorXd b(q);
    for (Eigen::Index r = 0; r < R; ++r) {
      const double* T = M + idx + r * q;
      b(0) = T[0];
      for (Eigen::Index j = 0; j < d; ++j) b(j + 1) = T[1 + j] - g[j] * T[0];
      Eigen::VectorXd beta = ldlt.solve(b);
      for (Eigen::Index j = 0; j < q; ++j) coef[r * q + j] = beta(j);
    }
    return std::isfinite(coef[0]);
  }
};

}  // namespace

LocalLinearFit local_linear_tensor(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                   const std::vector<std::vector<double>>& axes,
                                   const std::vector<double>& bw, const LocalLinearOptions& opt) {
  const Eigen::Index N = X.rows(), d = X.cols(), R = Y.cols();
  if (Y.rows() != N) throw std::invalid_argument("local_linear_tensor: X and Y row mismatch");
  if (static_cast<Eigen::Index>(axes.size()) != d || static_cast<Eigen::Index>(bw.size()) != d)
    throw std::invalid_argument("local_linear_tensor: axes/bandwidth count must match columns");
  if (d == 0 || N == 0) throw std::invalid_argument("local_linear_tensor: empty design");
  for (double h : bw)
    if (!(h > 0.0)) throw std::invalid_argument("local_linear_tensor: bandwidths must be positive");

  Eigen::VectorXd center = X.colwise().mean().transpose();
  Eigen::MatrixXd U(N, d);
  for (Eigen::Index j = 0; j < d; ++j) U.col(j) = (X.col(j).array() - center(j)) / bw[j];

  const Eigen::Index q = d + 1;
  const Eigen::Index P = 1 + d + d * (d + 1) / 2 + R * q;
  Eigen::MatrixXd F(N, P);
  F.col(0).setOnes();
  for (Eigen::Index j = 0; j < d; ++j) F.col(1 + j) = U.col(j);
  Eigen::Index idx = 1 + d;
  for (Eigen::Index j = 0; j < d; ++j)
    for (Eigen::Index k = j; k < d; ++k) F.col(idx++) = U.col(j).cwiseProduct(U.col(k));
  for (Eigen::Index r = 0; r < R; ++r) {
    F.col(idx++) = Y.col(r);
    for (Eigen::Index j = 0; j < d; ++j) F.col(idx++) = Y.col(r).cwiseProduct(U.col(j));
  }

  std::vector<Eigen::Index> n(d);
  std::vector<Eigen::MatrixXd> E(d);
  std::vector<std::vector<double>> g(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    n[j] = static_cast<Eigen::Index>(axes[j].size());
    if (n[j] == 0) throw std::invalid_argument("local_linear_tensor: empty axis");
    E[j].resize(N, n[j]);
    for (Eigen::Index a = 0; a < n[j]; ++a) {
      double ga = (axes[j][a] - center(j)) / bw[j];
      g[j].push_back(ga);
      E[j].col(a) = (-0.5 * (U.col(j).array() - ga).square()).exp();
    }
  }

  Eigen::Index split = d, inner = 1;
  while (split > 0 && inner * n[split - 1] <= kInnerMax) inner *= n[--split];
  if (split == d) inner = n[--split];
  Eigen::Index outer = 1;
  for (Eigen::Index j = 0; j < split; ++j) outer *= n[j];

  LocalLinearFit fit;
  fit.dims = static_cast<std::size_t>(d);
  fit.n_resp = static_cast<std::size_t>(R);
  fit.n_nodes = static_cast<std::size_t>(outer * inner);
  fit.coef.assign(fit.n_nodes * R * q, 0.0);
  fit.ok.assign(fit.n_nodes, 0);
  fit.weight_sum.assign(fit.n_nodes, 0.0);
  fit.local_mean.assign(fit.n_nodes * R, 0.0);
  const Eigen::Index ypos = 1 + d + d * (d + 1) / 2;

  NodeSolver solver{d, R, opt};
  std::vector<Eigen::Index> failed_nodes;
  std::mutex failed_mutex;

  tbb::parallel_for(Eigen::Index{0}, outer, [&](Eigen::Index o) {
    std::vector<Eigen::Index> ia(d, 0);
    Eigen::Index rem = o;
    for (Eigen::Index j = split; j-- > 0;) {
      ia[j] = rem % n[j];
      rem /= n[j];
    }
    Eigen::VectorXd wout = Eigen::VectorXd::Ones(N);
    for (Eigen::Index j = 0; j < split; ++j) wout.array() *= E[j].col(ia[j]).array();

    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(inner, P);
    Eigen::MatrixXd K, B;
    for (Eigen::Index r0 = 0; r0 < N; r0 += kChunk) {
      Eigen::Index rows = std::min(kChunk, N - r0);
      K.resize(rows, inner);
      for (Eigen::Index c = 0; c < inner; ++c) {
        Eigen::Index rc = c;
        auto col = K.col(c);
        col.setOnes();
        for (Eigen::Index j = d; j-- > split;) {
          col.array() *= E[j].block(r0, rc % n[j], rows, 1).array();
          rc /= n[j];
        }
      }
      B = F.middleRows(r0, rows).array().colwise() * wout.segment(r0, rows).array();
      M.noalias() += K.transpose() * B;
    }
    std::vector<double> gq(d), coef(R * q);
    for (Eigen::Index c = 0; c < inner; ++c) {
      Eigen::Index rc = c;
      for (Eigen::Index j = d; j-- > split;) {
        ia[j] = rc % n[j];
        rc /= n[j];
      }
      for (Eigen::Index j = 0; j < d; ++j) gq[j] = g[j][ia[j]];
      Eigen::RowVectorXd row = M.row(c);
      double s0 = 0.0;
      Eigen::Index node = o * inner + c;
      bool good = solver.solve(row.data(), gq.data(), coef.data(), s0);
      fit.weight_sum[node] = s0;
      if (good) {
        fit.ok[node] = 1;
        for (Eigen::Index r = 0; r < R; ++r) fit.local_mean[node * R + r] = row(ypos + r * q) / row(0);
        for (Eigen::Index r = 0; r < R; ++r)
          for (Eigen::Index j = 0; j < q; ++j)
            fit.coef[(node * R + r) * q + j] = j == 0 ? coef[r * q] : coef[r * q + j] / bw[j - 1];
      } else {
        std::lock_guard<std::mutex> lock(failed_mutex);
        failed_nodes.push_back(node);
      }
    }
  });

  // retry singular nodes one at a time with wider bandwidths
  std::sort(failed_nodes.begin(), failed_nodes.end());
  for (Eigen::Index node : failed_nodes) {
    std::vector<Eigen::Index> ia(d);
    Eigen::Index rem = node;
    for (Eigen::Index j = d; j-- > 0;) {
      ia[j] = rem % n[j];
      rem /= n[j];
    }
    for (int t = 1; t <= opt.max_widen; ++t) {
      double f = std::pow(opt.widen_factor, t);
      Eigen::VectorXd M = Eigen::VectorXd::Zero(P);
      std::vector<double> gq(d, 0.0);
      for (Eigen::Index i = 0; i < N; ++i) {
        double lw = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
          double u = (U(i, j) - g[j][ia[j]]) / f;
          lw += u * u;
        }
        double w = std::exp(-0.5 * lw);
        if (w == 0.0) continue;
        // features in coordinates centred at the query and scaled by the wider bandwidth
        Eigen::Index k = 0;
        M(k++) += w;
        std::vector<double> u(d);
        for (Eigen::Index j = 0; j < d; ++j) u[j] = (U(i, j) - g[j][ia[j]]) / f;
        for (Eigen::Index j = 0; j < d; ++j) M(k++) += w * u[j];
        for (Eigen::Index j = 0; j < d; ++j)
          for (Eigen::Index l = j; l < d; ++l) M(k++) += w * u[j] * u[l];
        for (Eigen::Index r = 0; r < R; ++r) {
          M(k++) += w * Y(i, r);
          for (Eigen::Index j = 0; j < d; ++j) M(k++) += w * Y(i, r) * u[j];
        }
      }
      std::vector<double> coef(R * q);
      double s0 = 0.0;
      if (solver.solve(M.data(), gq.data(), coef.data(), s0)) {
        fit.ok[node] = 1;
        fit.weight_sum[node] = s0;
        ++fit.widened;
        for (Eigen::Index r = 0; r < R; ++r) fit.local_mean[node * R + r] = M(ypos + r * q) / M(0);
        for (Eigen::Index r = 0; r < R; ++r)
          for (Eigen::Index j = 0; j < q; ++j)
            fit.coef[(node * R + r) * q + j] = j == 0 ? coef[r * q] : coef[r * q + j] / (bw[j - 1] * f);
        break;
      }
    }
  }
  if (fit.widened) spdlog::warn("local-linear: widened bandwidth at {} singular nodes", fit.widened);
  return fit;
}

std::vector<std::size_t> cell_rows(const std::vector<std::vector<double>>& X,
                                   const std::vector<std::size_t>& cols, const std::vector<double>& values) {
  std::vector<std::size_t> rows;
  const std::size_t N = X.empty() ? 0 : X[0].size();
  for (std::size_t i = 0; i < N; ++i) {
    bool match = true;
    for (std::size_t c = 0; c < cols.size() && match; ++c) match = X[cols[c]][i] == values[c];
    if (match) rows.push_back(i);
  }
  return rows;
}

GridFn cond_mean(const std::vector<double>& y, const std::vector<std::vector<double>>& X,
                 const std::vector<std::vector<double>>& axes, const std::vector<double>& bw,
                 const std::vector<std::string>& names, const LocalLinearOptions& opt) {
  const std::size_t D = X.size();
  if (axes.size() != D || bw.size() != D) throw std::invalid_argument("cond_mean: dimension mismatch");
  for (const auto& col : X)
    if (col.size() != y.size()) throw std::invalid_argument("cond_mean: column length mismatch");
  for (double v : y)
    if (!std::isfinite(v)) throw std::invalid_argument("cond_mean: non-finite response");
  std::vector<std::size_t> cont, disc;
  for (std::size_t j = 0; j < D; ++j) {
    if (bw[j] < 0.0 || !std::isfinite(bw[j])) throw std::invalid_argument("cond_mean: negative bandwidth");
    (bw[j] > 0.0 ? cont : disc).push_back(j);
  }

  GridFn out(axes, names);
  std::vector<std::vector<double>> slopes(D, std::vector<double>(out.size(), 0.0));

  // iterate over combinations of discrete axis values
  std::size_t n_cells = 1;
  for (auto j : disc) n_cells *= axes[j].size();
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    std::vector<double> dval(disc.size());
    std::vector<std::size_t> didx(disc.size());
    std::size_t rem = cell;
    for (std::size_t c = disc.size(); c-- > 0;) {
      didx[c] = rem % axes[disc[c]].size();
      rem /= axes[disc[c]].size();
      dval[c] = axes[disc[c]][didx[c]];
    }
    auto rows = cell_rows(X, disc, dval);
    if (rows.empty()) throw std::invalid_argument("cond_mean: empty discrete cell");

    std::vector<std::size_t> idx(D);
    for (std::size_t c = 0; c < disc.size(); ++c) idx[disc[c]] = didx[c];
    if (cont.empty()) {
      double s = 0.0;
      for (auto i : rows) s += y[i];
      out.values()[out.flat(idx)] = s / static_cast<double>(rows.size());
      continue;
    }
    Eigen::MatrixXd Xc(rows.size(), cont.size());
    Eigen::MatrixXd Yc(rows.size(), 1);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < cont.size(); ++c) Xc(r, c) = X[cont[c]][rows[r]];
      Yc(r, 0) = y[rows[r]];
    }
    std::vector<std::vector<double>> cax;
    std::vector<double> cbw;
    for (auto j : cont) {
      cax.push_back(axes[j]);
      cbw.push_back(bw[j]);
    }
    auto fit = local_linear_tensor(Xc, Yc, cax, cbw, opt);
    for (std::size_t node = 0; node < fit.n_nodes; ++node) {
      if (!fit.ok[node]) throw std::runtime_error("cond_mean: singular local design after widening");
      std::size_t rem2 = node;
      for (std::size_t c = cont.size(); c-- > 0;) {
        idx[cont[c]] = rem2 % axes[cont[c]].size();
        rem2 /= axes[cont[c]].size();
      }
      std::size_t k = out.flat(idx);
      out.values()[k] = fit.value(node, 0);
      for (std::size_t c = 0; c < cont.size(); ++c) slopes[cont[c]][k] = fit.slope(node, 0, c);
    }
  }
  for (auto j : cont) out.set_deriv(j, std::move(slopes[j]));
  return out;
}

}  // namespace revid
