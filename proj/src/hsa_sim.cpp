#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>
#include <tbb/parallel_for.h>

#include "revid/dgp.hpp"
#include "revid/rng.hpp"

namespace revid {

double HsaShare::log_share(double xi, double z) const {
  double u = std::log(xi);
  return log_kappa + rho(z) * u - 0.5 * delta * u * u;
}
double HsaShare::elasticity(double xi, double z) const { return rho(z) - delta * std::log(xi); }
double HsaShare::operator()(double xi, double z) const { return std::exp(log_share(xi, z)); }

namespace {

struct Draw {
  double z, k, l, omega, eps, eta;
};

// ln Phi + ln S(xi) + ln eps(xi) + ln theta_m - p_m - m, decreasing in m.
double foc(const HsaShare& s, const TrueStructure& ts, const Draw& d, double log_phi, double log_a,
           double m, double* slope) {
  double y = ts.theta0 + ts.theta_m * m + ts.theta_k * d.k + ts.theta_l * d.l + d.omega;
  double u = y - log_a;
  double el = s.rho(d.z) - s.delta * u;
  if (el <= 0.0) {
    if (slope) *slope = -1.0;
    return -std::numeric_limits<double>::infinity();
  }
  if (slope) *slope = ts.theta_m * (el - s.delta / el) - 1.0;
  return log_phi + s.log_kappa + s.rho(d.z) * u - 0.5 * s.delta * u * u + std::log(el) +
         std::log(ts.theta_m) - ts.p_m - m;
}

double solve_m(const HsaShare& s, const TrueStructure& ts, const Draw& d, double log_phi, double log_a,
               double tol) {
  double lo = -1.0, hi = 1.0;
  int guard = 0;
  while (foc(s, ts, d, log_phi, log_a, lo, nullptr) <= 0.0) {
    lo -= 2.0 * (hi - lo);
    if (++guard > 200) throw std::runtime_error("simulate_hsa: material bracket not found");
  }
  while (foc(s, ts, d, log_phi, log_a, hi, nullptr) >= 0.0) {
    hi += 2.0 * (hi - lo);
    if (++guard > 200) throw std::runtime_error("simulate_hsa: material bracket not found");
  }
  double m = 0.5 * (lo + hi);
  for (int it = 0; it < 400; ++it) {
    double slope = 0.0;
    double g = foc(s, ts, d, log_phi, log_a, m, &slope);
    if (std::abs(g) < tol) return m;
    if (g > 0.0) lo = m; else hi = m;
    double next = std::isfinite(g) ? m - g / slope : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    m = next;
    if (hi - lo < 1e-15 * std::max(1.0, std::abs(m))) break;
  }
  double g = foc(s, ts, d, log_phi, log_a, m, nullptr);
  if (!(std::abs(g) < 1e3 * tol))
    throw std::runtime_error(fmt::format("simulate_hsa: material FOC did not converge (residual {})", g));
  return m;
}

// ln A solving sum_i S(Y_i / A, z_i) = 1.
double solve_log_a(const HsaShare& s, const std::vector<double>& y, const std::vector<double>& z) {
  auto excess = [&](double la) {
    double tot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      double u = y[i] - la;
      // beyond the peak the share is held at its maximum so the sum stays monotone
      double peak = s.rho(z[i]) / std::max(s.delta, 1e-300);
      if (s.delta > 0.0 && u > peak) u = peak;
      tot += std::exp(s.log_kappa + s.rho(z[i]) * u - 0.5 * s.delta * u * u);
    }
    return tot - 1.0;
  };
  double lo = -1.0, hi = 1.0;
  int guard = 0;
  while (excess(lo) < 0.0) {
    lo -= 2.0 * (hi - lo);
    if (++guard > 60) throw std::runtime_error("simulate_hsa: aggregator bracket not found");
  }
  while (excess(hi) > 0.0) {
    hi += 2.0 * (hi - lo);
    if (++guard > 60) throw std::runtime_error("simulate_hsa: aggregator bracket not found");
  }
  for (int it = 0; it < 200 && hi - lo > 1e-14; ++it) {
    double mid = 0.5 * (lo + hi);
    if (excess(mid) > 0.0) lo = mid; else hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

FirmPanel simulate_hsa(const HsaShare& share_in, const TrueStructure& ts, std::size_t n_firms,
                       int n_periods, std::uint64_t seed, const HsaSimOptions& opt,
                       std::vector<double>* aggregator) {
  ts.validate();
  if (n_periods < 1) throw std::invalid_argument("simulate_hsa needs n_periods >= 1");
  if (n_firms == 0) throw std::invalid_argument("simulate_hsa needs firms");
  HsaShare share = share_in;
  if (opt.auto_kappa) share.log_kappa = -std::log(static_cast<double>(n_firms));
  for (double z : {0.0, 1.0})
    if (!(share.rho(z) > 0.0 && share.rho(z) < 1.0))
      throw std::invalid_argument("simulate_hsa: share elasticity at xi=1 must lie in (0,1)");

  // latent states follow the same laws as the CES simulator
  std::vector<std::vector<Draw>> draws(n_periods, std::vector<Draw>(n_firms));
  tbb::parallel_for(std::size_t{0}, n_firms, [&](std::size_t i) {
    double k = 0, l = 0, omega = 0;
    for (int t = 0; t < n_periods; ++t) {
      Stream rs(seed, i, t);
      double z = ts.z_law == ZLaw::Bernoulli ? (rs.bernoulli(ts.z_prob) ? 1.0 : 0.0) : rs.uniform();
      double ek = rs.normal(), el = rs.normal(), eeta = rs.normal(), eeps = rs.normal();
      double sig = ts.sigma_eta_at(t), eta;
      if (t == 0) {
        k = ts.k_law.mean + ts.k_law.sd * ek;
        l = ts.l_law.mean + ts.l_law.sd * el;
        omega = ts.h0 / (1.0 - ts.h1) + sig / std::sqrt(1.0 - ts.h1 * ts.h1) * eeta;
        eta = omega - ts.h0 / (1.0 - ts.h1);
      } else {
        const auto& kl = ts.k_law;
        const auto& ll = ts.l_law;
        k = kl.mean + kl.persistence * (k - kl.mean) + kl.sd * std::sqrt(1 - kl.persistence * kl.persistence) * ek;
        l = ll.mean + ll.persistence * (l - ll.mean) + ll.sd * std::sqrt(1 - ll.persistence * ll.persistence) * el;
        eta = sig * eeta;
        omega = ts.h0 + ts.h1 * omega + eta;
      }
      draws[t][i] = Draw{z, k, l, omega, ts.sigma_eps * eeps, eta};
    }
  });

  std::vector<FirmRecord> recs(n_firms * static_cast<std::size_t>(n_periods));
  if (aggregator) aggregator->assign(n_periods, 0.0);
  const double log_phi = opt.log_budget;
  for (int t = 0; t < n_periods; ++t) {
    const auto& d = draws[t];
    std::vector<double> m(n_firms), y(n_firms), z(n_firms);
    for (std::size_t i = 0; i < n_firms; ++i) z[i] = d[i].z;
    double log_a = 0.0;
    bool converged = false;
    for (int it = 0; it < opt.max_outer; ++it) {
      tbb::parallel_for(std::size_t{0}, n_firms, [&](std::size_t i) {
        m[i] = solve_m(share, ts, d[i], log_phi, log_a, opt.inner_tol);
        y[i] = ts.theta0 + ts.theta_m * m[i] + ts.theta_k * d[i].k + ts.theta_l * d[i].l + d[i].omega;
      });
      double target = solve_log_a(share, y, z);
      double next = (1.0 - opt.damping) * log_a + opt.damping * target;
      if (std::abs(target - log_a) < opt.outer_tol) {
        log_a = target;
        converged = true;
        break;
      }
      log_a = next;
    }
    if (!converged) throw std::runtime_error("simulate_hsa: aggregator fixed point did not converge");
    tbb::parallel_for(std::size_t{0}, n_firms, [&](std::size_t i) {
      m[i] = solve_m(share, ts, d[i], log_phi, log_a, opt.inner_tol);
      y[i] = ts.theta0 + ts.theta_m * m[i] + ts.theta_k * d[i].k + ts.theta_l * d[i].l + d[i].omega;
    });
    if (aggregator) (*aggregator)[t] = std::exp(log_a);
    for (std::size_t i = 0; i < n_firms; ++i) {
      double xi = std::exp(y[i] - log_a);
      double el = share.elasticity(xi, z[i]);
      if (!(el > 0.0 && el < 1.0))
        throw std::runtime_error(fmt::format("simulate_hsa: share condition violated for firm {}", i));
      double rbar = log_phi + share.log_share(xi, z[i]);
      FirmRecord& rec = recs[i * n_periods + t];
      rec.firm_id = std::to_string(i);
      rec.period = t;
      rec.r = rbar + d[i].eps;
      rec.m = m[i];
      rec.k = d[i].k;
      rec.l = d[i].l;
      rec.z = z[i];
      rec.mx = std::exp(ts.p_m + m[i]);
      rec.truth = Truth{d[i].omega, 1.0 / el, rbar - y[i], y[i], d[i].eps, d[i].eta};
    }
  }
  return FirmPanel(std::move(recs), true);
}

}  // namespace revid
