#include "revid/dgp.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include <fmt/format.h>
#include <tbb/parallel_for.h>

#include "revid/rng.hpp"

namespace revid {

double TrueStructure::sigma_eta_at(int period) const {
  if (period >= 0 && static_cast<std::size_t>(period) < sigma_eta_by_period.size())
    return sigma_eta_by_period[period];
  return sigma_eta;
}

double TrueStructure::alpha_at(double z, int period) const {
  double shift = 0.0;
  if (period >= 0 && static_cast<std::size_t>(period) < alpha_shift.size()) shift = alpha_shift[period];
  return alpha(z) + shift;
}

std::vector<double> TrueStructure::z_support() const {
  return {0.0, 1.0};  // both laws live on [0,1]; rho is affine so endpoints suffice
}

void TrueStructure::validate() const {
  for (double z : z_support()) {
    double r = rho(z);
    if (!(r > 0.0 && r <= 1.0))
      throw std::invalid_argument(fmt::format("rho({}) = {} must lie in (0,1]", z, r));
    if (!(r * theta_m < 1.0))
      throw std::invalid_argument(fmt::format("rho({})*theta_m = {} must be < 1", z, r * theta_m));
  }
  if (!(theta_m > 0.0)) throw std::invalid_argument("theta_m must be positive");
  if (!(std::abs(h1) < 1.0)) throw std::invalid_argument("|h1| must be < 1");
  if (!(sigma_eta >= 0.0) || !(sigma_eps >= 0.0)) throw std::invalid_argument("negative std");
  for (double s : sigma_eta_by_period)
    if (!(s >= 0.0)) throw std::invalid_argument("negative sigma_eta_by_period entry");
  if (!(z_prob >= 0.0 && z_prob <= 1.0)) throw std::invalid_argument("z_prob outside [0,1]");
  for (const InputLaw* law : {&k_law, &l_law})
    if (!(law->sd >= 0.0) || !(std::abs(law->persistence) < 1.0))
      throw std::invalid_argument("input law needs sd >= 0 and |persistence| < 1");
  if (labor.endogenous && !(std::abs(labor.ar) < 1.0))
    throw std::invalid_argument("labor rule needs |ar| < 1");
  if (!std::isfinite(k_eta) || !std::isfinite(eta_k_scale))
    throw std::invalid_argument("k_eta and eta_k_scale must be finite");
}

double OracleControl::beta_t(double z) const {
  double r = ts->rho(z);
  return (ts->p_m - ts->alpha_at(z, period) - r * ts->theta0 - std::log(r * ts->theta_m)) / r;
}
double OracleControl::beta_m(double z) const {
  double r = ts->rho(z);
  return (1.0 - r * ts->theta_m) / r;
}
double OracleControl::beta_k() const { return -ts->theta_k; }
double OracleControl::beta_l() const { return -ts->theta_l; }
double OracleControl::phi(double z) const { return ts->alpha_at(z, period) + ts->rho(z) * beta_t(z); }
double OracleControl::s(double z) const { return ts->rho(z) * ts->theta_m; }
double OracleControl::omega(double m, double k, double l, double z) const {
  return beta_t(z) + beta_m(z) * m + beta_k() * k + beta_l() * l;
}

OracleControl oracle_control(const TrueStructure& ts, int period) {
  ts.validate();
  return OracleControl{&ts, period};
}

double OracleIdentified::beta_t(double z) const {
  return scale * (ctl.beta_t(z) - ctl.omega(np.m0, np.k, np.l, np.z));
}
double OracleIdentified::omega(double m, double k, double l, double z) const {
  return scale * (ctl.omega(m, k, l, z) - ctl.omega(np.m0, np.k, np.l, np.z));
}
double OracleIdentified::theta_m() const {
  double s = ctl.s(np.z);
  return s / (1.0 - s) * beta_m(np.z);
}
double OracleIdentified::rho(double z) const { return (1.0 - ctl.s(z)) / beta_m(z); }
double OracleIdentified::f(double m, double k, double l) const {
  const auto& ts = *ctl.ts;
  auto f0 = [&](double a, double b, double c) {
    return ts.theta0 + ts.theta_m * a + ts.theta_k * b + ts.theta_l * c;
  };
  return scale * (f0(m, k, l) - f0(np.m0, np.k, np.l));
}

OracleIdentified oracle_identified(const TrueStructure& ts, const NormPoints& np, int period) {
  OracleIdentified o;
  o.ctl = oracle_control(ts, period);
  o.np = np;
  double span = o.ctl.beta_m(np.z) * (np.m1 - np.m0);
  if (!(span > 0.0)) throw std::invalid_argument("normalization points must satisfy m*_0 < m*_1");
  o.scale = 1.0 / span;
  return o;
}

namespace {

struct FirmState {
  double k = 0, l = 0, omega = 0;
};

}  // namespace

FirmPanel simulate_ces(const TrueStructure& ts, std::size_t n_firms, int n_periods, std::uint64_t seed) {
  ts.validate();
  if (n_periods < 2) throw std::invalid_argument("simulate_ces needs n_periods >= 2");
  std::vector<FirmRecord> recs(n_firms * static_cast<std::size_t>(n_periods));
  const double h1 = ts.h1;

  tbb::parallel_for(std::size_t{0}, n_firms, [&](std::size_t i) {
    FirmState st;
    for (int t = 0; t < n_periods; ++t) {
      Stream rs(seed, i, t);
      double zdraw = ts.z_law == ZLaw::Bernoulli ? (rs.bernoulli(ts.z_prob) ? 1.0 : 0.0) : rs.uniform();
      double ek = rs.normal(), el = rs.normal(), eeta = rs.normal(), eeps = rs.normal(), enu = rs.normal();
      const double sig = ts.sigma_eta_at(t);
      double eta = 0.0;
      if (t == 0) {
        st.k = ts.k_law.mean + ts.k_law.sd * ek;
        if (ts.labor.endogenous) {
          double var = (ts.labor.nu_sd * ts.labor.nu_sd + ts.labor.kappa * ts.labor.kappa * sig * sig) /
                       (1.0 - ts.labor.ar * ts.labor.ar);
          st.l = ts.l_law.mean + std::sqrt(var) * el;
        } else {
          st.l = ts.l_law.mean + ts.l_law.sd * el;
        }
        st.omega = ts.h0 / (1.0 - h1) + sig / std::sqrt(1.0 - h1 * h1) * eeta;
        eta = st.omega - ts.h0 / (1.0 - h1);
      } else {
        const auto& kl = ts.k_law;
        st.k = kl.mean + kl.persistence * (st.k - kl.mean) +
               kl.sd * std::sqrt(1.0 - kl.persistence * kl.persistence) * ek;
        eta = sig * std::exp(ts.eta_k_scale * (st.k - kl.mean)) * eeta;
        if (ts.labor.endogenous) {
          st.l = ts.l_law.mean + ts.labor.ar * (st.l - ts.l_law.mean) + ts.labor.nu_sd * enu +
                 ts.labor.kappa * eta;
        } else {
          const auto& ll = ts.l_law;
          st.l = ll.mean + ll.persistence * (st.l - ll.mean) +
                 ll.sd * std::sqrt(1.0 - ll.persistence * ll.persistence) * el;
        }
        st.omega = ts.h0 + h1 * st.omega + eta;
        st.k += ts.k_eta * eta;
      }
      const double z = zdraw;
      const double rho = ts.rho(z), alpha = ts.alpha_at(z, t);
      const double rtm = rho * ts.theta_m;
      double m = (std::log(rtm) + alpha + rho * ts.theta0 + rho * ts.theta_k * st.k +
                  rho * ts.theta_l * st.l + rho * st.omega - ts.p_m) /
                 (1.0 - rtm);
      double y = ts.theta0 + ts.theta_m * m + ts.theta_k * st.k + ts.theta_l * st.l + st.omega;
      double p = alpha + (rho - 1.0) * y;
      double rbar = p + y;
      double eps = ts.sigma_eps * eeps;
      FirmRecord& rec = recs[i * n_periods + t];
      rec.firm_id = std::to_string(i);
      rec.period = t;
      rec.r = rbar + eps;
      rec.m = m;
      rec.k = st.k;
      rec.l = st.l;
      rec.z = z;
      rec.mx = std::exp(ts.p_m + m);
      rec.truth = Truth{st.omega, 1.0 / rho, p, y, eps, eta};
      if (!std::isfinite(rec.r) || !std::isfinite(rec.mx))
        throw std::runtime_error(fmt::format("simulate_ces: non-finite value for firm {} t={}", i, t));
    }
  });
  return FirmPanel(std::move(recs), true);
}

TrueStructure equivalence_transform(const TrueStructure& ts, double a1, double a2, double b) {
  if (!(b > 0.0)) throw std::invalid_argument("equivalence_transform needs b > 0");
  TrueStructure o = ts;
  o.theta0 = a1 + b * ts.theta0;
  o.theta_m = b * ts.theta_m;
  o.theta_k = b * ts.theta_k;
  o.theta_l = b * ts.theta_l;
  o.h0 = a2 * (1.0 - ts.h1) + b * ts.h0;
  o.sigma_eta = b * ts.sigma_eta;
  for (auto& s : o.sigma_eta_by_period) s *= b;
  o.rho = Affine{ts.rho.a / b, ts.rho.b / b};
  // alpha'(z) = alpha(z) - rho(z)(a1 + a2)/b; affine in z because rho is
  o.alpha = Affine{ts.alpha.a - ts.rho.a * (a1 + a2) / b, ts.alpha.b - ts.rho.b * (a1 + a2) / b};
  o.labor.kappa = ts.labor.kappa / b;
  o.k_eta = ts.k_eta / b;
  o.validate();
  return o;
}

}  // namespace revid
