#pragma once

#include <cstdint>
#include <vector>

#include "revid/panel.hpp"

namespace revid {

// a + b z
struct Affine {
  double a = 0.0;
  double b = 0.0;
  double operator()(double z) const { return a + b * z; }
};

struct InputLaw {
  double mean = 0.0;
  double sd = 0.5;
  double persistence = 0.7;  // AR(1) coefficient of the log input
};

enum class ZLaw { Bernoulli, Uniform };

// Labor rule l_t = mean + ar (l_{t-1} - mean) + nu + kappa eta_t, used when endogenous.
struct LaborRule {
  bool endogenous = false;
  double ar = 0.8;
  double nu_sd = 0.3;
  double kappa = 0.0;
};

struct TrueStructure {
  double theta0 = 0.0;
  double theta_m = 0.35;
  double theta_k = 0.25;
  double theta_l = 0.40;
  double h0 = 0.0;
  double h1 = 0.8;
  double sigma_eta = 0.2;
  std::vector<double> sigma_eta_by_period;  // overrides sigma_eta for listed periods
  double sigma_eps = 0.1;
  Affine alpha{1.0, 0.0};
  std::vector<double> alpha_shift;  // additive per-period shift of alpha
  Affine rho{0.8, -0.05};
  double p_m = 0.0;
  ZLaw z_law = ZLaw::Bernoulli;
  double z_prob = 0.5;
  InputLaw k_law{0.0, 0.5, 0.7};
  InputLaw l_law{0.0, 0.5, 0.7};
  LaborRule labor{};
  double k_eta = 0.0;  // k_t += k_eta * eta_t; nonzero breaks independence of eta and k_t
  double eta_k_scale = 0.0;  // sd of eta_t scaled by exp(eta_k_scale * (k_t - k mean)); nonzero breaks independence

  double sigma_eta_at(int period) const;
  double alpha_at(double z, int period) const;
  // support values used to check 0 < rho <= 1
  std::vector<double> z_support() const;
  void validate() const;  // throws std::invalid_argument
};

struct OracleControl {
  const TrueStructure* ts = nullptr;
  int period = 0;
  double beta_t(double z) const;
  double beta_m(double z) const;
  double beta_k() const;
  double beta_l() const;
  double phi(double z) const;  // r = phi(z) + m + eps
  double s(double z) const;    // material revenue share
  double omega(double m, double k, double l, double z) const;
};

OracleControl oracle_control(const TrueStructure& ts, int period = 0);

// Normalization points (m*_0 < m*_1, k*, l*, z*).
struct NormPoints {
  double m0 = 0.0, m1 = 1.0, k = 0.0, l = 0.0, z = 0.0;
};

// Values the pipeline should recover under the given normalization.
struct OracleIdentified {
  OracleControl ctl;
  NormPoints np;
  double scale = 1.0;  // identified control function = scale * truth + location

  double beta_m(double z) const { return scale * ctl.beta_m(z); }
  double beta_k() const { return scale * ctl.beta_k(); }
  double beta_l() const { return scale * ctl.beta_l(); }
  double beta_t(double z) const;                 // location-normalized intercept
  double omega(double m, double k, double l, double z) const;
  double theta_m() const;                        // s/(1-s) * beta_m, any z
  double theta_k() const { return -beta_k(); }
  double theta_l() const { return -beta_l(); }
  double rho(double z) const;                    // (1-s)/beta_m
  double markup(double z) const { return 1.0 / rho(z); }
  double b_crs() const { return theta_m() + theta_k() + theta_l(); }
  double f(double m, double k, double l) const;  // normalized production function
};

OracleIdentified oracle_identified(const TrueStructure& ts, const NormPoints& np, int period = 0);

FirmPanel simulate_ces(const TrueStructure& ts, std::size_t n_firms, int n_periods, std::uint64_t seed);

// Structure observationally equivalent to ts under (a1, a2, b), b > 0.
TrueStructure equivalence_transform(const TrueStructure& ts, double a1, double a2, double b);

// Share function of the HSA variant: ln S(xi, z) = log_kappa + rho(z) u - delta u^2 / 2, u = ln xi.
struct HsaShare {
  Affine rho{0.8, -0.05};
  double delta = 0.05;
  double log_kappa = 0.0;
  double log_share(double xi, double z) const;
  double elasticity(double xi, double z) const;  // d ln S / d ln xi
  double operator()(double xi, double z) const;
};

struct HsaSimOptions {
  double log_budget = 10.0;       // ln Phi
  bool auto_kappa = true;         // set log_kappa = -ln(n_firms)
  double inner_tol = 1e-12;
  double outer_tol = 1e-10;
  double damping = 0.5;
  int max_outer = 500;
};

// Firms take the aggregator A_t as given; A_t is solved per period so shares sum to one.
// When aggregator is non-null it receives A_t for each period.
FirmPanel simulate_hsa(const HsaShare& share, const TrueStructure& prod, std::size_t n_firms,
                       int n_periods, std::uint64_t seed, const HsaSimOptions& opt = {},
                       std::vector<double>* aggregator = nullptr);

}  // namespace revid
