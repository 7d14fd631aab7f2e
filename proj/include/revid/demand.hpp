#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "revid/ident.hpp"
#include "revid/panel.hpp"

namespace revid {

// Log revenue as a piecewise-linear function of log quantity, extended
// linearly beyond the end nodes with the boundary slopes.
struct RevenueCurve {
  std::vector<double> y, r;  // y strictly increasing

  double operator()(double yy, bool* extrapolated = nullptr) const;
  double slope(double yy) const;
  // integral of exp(r(u) - shift) du from a to b
  double integral_exp(double a, double b, double shift) const;
  void check() const;
};

struct ShareViolation {
  double z = 0.0, y = 0.0, elasticity = 0.0;  // d ln S / d ln Y at the offending node
};

class HsaSystem {
 public:
  HsaSystem() = default;
  // curves[j] belongs to z_nodes[j]; continuous z blends adjacent curves linearly.
  // The data point fixes the budget: Phi = sum_i exp(r(ln Y0_i, z0_i)).
  HsaSystem(std::vector<double> z_nodes, std::vector<RevenueCurve> curves, bool z_discrete,
            std::vector<double> log_Y0, std::vector<double> z0);

  bool z_discrete() const { return z_discrete_; }
  const std::vector<double>& z_nodes() const { return z_nodes_; }
  const std::vector<RevenueCurve>& curves() const { return curves_; }
  double log_Phi() const { return log_Phi_; }
  const std::vector<double>& log_Y0() const { return log_Y0_; }
  const std::vector<double>& z0() const { return z0_; }
  const std::vector<ShareViolation>& violations() const { return violations_; }
  double y_min() const { return y_min_; }
  double y_max() const { return y_max_; }
  // firm ids of the data point, in log_Y0 order (optional)
  const std::vector<std::string>& firm_ids() const { return firm_ids_; }
  void set_firm_ids(std::vector<std::string> ids);

  // Curve for shifter value z (blended for continuous z; exact level otherwise).
  RevenueCurve curve_at(double z) const;
  double log_share(double lnY, double z, bool* extrapolated = nullptr) const;
  double share(double Y, double z) const;

  nlohmann::json to_json() const;
  static HsaSystem from_json(const nlohmann::json& j);

 private:
  std::size_t level_index(double z) const;
  void check_share_conditions();

  std::vector<double> z_nodes_;
  std::vector<RevenueCurve> curves_;
  bool z_discrete_ = true;
  std::vector<double> log_Y0_, z0_;
  std::vector<std::string> firm_ids_;
  double log_Phi_ = 0.0;
  double y_min_ = 0.0, y_max_ = 0.0;
  std::vector<ShareViolation> violations_;
};

struct HsaBuildOptions {
  std::size_t nodes = 41;            // revenue nodes per curve
  double q_lo = 0.01, q_hi = 0.99;   // revenue quantile range of the nodes
  std::size_t z_nodes = 9;           // continuous z only
  double bw_scale = 1.0;
};

// From a scale-normalized period: fits the inverse revenue function
// y = phi^{-1}(rbar, z), inverts it per z and fixes the data point at the
// identified quantities of the period's firms.
HsaSystem build_hsa(const PeriodResult& r, const PanelPair& pr, const HsaBuildOptions& opt = {});

struct AggregatorResult {
  double A = 1.0;
  double log_A = 0.0;
  std::size_t iterations = 0;
  std::size_t extrapolated = 0;  // firms whose Y/A left the curve support
};

// Root of sum_i S(Y_i / A, z_i) = 1; Y in levels.
AggregatorResult solve_aggregator(const HsaSystem& sys, const std::vector<double>& Y, const std::vector<double>& z,
                                  int max_doublings = 60);

// P_i = Phi / Y_i * S(Y_i / A, z_i) for firm i.
double inverse_demand(const HsaSystem& sys, const std::vector<double>& Y, const std::vector<double>& z,
                      std::size_t i);
std::vector<double> inverse_demand_all(const HsaSystem& sys, const std::vector<double>& Y,
                                       const std::vector<double>& z, const AggregatorResult& agg);

// ln U = ln A + sum_i int_{Y0_i}^{Y_i / A} S(xi, z_i) / xi dxi. The lower limits
// are the data-point quantities, so ln U(Y0, z0) = 0.
double log_utility(const HsaSystem& sys, const std::vector<double>& Y, const std::vector<double>& z);
double log_utility(const HsaSystem& sys, const std::vector<double>& Y, const std::vector<double>& z,
                   const AggregatorResult& agg);

}  // namespace revid
