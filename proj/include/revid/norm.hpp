#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "revid/ident.hpp"
#include "revid/panel.hpp"

namespace revid {

enum class ScaleMethod { EtaVariance, ElasticityConstancy, ReturnsConstancy };

std::string to_string(ScaleMethod m);
ScaleMethod parse_scale_method(const std::string& s);  // eta_variance | elasticity_constancy | returns_constancy

// Box in (m, k, l).
struct Region {
  std::vector<double> lo, hi;
  bool contains(double m, double k, double l) const;
  nlohmann::json to_json() const;
};

// Quantile box [q_lo, q_hi] of each input.
Region quantile_region(const PanelPair& pr, double q_lo, double q_hi);

// Evenly spaced lattice of (m, k, l) points in the box, per points_per_axis.
std::vector<std::vector<double>> region_points(const Region& r, std::size_t points_per_axis = 5);

struct ScaleLink {
  ScaleMethod method = ScaleMethod::EtaVariance;
  double b_ratio = 0.0;   // b_{t+1} / b_t
  double b_t = 0.0;       // absolute scale under local CRS, 0 when unset
  Region region;
  std::size_t n_points = 0;
  bool assumption_dependent = false;
  std::string input = "m";  // elasticity method only
  nlohmann::json to_json() const;
};

// Ratio of scale parameters between two identified periods. The elasticity
// method uses the input named by `input` (m, k or l).
ScaleLink scale_ratio(const PeriodResult& rt, const PeriodResult& rt1, ScaleMethod method, const Region& region,
                      const std::string& input = "m");

// Absolute scale from local constant returns on the region: mean elasticity sum.
ScaleLink scale_from_crs(const PeriodResult& r, const Region& region);

// Divides the scale-carrying objects (Minv, omega, eta, hbar, f, y, markups,
// elasticities) by b; prices are recomputed as rbar - y.
void apply_scale(PeriodResult& r, double b);

// Laspeyres index of exp(logp[t][i]) with base quantities exp(logy0[i]); index 1 at t = 0.
std::vector<double> laspeyres(const std::vector<std::vector<double>>& logp, const std::vector<double>& logy0);

// Two-column CSV (period, index).
std::map<int, double> load_price_index(const std::string& path);
void save_price_index(const std::map<int, double>& idx, const std::string& path);

struct LocationLink {
  int t = 0, t1 = 0;
  double P_star_t = 1.0, P_star_t1 = 1.0;
  double P_hat_t = 1.0, P_hat_t1 = 1.0;
  double a12_diff = 0.0, a1_diff = 0.0, a2_diff = 0.0;
  std::vector<double> xbar;  // (m, k, l)
  // firms present in both periods
  std::vector<std::string> firm_id;
  std::vector<double> y_growth, tfp_growth, rbar_growth, p_growth;
  nlohmann::json to_json() const;  // summary without per-firm vectors
};

// Scale must already be applied to every period in `periods` (same scale
// convention). `base` indexes the Laspeyres base period in `periods`; the index
// uses firms present in all periods.
std::vector<LocationLink> location_links(const std::vector<PeriodResult>& periods,
                                         const std::vector<PanelPair>& pairs,
                                         const std::map<int, double>& P_star, const std::vector<double>& xbar);

// Pooled median of (m, k, l) across the given pairs.
std::vector<double> pooled_median_inputs(const std::vector<PanelPair>& pairs);

// Laspeyres index from the latent true prices and quantities of a simulated
// panel, base = first listed period, firms present in all listed periods.
std::map<int, double> true_price_index(const FirmPanel& panel, const std::vector<int>& periods);

}  // namespace revid
