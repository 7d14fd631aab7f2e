#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "revid/cond_cdf.hpp"
#include "revid/dgp.hpp"
#include "revid/grid.hpp"
#include "revid/kernel.hpp"
#include "revid/panel.hpp"

namespace revid {

// Conditioning vector layout used throughout: v = (k, l, z, m1, k1, l1, z1).
enum VIndex : std::size_t { kVk = 0, kVl, kVz, kVm1, kVk1, kVl1, kVz1, kVDims };
const char* v_name(std::size_t j);

struct IdentOptions {
  std::size_t grid_points = 21;
  double grid_lo = 0.05, grid_hi = 0.95;
  BandwidthRule rule = BandwidthRule::Silverman;
  double mean_bw_scale = 1.0;  // multiplier for conditional-mean bandwidths
  CondCdfOptions cdf{};
  double norm_q0 = 0.30, norm_q1 = 0.70;  // quantiles of m giving m*_0 and m*_1
  std::optional<NormPoints> norm_points;  // overrides the quantile rule when set
  std::vector<std::string> anchor_candidates{"m1", "k1", "l1", "z1"};
  std::vector<double> anchor_levels{0.35, 0.5, 0.65};  // lag quantiles scanned for anchor points
  double anchor_floor = 1e-6;    // |dG/dq_{t-1}| >= floor * dG/dm at usable nodes
  double density_floor = 0.01;   // dG/dm below this share of its grid maximum marks a node unusable
  double max_unusable_share = 0.25;
  std::size_t anchor_average = 1;  // number of top-ranked valid anchors averaged in step 2
  double integ_tol = 1e-8;
  double region_lo = 0.40, region_hi = 0.60;  // quantile box for scale normalization
  std::size_t min_cell_rows = 50;
  bool labor_endogenous = false;
  double weak_iv_threshold = 0.1;
  double overid_threshold = 0.10;   // on the slope-ratio gap
  double overid_bw_scale = 1.0;     // bandwidth multiplier of the diagnostic conditional CDF
  double overid_quantile = 0.2;     // slope anchors sit at this and the opposite quantile of m_{t-1}
};

// Evaluation grids for one period pair.
struct IdentGrid {
  std::vector<double> m, k, l, z;      // current-period axes
  std::vector<double> m1, k1, l1, z1;  // lagged axes
  bool z_discrete = false;
  NormPoints np;
  std::vector<double> lag_star;  // origin (m1*, k1*, l1*, z1*) for integrating hbar
  std::vector<std::vector<double>> current_axes() const { return {m, k, l, z}; }
  std::vector<std::vector<double>> lag_axes() const { return {m1, k1, l1, z1}; }
  bool inside_current(double mm, double kk, double ll, double zz) const;
  bool inside_lag(double mm, double kk, double ll, double zz) const;
  nlohmann::json to_json() const;
};

IdentGrid make_grid(const PanelPair& pr, const IdentOptions& opt);

CondCdf make_cdf(const PanelPair& pr, const CondCdfOptions& opt);

struct Step1Result {
  GridFn phi;  // over (m, k, l, z), with slope tensors
  std::vector<double> rbar, eps;
  std::vector<unsigned char> inside;
  std::vector<double> bw;
};

Step1Result step1(const PanelPair& pr, const IdentGrid& g, const IdentOptions& opt);

struct Anchor {
  std::size_t axis = kVm1;        // lagged conditioning column differentiated
  std::vector<double> point;      // (m1, k1, l1, z1)
  double score = 0.0;             // min |dG/dq_{t-1}| / dG/dm over usable nodes
  int sign = 0;                   // common sign of dG/dq_{t-1}
  std::size_t usable = 0, scanned = 0;
  std::string name() const { return v_name(axis); }
  nlohmann::json to_json() const;
};

// Valid anchors ranked by score (ties: candidate order m1, k1, l1, z1, then point order).
// Throws when no candidate clears the floor.
std::vector<Anchor> rank_anchors(const CondCdf& cdf, const IdentGrid& g, const IdentOptions& opt);
Anchor select_anchor(const CondCdf& cdf, const IdentGrid& g, const IdentOptions& opt);

struct ControlResult {
  std::vector<Anchor> anchors;     // anchors averaged (first is the selected one)
  std::vector<double> S;           // scale constant per anchor
  double dh_anchor = 0.0;          // dhbar/dq_{t-1} at the first anchor (= -S)
  GridFn Minv;                     // over (m, k, l, z), derivative tensors attached
  GridFn dhbar;                    // hbar up to its z1 constants, derivative tensors attached (discrete z)
  std::vector<double> c0, c2;      // per z level (discrete z)
  std::vector<double> omega, eta;
  GridFn hbar;                     // over (m1, k1, l1, z1)
  std::vector<double> eta_sorted;  // inside firms
  std::vector<unsigned char> inside;
  std::size_t unusable_nodes = 0;
  // labor branch
  bool labor = false;
  double theta_l_hat = 0.0;
};

ControlResult step2(const PanelPair& pr, const CondCdf& cdf, const std::vector<Anchor>& anchors,
                    const IdentGrid& g, const IdentOptions& opt);

// Same as step2 for finitely many z levels; recovers the level constants from
// cell means of eta.
ControlResult step2_discrete_z(const PanelPair& pr, const CondCdf& cdf, const std::vector<Anchor>& anchors,
                               const IdentGrid& g, const IdentOptions& opt);

struct Step3Result {
  std::vector<double> markup, y, p, share;
  std::vector<double> el_m, el_k, el_l;  // per firm elasticities
  std::vector<unsigned char> flag_denominator;  // markup denominator <= 0
  GridFn markup_fn;                // over (m, k, l, z)
  GridFn el_m_fn, el_k_fn, el_l_fn;  // over (m, k, l, z)
  GridFn f;                        // over (m, k, l), elasticity tensors attached
  double p_m = 0.0;                // log material price
  // markup implied by the revenue elasticity of material at fixed productivity
  std::vector<double> dlw_markup;
  double dlw_markup_median = 0.0;
  std::size_t flagged_nodes = 0;   // grid nodes with a nonpositive markup denominator
};

Step3Result step3(const PanelPair& pr, const Step1Result& s1, const ControlResult& s2, const IdentGrid& g,
                  const IdentOptions& opt);

struct OveridReport {
  std::vector<Anchor> anchors;
  std::vector<std::vector<double>> sup_discrepancy;  // interior sup-norm of Minv differences
  std::vector<std::vector<double>> omega_corr;
  double max_discrepancy = 0.0;
  double min_corr = 1.0;
  // mean of dMinv/dq / dMinv/dm over hull-inside firms, q = k, l, z, per slope anchor
  std::vector<Anchor> slope_anchors;
  std::vector<std::vector<double>> slope_ratios;
  double slope_gap = 0.0;  // largest difference across slope anchors
  bool flagged = false;    // slope_gap above the threshold
  bool ran = false;
  std::string note;
  nlohmann::json to_json() const;
};

// Compares control functions from up to max_anchors valid anchors (distinct lagged variables and
// points preferred), then tests slope ratios from two anchors at distant m_{t-1} on a narrower-bandwidth
// conditional CDF; the slope test sets the flag.
OveridReport overid_check(const PanelPair& pr, const CondCdf& cdf, const IdentGrid& g, const IdentOptions& opt,
                          std::size_t max_anchors = 3);
// Reruns step 2 under each given anchor and compares the results; the given anchors also serve as
// slope anchors.
OveridReport overid_compare(const PanelPair& pr, const CondCdf& cdf, const IdentGrid& g, const IdentOptions& opt,
                            const std::vector<Anchor>& anchors);

struct WeakInstrumentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LaborIvResult {
  std::vector<double> H;        // per firm known variable
  std::vector<double> R;        // lagged-labor adjustment from the persistence of productivity
  double d = 0.0;               // intercept of the first cell
  double theta_l_hat = 0.0;     // IV labor coefficient (identified scale)
  double theta_l_ols = 0.0;
  double first_stage_corr = 0.0;   // corr(l_t, l_{t-1})
  double first_stage_f = 0.0;      // first-stage F of the IV regressor on l_{t-1}
  double resid_mean = 0.0, resid_lag_corr = 0.0;
  std::vector<double> cell_effects;  // per (z, z1) cell intercepts when z is discrete
  std::vector<unsigned char> used;
};

// Linear IV for the labor coefficient with l_{t-1} as instrument. H and R are
// supplied per firm; regressor (l - l*) - R, cell intercepts when cells > 1.
LaborIvResult labor_iv(const std::vector<double>& H, const std::vector<double>& R, const std::vector<double>& l,
                       const std::vector<double>& l1, double l_star, const std::vector<int>& cell,
                       std::size_t n_cells, const std::vector<unsigned char>& use, double weak_threshold);

// Labor-endogenous variant of step 2: anchors exclude l1; Minv in labor is fixed by labor_iv.
ControlResult step2_labor(const PanelPair& pr, const CondCdf& cdf, const std::vector<Anchor>& anchors,
                          const IdentGrid& g, const IdentOptions& opt, LaborIvResult* iv_out = nullptr);

// Convenience: the full per-period identification.
struct PeriodResult {
  int t = 0;
  IdentGrid grid;
  Step1Result s1;
  ControlResult s2;
  Step3Result s3;
  std::optional<LaborIvResult> iv;
  std::vector<double> cdf_bw;
};

PeriodResult identify_period(const PanelPair& pr, const IdentOptions& opt);

// Indices of firms inside the current-period hull with a valid markup.
std::vector<std::size_t> interior_firms(const PeriodResult& r);

}  // namespace revid
