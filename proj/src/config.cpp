#include "revid/config.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <toml.hpp>

namespace revid {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Mode m) {
  switch (m) {
    case Mode::Simulate: return "simulate";
    case Mode::Identify: return "identify";
    case Mode::Normalize: return "normalize";
    case Mode::Demand: return "demand";
    case Mode::MonteCarlo: return "montecarlo";
    case Mode::Report: return "report";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::Simulate, Mode::Identify, Mode::Normalize, Mode::Demand, Mode::MonteCarlo, Mode::Report})
    if (to_string(m) == s) return m;
  throw ConfigError(fmt::format("mode: unknown value '{}'", s));
}

namespace {

json from_toml(const toml::node& n) {
  if (auto t = n.as_table()) {
    json j = json::object();
    for (auto&& [k, v] : *t) j[std::string(k.str())] = from_toml(v);
    return j;
  }
  if (auto a = n.as_array()) {
    json j = json::array();
    for (auto&& v : *a) j.push_back(from_toml(v));
    return j;
  }
  if (auto v = n.as_string()) return v->get();
  if (auto v = n.as_integer()) return v->get();
  if (auto v = n.as_floating_point()) return v->get();
  if (auto v = n.as_boolean()) return v->get();
  throw ConfigError(fmt::format("unsupported TOML value at line {}", n.source().begin.line));
}

// Reads keys of one table; every key must be consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(fmt::format("{}: expected a table", path_.empty() ? "<root>" : path_));
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  Section sub(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  template <class T>
  void get(const std::string& key, T& dst) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    dst = convert<T>(j_.at(key), field(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(fmt::format("{}: unknown key", field(it.key())));
  }

 private:
  template <class T>
  static T convert(const json& v, const std::string& f) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(f + ": expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(f + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(f + ": expected a number");
      double x = v.get<double>();
      if (!std::isfinite(x)) throw ConfigError(f + ": must be finite");
      return x;
    } else if constexpr (std::is_same_v<T, int>) {
      if (!v.is_number_integer()) throw ConfigError(f + ": expected an integer");
      return v.get<int>();
    } else if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(f + ": expected a nonnegative integer");
      return static_cast<T>(v.get<long long>());
    } else {
      if (!v.is_array()) throw ConfigError(f + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], fmt::format("{}[{}]", f, i)));
      return out;
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_affine(Section s, Affine& a) {
  s.get("a", a.a);
  s.get("b", a.b);
  s.finish();
}

void read_law(Section s, InputLaw& l) {
  s.get("mean", l.mean);
  s.get("sd", l.sd);
  s.get("persistence", l.persistence);
  s.finish();
}

void read_dgp(Section s, DgpConfig& d) {
  std::string kind = "ces";
  s.get("kind", kind);
  if (kind == "ces") d.kind = DgpKind::Ces;
  else if (kind == "hsa") d.kind = DgpKind::Hsa;
  else throw ConfigError(s.field("kind") + ": expected 'ces' or 'hsa'");
  s.get("n_firms", d.n_firms);
  s.get("n_periods", d.n_periods);
  auto& ts = d.ts;
  s.get("theta0", ts.theta0);
  s.get("theta_m", ts.theta_m);
  s.get("theta_k", ts.theta_k);
  s.get("theta_l", ts.theta_l);
  s.get("h0", ts.h0);
  s.get("h1", ts.h1);
  s.get("sigma_eta", ts.sigma_eta);
  s.get("sigma_eta_by_period", ts.sigma_eta_by_period);
  s.get("sigma_eps", ts.sigma_eps);
  if (s.has("alpha")) read_affine(s.sub("alpha"), ts.alpha);
  s.get("alpha_shift", ts.alpha_shift);
  if (s.has("rho")) read_affine(s.sub("rho"), ts.rho);
  s.get("p_m", ts.p_m);
  std::string zlaw = "bernoulli";
  s.get("z_law", zlaw);
  if (zlaw == "bernoulli") ts.z_law = ZLaw::Bernoulli;
  else if (zlaw == "uniform") ts.z_law = ZLaw::Uniform;
  else throw ConfigError(s.field("z_law") + ": expected 'bernoulli' or 'uniform'");
  s.get("z_prob", ts.z_prob);
  if (s.has("k_law")) read_law(s.sub("k_law"), ts.k_law);
  if (s.has("l_law")) read_law(s.sub("l_law"), ts.l_law);
  s.get("k_eta", ts.k_eta);
  s.get("eta_k_scale", ts.eta_k_scale);
  if (s.has("labor")) {
    auto lb = s.sub("labor");
    lb.get("endogenous", ts.labor.endogenous);
    lb.get("ar", ts.labor.ar);
    lb.get("nu_sd", ts.labor.nu_sd);
    lb.get("kappa", ts.labor.kappa);
    lb.finish();
  }
  if (s.has("hsa")) {
    auto h = s.sub("hsa");
    h.get("delta", d.share.delta);
    h.get("log_kappa", d.share.log_kappa);
    h.get("log_budget", d.hsa.log_budget);
    h.get("auto_kappa", d.hsa.auto_kappa);
    h.get("inner_tol", d.hsa.inner_tol);
    h.get("outer_tol", d.hsa.outer_tol);
    h.get("damping", d.hsa.damping);
    h.get("max_outer", d.hsa.max_outer);
    h.finish();
  }
  d.share.rho = ts.rho;
  s.finish();
}

void read_estimation(Section s, EstimationConfig& e) {
  auto& o = e.ident;
  s.get("periods", e.periods);
  s.get("min_pair_rows", e.min_pair_rows);
  s.get("discrete_max_levels", e.discrete_max_levels);
  s.get("grid_points", o.grid_points);
  s.get("grid_lo", o.grid_lo);
  s.get("grid_hi", o.grid_hi);
  if (s.has("bandwidth")) {
    auto b = s.sub("bandwidth");
    std::string rule = "silverman";
    b.get("rule", rule);
    if (rule == "silverman") o.rule = BandwidthRule::Silverman;
    else if (rule == "lscv") o.rule = BandwidthRule::Lscv;
    else throw ConfigError(b.field("rule") + ": expected 'silverman' or 'lscv'");
    o.cdf.rule = o.rule;
    b.get("mean_scale", o.mean_bw_scale);
    b.get("cdf_scale", o.cdf.bw_scale);
    b.get("cdf_m_scale", o.cdf.m_bw_scale);
    b.get("min_effective_n", o.cdf.min_effective_n);
    b.finish();
  }
  std::vector<double> nq;
  s.get("norm_quantiles", nq);
  if (!nq.empty()) {
    if (nq.size() != 2) throw ConfigError(s.field("norm_quantiles") + ": expected two quantiles");
    o.norm_q0 = nq[0];
    o.norm_q1 = nq[1];
  }
  if (s.has("norm_points")) {
    auto p = s.sub("norm_points");
    NormPoints np;
    p.get("m0", np.m0);
    p.get("m1", np.m1);
    p.get("k", np.k);
    p.get("l", np.l);
    p.get("z", np.z);
    p.finish();
    o.norm_points = np;
  }
  s.get("anchor_candidates", o.anchor_candidates);
  s.get("anchor_levels", o.anchor_levels);
  s.get("anchor_floor", o.anchor_floor);
  s.get("density_floor", o.density_floor);
  s.get("max_unusable_share", o.max_unusable_share);
  s.get("anchor_average", o.anchor_average);
  s.get("integ_tol", o.integ_tol);
  std::vector<double> reg;
  s.get("region", reg);
  if (!reg.empty()) {
    if (reg.size() != 2) throw ConfigError(s.field("region") + ": expected two quantiles");
    o.region_lo = reg[0];
    o.region_hi = reg[1];
  }
  s.get("min_cell_rows", o.min_cell_rows);
  s.get("labor_endogenous", o.labor_endogenous);
  s.get("weak_iv_threshold", o.weak_iv_threshold);
  s.get("overid", e.overid);
  s.get("overid_threshold", o.overid_threshold);
  s.get("overid_bw_scale", o.overid_bw_scale);
  s.get("overid_quantile", o.overid_quantile);
  s.get("scale", e.scale);
  s.get("scale_input", e.scale_input);
  if (s.has("demand")) {
    auto d = s.sub("demand");
    int period = 0;
    if (d.has("period")) {
      d.get("period", period);
      e.demand_period = period;
    }
    d.get("nodes", e.demand.nodes);
    d.get("q_lo", e.demand.q_lo);
    d.get("q_hi", e.demand.q_hi);
    d.get("z_nodes", e.demand.z_nodes);
    d.get("bw_scale", e.demand.bw_scale);
    d.finish();
  }
  s.finish();
}

void read_io(Section s, IoConfig& io) {
  s.get("panel", io.panel);
  s.get("out", io.out);
  s.get("price_index", io.price_index);
  s.get("queries", io.queries);
  s.get("hsa", io.hsa);
  s.get("compare", io.compare);
  s.get("seed", io.seed);
  s.get("replications", io.replications);
  s.get("threads", io.threads);
  if (s.has("schema")) {
    auto c = s.sub("schema");
    auto& sc = io.schema;
    c.get("id", sc.id);
    c.get("t", sc.t);
    c.get("r", sc.r);
    c.get("m", sc.m);
    c.get("k", sc.k);
    c.get("l", sc.l);
    c.get("z", sc.z);
    c.get("mx", sc.mx);
    c.get("truth_prefix", sc.truth_prefix);
    c.finish();
  }
  s.finish();
}

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}

bool in_unit(double x) { return x > 0.0 && x < 1.0; }

void require_file(const std::string& path, const std::string& field) {
  require(!path.empty(), field, "required for this mode");
  require(fs::exists(path), field, fmt::format("'{}' does not exist", path));
}

}  // namespace

json read_config_file(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError(fmt::format("config: file '{}' does not exist", path));
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  if (fs::path(path).extension() == ".json") {
    try {
      return json::parse(ss.str());
    } catch (const json::parse_error& e) {
      throw ConfigError(fmt::format("config: {}", e.what()));
    }
  }
  try {
    auto tbl = toml::parse(ss.str(), path);
    return from_toml(tbl);
  } catch (const toml::parse_error& e) {
    throw ConfigError(fmt::format("config: {} (line {}, column {})", e.description(), e.source().begin.line,
                                  e.source().begin.column));
  }
}

RunConfig parse_config(const json& j) {
  RunConfig c;
  c.source = j;
  Section root(j, "");
  std::string mode;
  root.get("mode", mode);
  if (!mode.empty()) c.mode = parse_mode(mode);
  read_dgp(root.sub("dgp"), c.dgp);
  read_estimation(root.sub("estimation"), c.est);
  read_io(root.sub("io"), c.io);
  root.finish();
  return c;
}

RunConfig load_config(const std::string& path) { return parse_config(read_config_file(path)); }

void RunConfig::validate() const {
  const auto& d = dgp;
  require(d.n_firms >= 1, "dgp.n_firms", "must be at least 1");
  require(d.n_periods >= 2, "dgp.n_periods", "must be at least 2");
  require(d.ts.sigma_eta >= 0.0, "dgp.sigma_eta", "must be nonnegative");
  require(d.ts.sigma_eps >= 0.0, "dgp.sigma_eps", "must be nonnegative");
  for (double s : d.ts.sigma_eta_by_period) require(s >= 0.0, "dgp.sigma_eta_by_period", "entries must be nonnegative");
  require(d.ts.k_law.sd > 0.0, "dgp.k_law.sd", "must be positive");
  require(d.ts.l_law.sd > 0.0, "dgp.l_law.sd", "must be positive");
  require(in_unit(d.ts.z_prob), "dgp.z_prob", "must lie in (0, 1)");
  require(d.hsa.inner_tol > 0.0, "dgp.hsa.inner_tol", "must be positive");
  require(d.hsa.outer_tol > 0.0, "dgp.hsa.outer_tol", "must be positive");
  require(d.hsa.damping > 0.0 && d.hsa.damping <= 1.0, "dgp.hsa.damping", "must lie in (0, 1]");
  require(d.hsa.max_outer >= 1, "dgp.hsa.max_outer", "must be at least 1");
  require(d.share.delta >= 0.0, "dgp.hsa.delta", "must be nonnegative");
  try {
    d.ts.validate();
  } catch (const std::exception& e) {
    throw ConfigError(fmt::format("dgp: {}", e.what()));
  }

  const auto& o = est.ident;
  require(o.grid_points >= 3, "estimation.grid_points", "must be at least 3");
  require(in_unit(o.grid_lo) && in_unit(o.grid_hi) && o.grid_lo < o.grid_hi, "estimation.grid_lo",
          "grid_lo < grid_hi, both in (0, 1)");
  require(o.mean_bw_scale > 0.0, "estimation.bandwidth.mean_scale", "must be positive");
  require(o.cdf.bw_scale > 0.0, "estimation.bandwidth.cdf_scale", "must be positive");
  require(o.cdf.m_bw_scale > 0.0, "estimation.bandwidth.cdf_m_scale", "must be positive");
  require(o.cdf.min_effective_n > 0.0, "estimation.bandwidth.min_effective_n", "must be positive");
  require(in_unit(o.norm_q0) && in_unit(o.norm_q1) && o.norm_q0 < o.norm_q1, "estimation.norm_quantiles",
          "need q0 < q1, both in (0, 1)");
  if (o.norm_points) require(o.norm_points->m0 < o.norm_points->m1, "estimation.norm_points", "need m0 < m1");
  require(!o.anchor_candidates.empty(), "estimation.anchor_candidates", "must not be empty");
  for (const auto& a : o.anchor_candidates)
    require(a == "m1" || a == "k1" || a == "l1" || a == "z1", "estimation.anchor_candidates",
            fmt::format("unknown lagged variable '{}'", a));
  require(!o.anchor_levels.empty(), "estimation.anchor_levels", "must not be empty");
  for (double q : o.anchor_levels) require(in_unit(q), "estimation.anchor_levels", "entries must lie in (0, 1)");
  require(o.anchor_floor > 0.0, "estimation.anchor_floor", "must be positive");
  require(o.density_floor > 0.0, "estimation.density_floor", "must be positive");
  require(o.max_unusable_share > 0.0 && o.max_unusable_share <= 1.0, "estimation.max_unusable_share",
          "must lie in (0, 1]");
  require(o.anchor_average >= 1, "estimation.anchor_average", "must be at least 1");
  require(o.integ_tol > 0.0, "estimation.integ_tol", "must be positive");
  require(in_unit(o.region_lo) && in_unit(o.region_hi) && o.region_lo < o.region_hi, "estimation.region",
          "need lo < hi, both in (0, 1)");
  require(o.min_cell_rows >= 1, "estimation.min_cell_rows", "must be at least 1");
  require(o.weak_iv_threshold > 0.0, "estimation.weak_iv_threshold", "must be positive");
  require(o.overid_threshold > 0.0, "estimation.overid_threshold", "must be positive");
  require(o.overid_bw_scale > 0.0, "estimation.overid_bw_scale", "must be positive");
  require(o.overid_quantile > 0.0 && o.overid_quantile < 0.5, "estimation.overid_quantile", "must lie in (0, 0.5)");
  require(est.min_pair_rows >= 1, "estimation.min_pair_rows", "must be at least 1");
  require(est.discrete_max_levels >= 1, "estimation.discrete_max_levels", "must be at least 1");
  if (est.scale != "crs") {
    try {
      parse_scale_method(est.scale);
    } catch (const std::exception&) {
      throw ConfigError("estimation.scale: expected crs, eta_variance, elasticity_constancy or returns_constancy");
    }
  }
  require(est.scale_input == "m" || est.scale_input == "k" || est.scale_input == "l", "estimation.scale_input",
          "expected m, k or l");
  require(est.demand.nodes >= 3, "estimation.demand.nodes", "must be at least 3");
  require(in_unit(est.demand.q_lo) && in_unit(est.demand.q_hi) && est.demand.q_lo < est.demand.q_hi,
          "estimation.demand.q_lo", "need q_lo < q_hi, both in (0, 1)");
  require(est.demand.z_nodes >= 2, "estimation.demand.z_nodes", "must be at least 2");
  require(est.demand.bw_scale > 0.0, "estimation.demand.bw_scale", "must be positive");

  require(io.replications >= 1, "io.replications", "must be at least 1");
  require(io.threads >= 0, "io.threads", "must be nonnegative");
  require(!io.out.empty(), "io.out", "must not be empty");
  switch (mode) {
    case Mode::Simulate:
    case Mode::MonteCarlo:
      break;
    case Mode::Identify:
    case Mode::Normalize:
      require_file(io.panel, "io.panel");
      break;
    case Mode::Demand:
      if (io.hsa.empty()) require_file(io.panel, "io.panel");
      else require_file(io.hsa, "io.hsa");
      break;
    case Mode::Report:
      require(fs::is_directory(io.out), "io.out", fmt::format("results directory '{}' does not exist", io.out));
      if (!io.compare.empty())
        require(fs::is_directory(io.compare), "io.compare", fmt::format("'{}' is not a directory", io.compare));
      break;
  }
  if (!io.price_index.empty()) require_file(io.price_index, "io.price_index");
  if (!io.queries.empty()) require_file(io.queries, "io.queries");
}

json to_json(const TrueStructure& ts) {
  auto law = [](const InputLaw& l) { return json{{"mean", l.mean}, {"sd", l.sd}, {"persistence", l.persistence}}; };
  return {{"theta0", ts.theta0},
          {"theta_m", ts.theta_m},
          {"theta_k", ts.theta_k},
          {"theta_l", ts.theta_l},
          {"h0", ts.h0},
          {"h1", ts.h1},
          {"sigma_eta", ts.sigma_eta},
          {"sigma_eta_by_period", ts.sigma_eta_by_period},
          {"sigma_eps", ts.sigma_eps},
          {"alpha", {{"a", ts.alpha.a}, {"b", ts.alpha.b}}},
          {"alpha_shift", ts.alpha_shift},
          {"rho", {{"a", ts.rho.a}, {"b", ts.rho.b}}},
          {"p_m", ts.p_m},
          {"z_law", ts.z_law == ZLaw::Bernoulli ? "bernoulli" : "uniform"},
          {"z_prob", ts.z_prob},
          {"k_law", law(ts.k_law)},
          {"l_law", law(ts.l_law)},
          {"labor",
           {{"endogenous", ts.labor.endogenous},
            {"ar", ts.labor.ar},
            {"nu_sd", ts.labor.nu_sd},
            {"kappa", ts.labor.kappa}}},
          {"k_eta", ts.k_eta},
          {"eta_k_scale", ts.eta_k_scale}};
}

json to_json(const IdentOptions& o) {
  auto rule = [](BandwidthRule r) { return r == BandwidthRule::Silverman ? "silverman" : "lscv"; };
  json j = {{"grid_points", o.grid_points},
            {"grid_lo", o.grid_lo},
            {"grid_hi", o.grid_hi},
            {"bandwidth_rule", rule(o.rule)},
            {"mean_bw_scale", o.mean_bw_scale},
            {"cdf",
             {{"rule", rule(o.cdf.rule)},
              {"bw_scale", o.cdf.bw_scale},
              {"m_bw_scale", o.cdf.m_bw_scale},
              {"min_effective_n", o.cdf.min_effective_n},
              {"kernel", "gaussian"}}},
            {"local_linear",
             {{"min_weight", o.cdf.ll.min_weight},
              {"min_local_var", o.cdf.ll.min_local_var},
              {"max_widen", o.cdf.ll.max_widen},
              {"widen_factor", o.cdf.ll.widen_factor}}},
            {"norm_quantiles", {o.norm_q0, o.norm_q1}},
            {"anchor_candidates", o.anchor_candidates},
            {"anchor_levels", o.anchor_levels},
            {"anchor_floor", o.anchor_floor},
            {"density_floor", o.density_floor},
            {"max_unusable_share", o.max_unusable_share},
            {"anchor_average", o.anchor_average},
            {"integ_tol", o.integ_tol},
            {"region", {o.region_lo, o.region_hi}},
            {"min_cell_rows", o.min_cell_rows},
            {"labor_endogenous", o.labor_endogenous},
            {"weak_iv_threshold", o.weak_iv_threshold},
            {"overid_threshold", o.overid_threshold},
            {"overid_bw_scale", o.overid_bw_scale},
            {"overid_quantile", o.overid_quantile}};
  if (o.norm_points) {
    const auto& p = *o.norm_points;
    j["norm_points"] = {{"m0", p.m0}, {"m1", p.m1}, {"k", p.k}, {"l", p.l}, {"z", p.z}};
  } else {
    j["norm_points"] = nullptr;
  }
  return j;
}

json to_json(const HsaBuildOptions& o) {
  return {{"nodes", o.nodes}, {"q_lo", o.q_lo}, {"q_hi", o.q_hi}, {"z_nodes", o.z_nodes}, {"bw_scale", o.bw_scale}};
}

json RunConfig::resolved() const {
  json d = {{"kind", dgp.kind == DgpKind::Ces ? "ces" : "hsa"},
            {"n_firms", dgp.n_firms},
            {"n_periods", dgp.n_periods},
            {"structure", to_json(dgp.ts)}};
  if (dgp.kind == DgpKind::Hsa)
    d["hsa"] = {{"delta", dgp.share.delta},         {"log_kappa", dgp.share.log_kappa},
                {"log_budget", dgp.hsa.log_budget}, {"auto_kappa", dgp.hsa.auto_kappa},
                {"inner_tol", dgp.hsa.inner_tol},   {"outer_tol", dgp.hsa.outer_tol},
                {"damping", dgp.hsa.damping},       {"max_outer", dgp.hsa.max_outer}};
  json e = {{"ident", to_json(est.ident)},
            {"periods", est.periods},
            {"min_pair_rows", est.min_pair_rows},
            {"discrete_max_levels", est.discrete_max_levels},
            {"overid", est.overid},
            {"scale", est.scale},
            {"scale_input", est.scale_input},
            {"demand", to_json(est.demand)},
            {"demand_period", est.demand_period ? json(*est.demand_period) : json(nullptr)}};
  const auto& s = io.schema;
  json i = {{"panel", io.panel},
            {"out", io.out},
            {"price_index", io.price_index},
            {"queries", io.queries},
            {"hsa", io.hsa},
            {"compare", io.compare},
            {"seed", io.seed},
            {"replications", io.replications},
            {"threads", io.threads},
            {"schema",
             {{"id", s.id}, {"t", s.t}, {"r", s.r}, {"m", s.m}, {"k", s.k}, {"l", s.l}, {"z", s.z},
              {"mx", s.mx}, {"truth_prefix", s.truth_prefix}}}};
  return {{"mode", to_string(mode)}, {"dgp", d}, {"estimation", e}, {"io", i}};
}

}  // namespace revid
