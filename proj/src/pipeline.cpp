#include "revid/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <tbb/parallel_for.h>

#include "revid/kernel.hpp"
#include "revid/rng.hpp"

#ifndef REVID_VERSION
#define REVID_VERSION "0.0.0"
#endif

namespace revid {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string num(double v) { return std::isfinite(v) ? fmt::format("{}", v) : std::string(); }

json jval(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

template <class F>
auto stage(const char* module, const char* op, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const IncompleteResults&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(module, op, e.what());
  }
}

void write_json(const json& j, const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(fmt::format("{}: {}", p.string(), e.what()));
  }
}

std::string timestamp() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path out_dir(const RunConfig& cfg) {
  fs::path d(cfg.io.out);
  fs::create_directories(d);
  return d;
}

json manifest(const RunConfig& cfg, json design, const std::vector<std::string>& artifacts) {
  return {{"tool", "revid"},
          {"version", library_version()},
          {"mode", to_string(cfg.mode)},
          {"seed", cfg.io.seed},
          {"timestamp", timestamp()},
          {"config", cfg.source},
          {"resolved", cfg.resolved()},
          {"design", std::move(design)},
          {"artifacts", artifacts}};
}

double mean_of(const std::vector<double>& x, const std::vector<std::size_t>& idx) {
  double s = 0.0;
  for (auto i : idx) s += x[i];
  return idx.empty() ? kNaN : s / static_cast<double>(idx.size());
}

double corr_of(const std::vector<double>& a, const std::vector<double>& b, const std::vector<std::size_t>& idx) {
  double ma = 0, mb = 0;
  for (auto i : idx) {
    ma += a[i];
    mb += b[i];
  }
  double n = static_cast<double>(idx.size());
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (auto i : idx) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Shifter cells: discrete levels, or quartile bins labelled by their median.
struct Cells {
  std::vector<double> label;
  std::vector<std::vector<std::size_t>> rows;
};

Cells shifter_cells(const PanelPair& pr, const std::vector<std::size_t>& idx) {
  Cells c;
  if (pr.z_discrete) {
    for (double lv : pr.z_levels) {
      std::vector<std::size_t> rows;
      for (auto i : idx)
        if (pr.z[i] == lv) rows.push_back(i);
      c.label.push_back(lv);
      c.rows.push_back(std::move(rows));
    }
    return c;
  }
  std::vector<double> zs;
  for (auto i : idx) zs.push_back(pr.z[i]);
  auto cuts = quantiles(zs, {0.25, 0.5, 0.75});
  c.rows.resize(4);
  for (auto i : idx) {
    std::size_t b = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), pr.z[i]) - cuts.begin());
    c.rows[b].push_back(i);
  }
  for (auto& rows : c.rows) {
    std::vector<double> v;
    for (auto i : rows) v.push_back(pr.z[i]);
    c.label.push_back(v.empty() ? kNaN : quantile(v, 0.5));
  }
  return c;
}

std::vector<double> truth_column(const PanelPair& pr, double Truth::*f) {
  std::vector<double> out(pr.size());
  for (std::size_t i = 0; i < pr.size(); ++i) out[i] = pr.truth[i].*f;
  return out;
}

json period_design(const PanelPair& pr, const PeriodResult& r) {
  json anchors = json::array();
  for (const auto& a : r.s2.anchors) anchors.push_back(a.to_json());
  json d = {{"t", r.t},
            {"rows", pr.size()},
            {"attrition", pr.attrition},
            {"incomplete", pr.incomplete},
            {"z_discrete", pr.z_discrete},
            {"z_levels", pr.z_levels},
            {"grid", r.grid.to_json()},
            {"step1_bandwidths", r.s1.bw},
            {"cdf_bandwidths", r.cdf_bw},
            {"anchors", anchors},
            {"anchor_scale", r.s2.S},
            {"c0", r.s2.c0},
            {"c2", r.s2.c2},
            {"unusable_nodes", r.s2.unusable_nodes},
            {"flagged_markup_nodes", r.s3.flagged_nodes},
            {"p_m", r.s3.p_m},
            {"dlw_markup_median", r.s3.dlw_markup_median}};
  if (r.iv) {
    const auto& iv = *r.iv;
    d["labor_iv"] = {{"theta_l", iv.theta_l_hat},        {"theta_l_ols", iv.theta_l_ols},
                     {"first_stage_corr", iv.first_stage_corr}, {"first_stage_f", iv.first_stage_f},
                     {"resid_mean", iv.resid_mean},      {"resid_lag_corr", iv.resid_lag_corr},
                     {"cell_effects", iv.cell_effects}};
  }
  return d;
}

void grid_artifacts(const PeriodResult& r, const fs::path& dir, std::vector<std::string>& files, const char* tag) {
  auto put = [&](const GridFn& g, const std::string& name) {
    if (g.size() == 0) return;
    std::string f = fmt::format("{}{}_t{}.csv", name, tag, r.t);
    g.write_csv((dir / f).string());
    files.push_back(f);
  };
  put(r.s1.phi, "grid_phi");
  put(r.s2.Minv, "grid_minv");
  put(r.s2.hbar, "grid_hbar");
  put(r.s3.f, "grid_f");
  put(r.s3.markup_fn, "grid_markup");
}

std::string firms_name(const char* tag, int t) { return fmt::format("firms{}_t{}.csv", tag, t); }

std::map<int, double> price_index_from(const RunConfig& cfg) {
  if (cfg.io.price_index.empty()) return {};
  return stage("norm", "load_price_index", [&] { return load_price_index(cfg.io.price_index); });
}

FirmPanel load_panel(const RunConfig& cfg) {
  return stage("panel", "load_csv",
               [&] { return load_csv(cfg.io.panel, cfg.io.schema, cfg.est.discrete_max_levels); });
}

json norm_json(const Normalized& n) {
  json links = json::array();
  for (const auto& l : n.links) links.push_back(l.to_json());
  json loc = json::array();
  for (const auto& l : n.location) loc.push_back(l.to_json());
  return {{"b", n.b}, {"links", links}, {"location", loc}};
}

}  // namespace

IncompleteResults::IncompleteResults(const std::string& dir, std::vector<std::string> miss)
    : std::runtime_error([&] {
        std::string s = fmt::format("results directory '{}' is incomplete; missing:", dir);
        for (const auto& m : miss) s += " " + m;
        return s;
      }()),
      missing(std::move(miss)) {}

std::string library_version() { return REVID_VERSION; }

FirmPanel simulate_panel(const DgpConfig& d, std::uint64_t seed, std::vector<double>* aggregator) {
  if (d.kind == DgpKind::Hsa)
    return stage("dgp", "simulate_hsa",
                 [&] { return simulate_hsa(d.share, d.ts, d.n_firms, d.n_periods, seed, d.hsa, aggregator); });
  return stage("dgp", "simulate_ces", [&] { return simulate_ces(d.ts, d.n_firms, d.n_periods, seed); });
}

Identified identify_panel(const FirmPanel& panel, const EstimationConfig& est) {
  std::vector<int> periods = est.periods;
  if (periods.empty()) {
    auto all = panel.periods();
    for (std::size_t j = 1; j < all.size(); ++j) periods.push_back(all[j]);
  }
  if (periods.empty()) throw StageError("panel", "make_pair", "panel has fewer than two periods");
  Identified id;
  for (int t : periods) {
    id.pairs.push_back(stage("panel", "make_pair", [&] { return make_pair(panel, t, est.min_pair_rows); }));
    const auto& pr = id.pairs.back();
    id.results.push_back(stage("ident", "identify_period", [&] { return identify_period(pr, est.ident); }));
    if (est.overid) {
      id.overid.push_back(stage("ident", "overid_check", [&] {
        CondCdf cdf = make_cdf(pr, est.ident.cdf);
        return overid_check(pr, cdf, id.results.back().grid, est.ident);
      }));
    }
  }
  return id;
}

Normalized normalize(Identified& id, const EstimationConfig& est, const std::map<int, double>* P_star) {
  Normalized n;
  const auto& o = est.ident;
  std::size_t np = id.results.size();
  std::vector<Region> regions;
  for (const auto& pr : id.pairs) regions.push_back(quantile_region(pr, o.region_lo, o.region_hi));
  if (est.scale == "crs") {
    for (std::size_t j = 0; j < np; ++j) {
      n.links.push_back(stage("norm", "scale_from_crs", [&] { return scale_from_crs(id.results[j], regions[j]); }));
      n.b.push_back(n.links.back().b_t);
    }
  } else {
    ScaleMethod m = parse_scale_method(est.scale);
    n.b.push_back(1.0);
    for (std::size_t j = 1; j < np; ++j) {
      n.links.push_back(stage("norm", "scale_ratio", [&] {
        return scale_ratio(id.results[j - 1], id.results[j], m, regions[j - 1], est.scale_input);
      }));
      n.b.push_back(n.b.back() * n.links.back().b_ratio);
    }
  }
  for (std::size_t j = 0; j < np; ++j) apply_scale(id.results[j], n.b[j]);
  if (P_star && !P_star->empty() && np >= 2) {
    auto xbar = pooled_median_inputs(id.pairs);
    n.location = stage("norm", "location_links", [&] { return location_links(id.results, id.pairs, *P_star, xbar); });
  }
  return n;
}

std::vector<CellError> markup_errors(const PanelPair& pr, const PeriodResult& r) {
  auto idx = interior_firms(r);
  auto cells = shifter_cells(pr, idx);
  std::vector<CellError> out;
  for (std::size_t c = 0; c < cells.rows.size(); ++c) {
    CellError e;
    e.z = cells.label[c];
    e.firms = cells.rows[c].size();
    double s = 0.0;
    for (auto i : cells.rows[c]) s += (r.s3.markup[i] - pr.truth[i].markup) / pr.truth[i].markup;
    e.markup_rel_error = e.firms ? s / static_cast<double>(e.firms) : kNaN;
    out.push_back(e);
  }
  return out;
}

json recovery_table(const Identified& id, const DgpConfig& d) {
  json rows = json::array();
  auto row = [&](const std::string& obj, double truth, double est) {
    double rel = truth != 0.0 ? (est - truth) / std::abs(truth) : est - truth;
    rows.push_back({{"object", obj}, {"truth", jval(truth)}, {"estimate", jval(est)}, {"rel_error", jval(rel)}});
  };
  for (std::size_t j = 0; j < id.results.size(); ++j) {
    const auto& pr = id.pairs[j];
    const auto& r = id.results[j];
    if (!pr.has_truth) continue;
    auto idx = interior_firms(r);
    if (idx.empty()) continue;
    auto cells = shifter_cells(pr, idx);
    auto mu = truth_column(pr, &Truth::markup);
    for (std::size_t c = 0; c < cells.rows.size(); ++c)
      row(fmt::format("markup[t={},z={:.4g}]", r.t, cells.label[c]), mean_of(mu, cells.rows[c]),
          mean_of(r.s3.markup, cells.rows[c]));
    row(fmt::format("theta_m[t={}]", r.t), d.ts.theta_m, mean_of(r.s3.el_m, idx));
    row(fmt::format("theta_k[t={}]", r.t), d.ts.theta_k, mean_of(r.s3.el_k, idx));
    row(fmt::format("theta_l[t={}]", r.t), d.ts.theta_l, mean_of(r.s3.el_l, idx));
    row(fmt::format("tfp_corr[t={}]", r.t), 1.0, corr_of(r.s2.omega, truth_column(pr, &Truth::omega), idx));
    row(fmt::format("revenue_markup_median[t={}]", r.t), 1.0, r.s3.dlw_markup_median);
    if (r.iv) row(fmt::format("theta_l_iv[t={}]", r.t), d.ts.theta_l, r.iv->theta_l_hat);
  }
  return rows;
}

void write_firms_csv(const PanelPair& pr, const PeriodResult& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "firm_id,t,z,rbar,eps,omega,eta,markup,y,p,share,el_m,el_k,el_l,revenue_markup,interior\n";
  std::vector<unsigned char> interior(pr.size(), 0);
  for (auto i : interior_firms(r)) interior[i] = 1;
  for (std::size_t i = 0; i < pr.size(); ++i) {
    out << pr.firm_id[i] << ',' << r.t << ',' << num(pr.z[i]) << ',' << num(r.s1.rbar[i]) << ','
        << num(r.s1.eps[i]) << ',' << num(r.s2.omega[i]) << ',' << num(r.s2.eta[i]) << ',' << num(r.s3.markup[i])
        << ',' << num(r.s3.y[i]) << ',' << num(r.s3.p[i]) << ',' << num(r.s3.share[i]) << ',' << num(r.s3.el_m[i])
        << ',' << num(r.s3.el_k[i]) << ',' << num(r.s3.el_l[i]) << ',' << num(r.s3.dlw_markup[i]) << ','
        << int(interior[i]) << '\n';
  }
}

json run_simulate(const RunConfig& cfg) {
  auto dir = out_dir(cfg);
  std::vector<double> agg;
  FirmPanel panel = simulate_panel(cfg.dgp, cfg.io.seed, &agg);
  std::vector<std::string> files{"panel.csv", "manifest.json", "summary.json"};
  save_csv(panel, (dir / "panel.csv").string(), cfg.io.schema);
  if (cfg.dgp.kind == DgpKind::Hsa) {
    std::ofstream a(dir / "aggregator.csv");
    a << "period,A\n";
    for (std::size_t t = 0; t < agg.size(); ++t) a << t << ',' << num(agg[t]) << '\n';
    files.push_back("aggregator.csv");
  }
  json counts = json::object();
  for (auto [t, n] : panel.counts_per_period()) counts[std::to_string(t)] = n;
  json oracle = json::array();
  if (cfg.dgp.kind == DgpKind::Ces && cfg.dgp.ts.z_law == ZLaw::Bernoulli) {
    auto oc = oracle_control(cfg.dgp.ts);
    for (double z : cfg.dgp.ts.z_support())
      oracle.push_back({{"z", z},
                        {"rho", cfg.dgp.ts.rho(z)},
                        {"markup", 1.0 / cfg.dgp.ts.rho(z)},
                        {"material_share", oc.s(z)},
                        {"beta_m", oc.beta_m(z)}});
  }
  json summary = {{"mode", "simulate"}, {"rows", panel.size()}, {"counts_per_period", counts},
                  {"z_discrete", panel.z_discrete()}, {"oracle", oracle}};
  if (!agg.empty()) summary["aggregator"] = agg;
  write_json(summary, dir / "summary.json");
  write_json(manifest(cfg, {{"structure", to_json(cfg.dgp.ts)}}, files), dir / "manifest.json");
  return summary;
}

json run_identify(const RunConfig& cfg) {
  auto dir = out_dir(cfg);
  FirmPanel panel = load_panel(cfg);
  Identified id = identify_panel(panel, cfg.est);
  std::vector<std::string> files{"manifest.json", "summary.json"};
  json design = json::array(), periods = json::array();
  for (std::size_t j = 0; j < id.results.size(); ++j) {
    const auto& r = id.results[j];
    std::string f = firms_name("", r.t);
    write_firms_csv(id.pairs[j], r, (dir / f).string());
    files.push_back(f);
    grid_artifacts(r, dir, files, "");
    design.push_back(period_design(id.pairs[j], r));
    json p = {{"t", r.t}, {"rows", id.pairs[j].size()}, {"interior", interior_firms(r).size()}};
    if (j < id.overid.size()) p["overid"] = id.overid[j].to_json();
    periods.push_back(p);
  }
  json summary = {{"mode", "identify"}, {"periods", periods}};
  if (panel.has_truth()) {
    Identified scaled = id;
    EstimationConfig e = cfg.est;
    e.scale = "crs";
    normalize(scaled, e);
    summary["recovery_scale"] = "crs";
    summary["recovery"] = recovery_table(scaled, cfg.dgp);
  }
  write_json(summary, dir / "summary.json");
  write_json(manifest(cfg, {{"periods", design}}, files), dir / "manifest.json");
  return summary;
}

json run_normalize(const RunConfig& cfg) {
  auto dir = out_dir(cfg);
  FirmPanel panel = load_panel(cfg);
  Identified id = identify_panel(panel, cfg.est);
  auto P_star = price_index_from(cfg);
  Normalized n = normalize(id, cfg.est, &P_star);
  std::vector<std::string> files{"manifest.json", "summary.json", "scale.json"};
  json design = json::array();
  for (std::size_t j = 0; j < id.results.size(); ++j) {
    const auto& r = id.results[j];
    std::string f = firms_name("_norm", r.t);
    write_firms_csv(id.pairs[j], r, (dir / f).string());
    files.push_back(f);
    grid_artifacts(r, dir, files, "_norm");
    design.push_back(period_design(id.pairs[j], r));
  }
  auto truth_of = [&](int t) {
    std::unordered_map<std::string, Truth> m;
    for (const auto& pr : id.pairs)
      if (pr.t == t && pr.has_truth)
        for (std::size_t i = 0; i < pr.size(); ++i) m.emplace(pr.firm_id[i], pr.truth[i]);
    return m;
  };
  for (const auto& l : n.location) {
    std::string f = fmt::format("location_t{}_t{}.csv", l.t, l.t1);
    std::ofstream out(dir / f);
    auto tr0 = truth_of(l.t), tr1 = truth_of(l.t1);
    bool truth = !tr0.empty() && !tr1.empty();
    out << "firm_id,y_growth,tfp_growth,rbar_growth,p_growth" << (truth ? ",y_growth_true,tfp_growth_true" : "")
        << '\n';
    for (std::size_t i = 0; i < l.firm_id.size(); ++i) {
      out << l.firm_id[i] << ',' << num(l.y_growth[i]) << ',' << num(l.tfp_growth[i]) << ','
          << num(l.rbar_growth[i]) << ',' << num(l.p_growth[i]);
      if (truth) {
        const auto &a = tr0.at(l.firm_id[i]), &b = tr1.at(l.firm_id[i]);
        out << ',' << num(b.y - a.y) << ',' << num(b.omega - a.omega);
      }
      out << '\n';
    }
    files.push_back(f);
  }
  json nj = norm_json(n);
  write_json(nj, dir / "scale.json");
  json summary = {{"mode", "normalize"}, {"scale", cfg.est.scale}, {"normalization", nj}};
  if (P_star.empty()) summary["note"] = "no price index supplied; location links skipped";
  if (panel.has_truth()) summary["recovery"] = recovery_table(id, cfg.dgp);
  write_json(summary, dir / "summary.json");
  json d = {{"periods", design}, {"scale", cfg.est.scale}, {"scale_input", cfg.est.scale_input}};
  if (!n.location.empty()) d["xbar"] = n.location.front().xbar;
  write_json(manifest(cfg, d, files), dir / "manifest.json");
  return summary;
}

namespace {

struct Query {
  std::string scenario, firm_id;
  double Y = 0.0, z = 0.0;
};

std::vector<Query> load_queries(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty file " + path);
  auto header = split_csv(line);
  auto col = [&](const std::string& name, bool required) -> long {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      if (required) throw SchemaError(fmt::format("{}: missing column '{}'", path, name));
      return -1;
    }
    return it - header.begin();
  };
  long cf = col("firm_id", true), cy = col("Y", true), cz = col("z", true), cs = col("scenario", false);
  auto parse = [&](const std::string& s, const char* name, std::size_t ln) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v))
      throw SchemaError(fmt::format("{} line {}: column '{}' is not a finite number", path, ln, name));
    return v;
  };
  std::vector<Query> out;
  std::size_t ln = 1;
  while (std::getline(in, line)) {
    ++ln;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto f = split_csv(line);
    if (f.size() < header.size()) throw SchemaError(fmt::format("{} line {}: too few fields", path, ln));
    Query q;
    q.firm_id = f[cf];
    q.Y = parse(f[cy], "Y", ln);
    q.z = parse(f[cz], "z", ln);
    if (cs >= 0) q.scenario = f[cs];
    out.push_back(std::move(q));
  }
  if (out.empty()) throw SchemaError(path + ": no query rows");
  return out;
}

}  // namespace

json run_demand(const RunConfig& cfg) {
  auto dir = out_dir(cfg);
  std::vector<std::string> files{"manifest.json", "summary.json", "hsa.json"};
  HsaSystem sys;
  json design;
  if (!cfg.io.hsa.empty()) {
    sys = stage("demand", "load_hsa", [&] { return HsaSystem::from_json(read_json(cfg.io.hsa)); });
    design = {{"source", cfg.io.hsa}};
  } else {
    FirmPanel panel = load_panel(cfg);
    EstimationConfig e = cfg.est;
    int t = cfg.est.demand_period ? *cfg.est.demand_period
                                  : (cfg.est.periods.empty() ? panel.periods().back() : cfg.est.periods.back());
    e.periods = {t};
    e.overid = false;
    Identified id = identify_panel(panel, e);
    Normalized n = normalize(id, e);
    sys = stage("demand", "build_hsa", [&] { return build_hsa(id.results[0], id.pairs[0], cfg.est.demand); });
    design = {{"period", t}, {"b", n.b}, {"build", to_json(cfg.est.demand)},
              {"utility_lower_limit", "data-point quantity per firm, so ln U at the data point is 0"},
              {"extrapolation", "log revenue linear in log quantity beyond the end nodes, boundary slope"},
              {"identification", period_design(id.pairs[0], id.results[0])}};
  }
  write_json(sys.to_json(), dir / "hsa.json");
  json scen = json::array();
  if (!cfg.io.queries.empty()) {
    auto qs = stage("demand", "load_queries", [&] { return load_queries(cfg.io.queries); });
    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < qs.size(); ++i) {
      auto [it, fresh] = groups.try_emplace(qs[i].scenario);
      if (fresh) order.push_back(qs[i].scenario);
      it->second.push_back(i);
    }
    std::ofstream out(dir / "demand.csv");
    out << "scenario,firm_id,Y,z,P,share,A,lnU\n";
    for (const auto& name : order) {
      auto rows = groups[name];
      const auto& ids = sys.firm_ids();
      bool full = rows.size() == sys.log_Y0().size();
      if (full && !ids.empty()) {
        // utility pairs each quantity with its data-point firm
        std::unordered_map<std::string, std::size_t> pos;
        for (std::size_t i = 0; i < ids.size(); ++i) pos.emplace(ids[i], i);
        std::vector<std::size_t> aligned(rows.size(), rows.size());
        for (auto i : rows) {
          auto it = pos.find(qs[i].firm_id);
          if (it == pos.end() || aligned[it->second] != rows.size()) {
            full = false;
            break;
          }
          aligned[it->second] = i;
        }
        if (full) rows = std::move(aligned);
      }
      std::vector<double> Y, z;
      for (auto i : rows) {
        Y.push_back(qs[i].Y);
        z.push_back(qs[i].z);
      }
      auto agg = stage("demand", "solve_aggregator", [&] { return solve_aggregator(sys, Y, z); });
      auto P = stage("demand", "inverse_demand", [&] { return inverse_demand_all(sys, Y, z, agg); });
      double lnU = kNaN;
      if (full)
        lnU = stage("demand", "log_utility", [&] { return log_utility(sys, Y, z, agg); });
      double Phi = std::exp(sys.log_Phi()), budget = 0.0;
      for (std::size_t j = 0; j < rows.size(); ++j) {
        double share = P[j] * Y[j] / Phi;
        budget += share;
        out << name << ',' << qs[rows[j]].firm_id << ',' << num(Y[j]) << ',' << num(z[j]) << ',' << num(P[j]) << ','
            << num(share) << ',' << num(agg.A) << ',' << num(lnU) << '\n';
      }
      scen.push_back({{"scenario", name}, {"firms", rows.size()}, {"A", agg.A}, {"lnU", jval(lnU)},
                      {"share_sum", budget}, {"extrapolated", agg.extrapolated}});
    }
    files.push_back("demand.csv");
  }
  json summary = {{"mode", "demand"},
                  {"log_Phi", sys.log_Phi()},
                  {"curves", sys.curves().size()},
                  {"z_discrete", sys.z_discrete()},
                  {"share_violations", sys.violations().size()},
                  {"scenarios", scen}};
  write_json(summary, dir / "summary.json");
  write_json(manifest(cfg, design, files), dir / "manifest.json");
  return summary;
}

namespace {

struct RepOutcome {
  std::uint64_t seed = 0;
  std::string error;
  json recovery;
  std::vector<std::pair<int, std::vector<CellError>>> cells;
};

double sd_of(const std::vector<double>& x, double mean) {
  if (x.size() < 2) return 0.0;
  double s = 0.0;
  for (double v : x) s += (v - mean) * (v - mean);
  return std::sqrt(s / static_cast<double>(x.size() - 1));
}

}  // namespace

json run_montecarlo(const RunConfig& cfg) {
  auto dir = out_dir(cfg);
  std::size_t R = cfg.io.replications;
  std::vector<RepOutcome> reps(R);
  EstimationConfig e = cfg.est;
  e.scale = "crs";
  tbb::parallel_for(std::size_t{0}, R, [&](std::size_t k) {
    auto& o = reps[k];
    o.seed = substream_seed(cfg.io.seed, k);
    try {
      FirmPanel panel = simulate_panel(cfg.dgp, o.seed);
      Identified id = identify_panel(panel, e);
      normalize(id, e);
      o.recovery = recovery_table(id, cfg.dgp);
      for (std::size_t j = 0; j < id.results.size(); ++j)
        o.cells.emplace_back(id.results[j].t, markup_errors(id.pairs[j], id.results[j]));
    } catch (const std::exception& ex) {
      o.error = ex.what();
    }
  });

  std::ofstream rc(dir / "replications.csv");
  rc << "replication,seed,object,truth,estimate,rel_error\n";
  std::map<std::string, std::vector<double>> est_by_obj, rel_by_obj;
  std::map<std::string, double> truth_by_obj;
  std::vector<std::string> obj_order;
  std::map<std::pair<int, double>, std::vector<double>> cell_err;
  json failures = json::array();
  std::size_t ok = 0;
  for (std::size_t k = 0; k < R; ++k) {
    const auto& o = reps[k];
    if (!o.error.empty()) {
      failures.push_back({{"replication", k}, {"seed", o.seed}, {"error", o.error}});
      continue;
    }
    ++ok;
    for (const auto& row : o.recovery) {
      std::string obj = row["object"];
      if (!truth_by_obj.count(obj)) obj_order.push_back(obj);
      double tr = row["truth"].is_null() ? kNaN : row["truth"].get<double>();
      double es = row["estimate"].is_null() ? kNaN : row["estimate"].get<double>();
      double re = row["rel_error"].is_null() ? kNaN : row["rel_error"].get<double>();
      truth_by_obj[obj] = tr;
      est_by_obj[obj].push_back(es);
      rel_by_obj[obj].push_back(re);
      rc << k << ',' << o.seed << ',' << obj << ',' << num(tr) << ',' << num(es) << ',' << num(re) << '\n';
    }
    for (const auto& [t, cells] : o.cells)
      for (const auto& c : cells) cell_err[{t, c.z}].push_back(c.markup_rel_error);
  }
  if (ok == 0) throw StageError("cli", "montecarlo", fmt::format("all {} replications failed: {}", R, reps[0].error));

  json markup_error = json::array();
  for (const auto& [key, v] : cell_err) {
    double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += x * x;
    markup_error.push_back({{"t", key.first}, {"z", key.second}, {"mean", m}, {"sd", sd_of(v, m)},
                            {"rmse", std::sqrt(ss / static_cast<double>(v.size()))}, {"replications", v.size()}});
  }
  json table = json::array(), recovery = json::array();
  for (const auto& obj : obj_order) {
    const auto& es = est_by_obj[obj];
    const auto& re = rel_by_obj[obj];
    double me = std::accumulate(es.begin(), es.end(), 0.0) / static_cast<double>(es.size());
    double tr = truth_by_obj[obj];
    double bias = me - tr, ss = 0.0;
    for (double x : es) ss += (x - tr) * (x - tr);
    double mre = std::accumulate(re.begin(), re.end(), 0.0) / static_cast<double>(re.size());
    table.push_back({{"object", obj}, {"truth", jval(tr)}, {"mean", me}, {"sd", sd_of(es, me)}, {"bias", bias},
                     {"rmse", std::sqrt(ss / static_cast<double>(es.size()))}});
    recovery.push_back({{"object", obj}, {"truth", jval(tr)}, {"estimate", me}, {"rel_error", jval(mre)}});
  }
  json summary = {{"mode", "montecarlo"},  {"replications", R},     {"succeeded", ok},
                  {"failures", failures},  {"markup_error", markup_error}, {"bias_rmse", table},
                  {"recovery", recovery}};
  write_json(summary, dir / "summary.json");
  json seeds = json::array();
  for (const auto& o : reps) seeds.push_back(o.seed);
  write_json(manifest(cfg, {{"replication_seeds", seeds}, {"scale", "crs"}},
                      {"manifest.json", "summary.json", "replications.csv"}),
             dir / "manifest.json");
  return summary;
}

namespace {

struct RunTables {
  json manifest, summary;
};

RunTables load_run(const std::string& dir) {
  std::vector<std::string> missing;
  for (const char* f : {"manifest.json", "summary.json"})
    if (!fs::exists(fs::path(dir) / f)) missing.push_back(f);
  if (!fs::is_directory(dir)) missing = {"manifest.json", "summary.json"};
  if (missing.empty()) {
    auto m = read_json(fs::path(dir) / "manifest.json");
    for (const auto& a : m.value("artifacts", json::array()))
      if (!fs::exists(fs::path(dir) / a.get<std::string>())) missing.push_back(a.get<std::string>());
    if (missing.empty()) return {m, read_json(fs::path(dir) / "summary.json")};
  }
  throw IncompleteResults(dir, missing);
}

std::string fmt_cell(const json& v) {
  if (v.is_null()) return "-";
  return fmt::format("{:.5g}", v.get<double>());
}

}  // namespace

Report run_report(const std::string& dir, const std::string& compare) {
  RunTables a = load_run(dir);
  Report rep;
  std::string& s = rep.text;
  s += fmt::format("run: {} (mode {}, seed {}, version {})\n", dir, a.manifest.value("mode", "?"),
                   a.manifest.value("seed", 0ull), a.manifest.value("version", "?"));
  const json rows = a.summary.value("recovery", json::array());
  fs::path out = fs::path(dir);
  if (compare.empty()) {
    s += fmt::format("\n{:<32} {:>12} {:>12} {:>12}\n", "object", "truth", "estimate", "rel_error");
    for (const auto& r : rows)
      s += fmt::format("{:<32} {:>12} {:>12} {:>12}\n", r["object"].get<std::string>(), fmt_cell(r["truth"]),
                       fmt_cell(r["estimate"]), fmt_cell(r["rel_error"]));
    if (rows.empty()) s += "(no recovery rows: run has no latent truth or mode produces none)\n";
    std::ofstream lc(out / "report_long.csv");
    lc << "object,quantity,value\n";
    for (const auto& r : rows)
      for (const char* q : {"truth", "estimate", "rel_error"})
        lc << r["object"].get<std::string>() << ',' << q << ','
           << (r[q].is_null() ? std::string() : num(r[q].get<double>())) << '\n';
    rep.files.push_back((out / "report_long.csv").string());
    std::ofstream rc(out / "report_recovery.csv");
    rc << "object,truth,estimate,rel_error\n";
    for (const auto& r : rows) {
      rc << r["object"].get<std::string>();
      for (const char* q : {"truth", "estimate", "rel_error"})
        rc << ',' << (r[q].is_null() ? std::string() : num(r[q].get<double>()));
      rc << '\n';
    }
    rep.files.push_back((out / "report_recovery.csv").string());
    if (a.summary.contains("markup_error")) {
      s += fmt::format("\nmarkup error by shifter cell\n{:>4} {:>8} {:>12} {:>12} {:>12}\n", "t", "z", "mean", "sd",
                       "rmse");
      std::ofstream mc(out / "report_markup_error.csv");
      mc << "t,z,mean,sd,rmse,replications\n";
      for (const auto& r : a.summary["markup_error"]) {
        s += fmt::format("{:>4} {:>8.4g} {:>12.5g} {:>12.5g} {:>12.5g}\n", r["t"].get<int>(), r["z"].get<double>(),
                         r["mean"].get<double>(), r["sd"].get<double>(), r["rmse"].get<double>());
        mc << r["t"].get<int>() << ',' << num(r["z"].get<double>()) << ',' << num(r["mean"].get<double>()) << ','
           << num(r["sd"].get<double>()) << ',' << num(r["rmse"].get<double>()) << ','
           << r["replications"].get<std::size_t>() << '\n';
      }
      rep.files.push_back((out / "report_markup_error.csv").string());
    }
    if (a.summary.contains("periods")) {
      std::ofstream oc;
      for (const auto& p : a.summary["periods"]) {
        if (!p.contains("overid")) continue;
        const auto& o = p["overid"];
        if (!oc.is_open()) {
          oc.open(out / "report_overid.csv");
          oc << "t,max_discrepancy,min_corr,slope_gap,flagged\n";
          s += fmt::format("\nover-identification\n{:>4} {:>16} {:>10} {:>10} {:>8}\n", "t", "max_discrepancy",
                           "min_corr", "slope_gap", "flagged");
          rep.files.push_back((out / "report_overid.csv").string());
        }
        s += fmt::format("{:>4} {:>16.5g} {:>10.5g} {:>10.5g} {:>8}\n", p["t"].get<int>(),
                         o.value("max_discrepancy", 0.0), o.value("min_corr", 1.0), o.value("slope_gap", 0.0),
                         o.value("flagged", false) ? "yes" : "no");
        oc << p["t"].get<int>() << ',' << num(o.value("max_discrepancy", 0.0)) << ','
           << num(o.value("min_corr", 1.0)) << ',' << num(o.value("slope_gap", 0.0)) << ','
           << (o.value("flagged", false) ? 1 : 0) << '\n';
      }
    }
  } else {
    RunTables b = load_run(compare);
    std::map<std::string, json> other;
    for (const auto& r : b.summary.value("recovery", json::array())) other[r["object"]] = r;
    s += fmt::format("compared with: {}\n\n{:<32} {:>12} {:>12} {:>12} {:>12}\n", compare, "object", "truth",
                     "estimate_a", "estimate_b", "difference");
    std::ofstream cc(out / "report_compare.csv");
    cc << "object,truth,estimate_a,estimate_b,difference\n";
    for (const auto& r : rows) {
      std::string obj = r["object"];
      json eb = other.count(obj) ? other[obj]["estimate"] : json(nullptr);
      json diff = (eb.is_null() || r["estimate"].is_null())
                      ? json(nullptr)
                      : json(r["estimate"].get<double>() - eb.get<double>());
      s += fmt::format("{:<32} {:>12} {:>12} {:>12} {:>12}\n", obj, fmt_cell(r["truth"]), fmt_cell(r["estimate"]),
                       fmt_cell(eb), fmt_cell(diff));
      auto cell = [](const json& v) { return v.is_null() ? std::string() : num(v.get<double>()); };
      cc << obj << ',' << cell(r["truth"]) << ',' << cell(r["estimate"]) << ',' << cell(eb) << ',' << cell(diff)
         << '\n';
    }
    rep.files.push_back((out / "report_compare.csv").string());
  }
  std::ofstream(out / "report.txt") << s;
  rep.files.push_back((out / "report.txt").string());
  return rep;
}

json run(const RunConfig& cfg) {
  cfg.validate();
  switch (cfg.mode) {
    case Mode::Simulate: return run_simulate(cfg);
    case Mode::Identify: return run_identify(cfg);
    case Mode::Normalize: return run_normalize(cfg);
    case Mode::Demand: return run_demand(cfg);
    case Mode::MonteCarlo: return run_montecarlo(cfg);
    case Mode::Report: {
      auto rep = stage("cli", "report", [&] { return run_report(cfg.io.out, cfg.io.compare); });
      return {{"mode", "report"}, {"text", rep.text}, {"files", rep.files}};
    }
  }
  return {};
}

}  // namespace revid
