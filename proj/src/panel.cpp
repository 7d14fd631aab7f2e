#include "revid/panel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <unordered_map>

#include <boost/tokenizer.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace revid {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const char* const kTruthNames[] = {"omega", "markup", "p", "y", "eps", "eta"};

double& truth_field(Truth& t, int j) {
  switch (j) {
    case 0: return t.omega;
    case 1: return t.markup;
    case 2: return t.p;
    case 3: return t.y;
    case 4: return t.eps;
    default: return t.eta;
  }
}

double truth_field(const Truth& t, int j) { return truth_field(const_cast<Truth&>(t), j); }

Truth empty_truth() { return {kNaN, kNaN, kNaN, kNaN, kNaN, kNaN}; }

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& s, const std::string& col, std::size_t line) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw SchemaError(fmt::format("line {}: column '{}' is not numeric: '{}'", line, col, s));
  if (!std::isfinite(v))
    throw SchemaError(fmt::format("line {}: column '{}' is not finite", line, col));
  return v;
}

std::string fmt_num(double v) { return std::isnan(v) ? std::string() : fmt::format("{}", v); }

}  // namespace

std::vector<std::string> split_csv(const std::string& line) {
  using Sep = boost::escaped_list_separator<char>;
  boost::tokenizer<Sep> tok(line, Sep('\\', ',', '"'));
  std::vector<std::string> out;
  for (const auto& f : tok) out.push_back(trim(f));
  return out;
}

std::vector<double> discrete_levels(const std::vector<double>& x, std::size_t max_levels) {
  std::set<double> lv;
  for (double v : x) {
    lv.insert(v);
    if (lv.size() > max_levels) return {};
  }
  return {lv.begin(), lv.end()};
}

FirmPanel::FirmPanel(std::vector<FirmRecord> recs, bool has_truth, std::size_t discrete_max_levels)
    : recs_(std::move(recs)), has_truth_(has_truth) {
  std::set<std::pair<std::string, int>> seen;
  std::vector<double> zs;
  zs.reserve(recs_.size());
  for (const auto& r : recs_) {
    if (!seen.emplace(r.firm_id, r.period).second)
      throw SchemaError(fmt::format("duplicate (firm_id, period) = ({}, {})", r.firm_id, r.period));
    if (!(r.mx > 0)) throw SchemaError(fmt::format("mx must be positive (firm {})", r.firm_id));
    for (double v : {r.r, r.m, r.k, r.l, r.z, r.mx})
      if (!std::isfinite(v))
        throw SchemaError(fmt::format("non-finite value for firm {}", r.firm_id));
    zs.push_back(r.z);
  }
  z_levels_ = discrete_levels(zs, discrete_max_levels);
  z_discrete_ = !z_levels_.empty();
}

std::vector<int> FirmPanel::periods() const {
  std::set<int> s;
  for (const auto& r : recs_) s.insert(r.period);
  return {s.begin(), s.end()};
}

std::map<int, std::size_t> FirmPanel::counts_per_period() const {
  std::map<int, std::size_t> c;
  for (const auto& r : recs_) ++c[r.period];
  return c;
}

FirmPanel load_csv(const std::string& path, const Schema& schema, std::size_t discrete_max_levels) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty file " + path);
  auto header = split_csv(line);
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t j = 0; j < header.size(); ++j) col[header[j]] = j;

  const std::vector<std::string> required = {schema.id, schema.t, schema.r, schema.m,
                                             schema.k,  schema.l, schema.z, schema.mx};
  std::vector<std::size_t> idx;
  for (const auto& name : required) {
    auto it = col.find(name);
    if (it == col.end()) throw SchemaError("missing column '" + name + "'");
    idx.push_back(it->second);
  }
  int truth_idx[6];
  bool has_truth = false;
  for (int j = 0; j < 6; ++j) {
    auto it = col.find(schema.truth_prefix + kTruthNames[j]);
    truth_idx[j] = it == col.end() ? -1 : static_cast<int>(it->second);
    has_truth = has_truth || truth_idx[j] >= 0;
  }

  std::vector<FirmRecord> recs;
  std::size_t lineno = 1, dropped = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto f = split_csv(line);
    f.resize(std::max(f.size(), header.size()));
    bool missing = false;
    for (auto j : idx) missing = missing || f[j].empty();
    if (missing) {
      ++dropped;
      continue;
    }
    FirmRecord rec;
    rec.firm_id = f[idx[0]];
    double tv = parse_double(f[idx[1]], schema.t, lineno);
    if (tv != std::floor(tv))
      throw SchemaError(fmt::format("line {}: period must be an integer", lineno));
    rec.period = static_cast<int>(tv);
    rec.r = parse_double(f[idx[2]], schema.r, lineno);
    rec.m = parse_double(f[idx[3]], schema.m, lineno);
    rec.k = parse_double(f[idx[4]], schema.k, lineno);
    rec.l = parse_double(f[idx[5]], schema.l, lineno);
    rec.z = parse_double(f[idx[6]], schema.z, lineno);
    rec.mx = parse_double(f[idx[7]], schema.mx, lineno);
    rec.truth = empty_truth();
    for (int j = 0; j < 6; ++j) {
      if (truth_idx[j] < 0 || f[truth_idx[j]].empty()) continue;
      truth_field(rec.truth, j) =
          parse_double(f[truth_idx[j]], schema.truth_prefix + kTruthNames[j], lineno);
    }
    recs.push_back(std::move(rec));
  }
  if (dropped) spdlog::warn("{}: dropped {} rows with missing required fields", path, dropped);
  FirmPanel panel(std::move(recs), has_truth, discrete_max_levels);
  panel.set_dropped_rows(dropped);
  for (auto [t, n] : panel.counts_per_period()) spdlog::debug("{}: period {} has {} rows", path, t, n);
  return panel;
}

void save_csv(const FirmPanel& panel, const std::string& path, const Schema& schema) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << schema.id << ',' << schema.t << ',' << schema.r << ',' << schema.m << ',' << schema.k
      << ',' << schema.l << ',' << schema.z << ',' << schema.mx;
  if (panel.has_truth())
    for (auto n : kTruthNames) out << ',' << schema.truth_prefix << n;
  out << '\n';
  for (const auto& r : panel.records()) {
    out << r.firm_id << ',' << r.period << ',' << fmt_num(r.r) << ',' << fmt_num(r.m) << ','
        << fmt_num(r.k) << ',' << fmt_num(r.l) << ',' << fmt_num(r.z) << ',' << fmt_num(r.mx);
    if (panel.has_truth())
      for (int j = 0; j < 6; ++j) out << ',' << fmt_num(truth_field(r.truth, j));
    out << '\n';
  }
}

std::vector<double> PanelPair::v(std::size_t i) const {
  return {k[i], l[i], z[i], m1[i], k1[i], l1[i], z1[i]};
}

PanelPair make_pair(const FirmPanel& panel, int t, std::size_t min_rows) {
  std::unordered_map<std::string, const FirmRecord*> prev;
  bool has_prev = false, has_cur = false;
  std::size_t n_cur = 0;
  for (const auto& r : panel.records()) {
    if (r.period == t - 1) {
      prev.emplace(r.firm_id, &r);
      has_prev = true;
    } else if (r.period == t) {
      has_cur = true;
      ++n_cur;
    }
  }
  if (!has_prev || !has_cur)
    throw std::invalid_argument(fmt::format("make_pair: periods {} and {} must both exist", t - 1, t));

  PanelPair p;
  p.t = t;
  p.has_truth = panel.has_truth();
  p.z_discrete = panel.z_discrete();
  p.z_levels = panel.z_levels();
  std::size_t matched = 0;
  for (const auto& r : panel.records()) {
    if (r.period != t) continue;
    auto it = prev.find(r.firm_id);
    if (it == prev.end()) continue;
    ++matched;
    const FirmRecord& q = *it->second;
    bool ok = true;
    for (double v : {r.r, r.m, r.k, r.l, r.z, r.mx, q.m, q.k, q.l, q.z, q.r, q.mx})
      ok = ok && std::isfinite(v);
    if (!ok) {
      ++p.incomplete;
      continue;
    }
    p.firm_id.push_back(r.firm_id);
    p.r.push_back(r.r);
    p.m.push_back(r.m);
    p.k.push_back(r.k);
    p.l.push_back(r.l);
    p.z.push_back(r.z);
    p.mx.push_back(r.mx);
    p.m1.push_back(q.m);
    p.k1.push_back(q.k);
    p.l1.push_back(q.l);
    p.z1.push_back(q.z);
    p.r1.push_back(q.r);
    p.mx1.push_back(q.mx);
    if (p.has_truth) {
      p.truth.push_back(r.truth);
      p.truth1.push_back(q.truth);
    }
  }
  p.attrition = (n_cur - matched) + (prev.size() - matched);
  if (p.size() < min_rows)
    throw std::invalid_argument(fmt::format("make_pair: only {} matched firms at t={} (minimum {})",
                                            p.size(), t, min_rows));
  return p;
}

}  // namespace revid
