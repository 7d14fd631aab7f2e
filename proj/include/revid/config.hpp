#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "revid/demand.hpp"
#include "revid/dgp.hpp"
#include "revid/ident.hpp"
#include "revid/norm.hpp"
#include "revid/panel.hpp"

namespace revid {

// Message starts with the offending field, e.g. "estimation.mean_bw_scale: must be positive".
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Mode { Simulate, Identify, Normalize, Demand, MonteCarlo, Report };

std::string to_string(Mode m);
Mode parse_mode(const std::string& s);

enum class DgpKind { Ces, Hsa };

struct DgpConfig {
  DgpKind kind = DgpKind::Ces;
  TrueStructure ts{};
  HsaShare share{};        // hsa only; share.rho follows ts.rho
  HsaSimOptions hsa{};
  std::size_t n_firms = 5000;
  int n_periods = 2;
};

struct EstimationConfig {
  IdentOptions ident{};
  std::vector<int> periods;            // identified periods; empty = every period with a predecessor
  std::size_t min_pair_rows = 50;
  std::size_t discrete_max_levels = 10;
  bool overid = false;
  // scale: "crs" fixes every period by local constant returns; otherwise the
  // first period has b = 1 and later periods chain the named ratio method
  std::string scale = "crs";
  std::string scale_input = "m";
  HsaBuildOptions demand{};
  std::optional<int> demand_period;    // default: last identified period
};

struct IoConfig {
  std::string panel;        // input panel CSV (all modes but simulate)
  std::string out = "results";
  std::string price_index;  // optional CSV (period, index) for location links
  std::string queries;      // demand mode: CSV (firm_id, Y, z[, scenario])
  std::string hsa;          // demand mode: persisted system to reuse instead of rebuilding
  std::string compare;      // report mode: second results directory
  std::uint64_t seed = 1;
  std::size_t replications = 1;
  int threads = 0;          // 0 = library default
  Schema schema{};
};

struct RunConfig {
  Mode mode = Mode::Simulate;
  DgpConfig dgp{};
  EstimationConfig est{};
  IoConfig io{};
  nlohmann::json source;    // parsed file, echoed into the manifest

  // Checks ranges and, for modes that read inputs, that referenced paths exist.
  void validate() const;
  // Every resolved setting.
  nlohmann::json resolved() const;
};

// TOML, or JSON when the file ends in .json. Unknown keys are errors.
nlohmann::json read_config_file(const std::string& path);
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

nlohmann::json to_json(const TrueStructure& ts);
nlohmann::json to_json(const IdentOptions& o);
nlohmann::json to_json(const HsaBuildOptions& o);

}  // namespace revid
