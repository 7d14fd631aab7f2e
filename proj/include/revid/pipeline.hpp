#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "revid/config.hpp"

namespace revid {

// Downstream failure tagged with the module and operation that raised it.
struct StageError : std::runtime_error {
  StageError(const std::string& module, const std::string& op, const std::string& what)
      : std::runtime_error(module + "." + op + ": " + what), module(module), op(op) {}
  std::string module, op;
};

// Missing files of a results directory, one name per entry.
struct IncompleteResults : std::runtime_error {
  IncompleteResults(const std::string& dir, std::vector<std::string> missing);
  std::vector<std::string> missing;
};

std::string library_version();

FirmPanel simulate_panel(const DgpConfig& d, std::uint64_t seed, std::vector<double>* aggregator = nullptr);

struct Identified {
  std::vector<PanelPair> pairs;
  std::vector<PeriodResult> results;
  std::vector<OveridReport> overid;  // empty unless requested
};

Identified identify_panel(const FirmPanel& panel, const EstimationConfig& est);

struct Normalized {
  std::vector<double> b;         // scale applied to each identified period
  std::vector<ScaleLink> links;  // CRS per period, or ratios between consecutive periods
  std::vector<LocationLink> location;
};

// Applies the configured scale normalization in place; location links need P*.
Normalized normalize(Identified& id, const EstimationConfig& est, const std::map<int, double>* P_star = nullptr);

// Rows (object, truth, estimate, rel_error) over interior firms; needs truth columns.
nlohmann::json recovery_table(const Identified& id, const DgpConfig& d);

// Markup error per shifter cell for one replication: mean of (estimate - truth) / truth.
struct CellError {
  double z = 0.0;
  double markup_rel_error = 0.0;
  std::size_t firms = 0;
};
std::vector<CellError> markup_errors(const PanelPair& pr, const PeriodResult& r);

void write_firms_csv(const PanelPair& pr, const PeriodResult& r, const std::string& path);

// Writes results to cfg.io.out and returns the summary JSON.
nlohmann::json run_simulate(const RunConfig& cfg);
nlohmann::json run_identify(const RunConfig& cfg);
nlohmann::json run_normalize(const RunConfig& cfg);
nlohmann::json run_demand(const RunConfig& cfg);
nlohmann::json run_montecarlo(const RunConfig& cfg);

struct Report {
  std::string text;
  std::vector<std::string> files;  // written CSVs
};
// Tables from a results directory; with `compare` set, a side-by-side table of two runs.
Report run_report(const std::string& dir, const std::string& compare = "");

nlohmann::json run(const RunConfig& cfg);

}  // namespace revid
