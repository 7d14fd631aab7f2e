#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace revid {

struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Latent columns carried by simulated panels. NaN when absent.
struct Truth {
  double omega;
  double markup;
  double p;
  double y;
  double eps;
  double eta;
};

struct FirmRecord {
  std::string firm_id;
  int period = 0;
  double r = 0, m = 0, k = 0, l = 0, z = 0, mx = 0;
  Truth truth{};
};

// Maps logical field -> CSV column header.
struct Schema {
  std::string id = "id";
  std::string t = "t";
  std::string r = "r";
  std::string m = "m";
  std::string k = "k";
  std::string l = "l";
  std::string z = "z";
  std::string mx = "mx";
  std::string truth_prefix = "true_";
};

class FirmPanel {
 public:
  FirmPanel() = default;
  explicit FirmPanel(std::vector<FirmRecord> recs, bool has_truth = false,
                     std::size_t discrete_max_levels = 10);

  const std::vector<FirmRecord>& records() const { return recs_; }
  std::size_t size() const { return recs_.size(); }
  bool has_truth() const { return has_truth_; }
  bool z_discrete() const { return z_discrete_; }
  const std::vector<double>& z_levels() const { return z_levels_; }
  std::vector<int> periods() const;
  std::map<int, std::size_t> counts_per_period() const;
  std::size_t dropped_rows() const { return dropped_; }
  void set_dropped_rows(std::size_t n) { dropped_ = n; }

 private:
  std::vector<FirmRecord> recs_;
  bool has_truth_ = false;
  bool z_discrete_ = false;
  std::vector<double> z_levels_;
  std::size_t dropped_ = 0;
};

FirmPanel load_csv(const std::string& path, const Schema& schema = {},
                   std::size_t discrete_max_levels = 10);
void save_csv(const FirmPanel& panel, const std::string& path, const Schema& schema = {});

// Firms observed in both t-1 and t, aligned row by row.
struct PanelPair {
  int t = 0;
  std::vector<std::string> firm_id;
  std::vector<double> r, m, k, l, z, mx;
  std::vector<double> m1, k1, l1, z1;  // lagged inputs and shifter
  std::vector<double> r1, mx1;
  bool has_truth = false;
  std::vector<Truth> truth, truth1;
  bool z_discrete = false;
  std::vector<double> z_levels;
  std::size_t attrition = 0;    // firms present in only one of the two periods
  std::size_t incomplete = 0;   // matched rows dropped for non-finite entries

  std::size_t size() const { return m.size(); }
  // v_t = (k, l, z, m1, k1, l1, z1) for row i
  std::vector<double> v(std::size_t i) const;
};

PanelPair make_pair(const FirmPanel& panel, int t, std::size_t min_rows = 50);

// Fields of one CSV line, trimmed; double quotes group fields containing commas.
std::vector<std::string> split_csv(const std::string& line);

// Distinct values of a column when there are at most max_levels of them.
std::vector<double> discrete_levels(const std::vector<double>& x, std::size_t max_levels);

}  // namespace revid
