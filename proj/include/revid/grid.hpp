#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace revid {

// Real function on a tensor grid with multilinear interpolation. Optional
// per-axis derivative tensors replace the interpolant's own slopes.
class GridFn {
 public:
  static constexpr std::size_t kMaxDims = 8;

  GridFn() = default;
  GridFn(std::vector<std::vector<double>> axes, std::vector<double> values,
         std::vector<std::string> names = {});
  // zero-valued grid with the given axes
  explicit GridFn(std::vector<std::vector<double>> axes, std::vector<std::string> names = {});

  std::size_t dims() const { return axes_.size(); }
  std::size_t size() const { return values_.size(); }
  const std::vector<double>& axis(std::size_t d) const { return axes_[d]; }
  const std::vector<std::vector<double>>& axes() const { return axes_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

  std::size_t flat(std::span<const std::size_t> idx) const;
  std::vector<std::size_t> unflat(std::size_t k) const;
  std::vector<double> node(std::size_t k) const;

  double operator()(std::span<const double> x) const;
  double operator()(std::initializer_list<double> x) const {
    return (*this)(std::span<const double>(x.begin(), x.size()));
  }
  double deriv(std::span<const double> x, std::size_t d) const;
  double deriv(std::initializer_list<double> x, std::size_t d) const {
    return deriv(std::span<const double>(x.begin(), x.size()), d);
  }

  void set_deriv(std::size_t d, std::vector<double> values);
  bool has_deriv(std::size_t d) const { return d < derivs_.size() && !derivs_[d].empty(); }
  const std::vector<double>& deriv_values(std::size_t d) const { return derivs_.at(d); }

  bool inside(std::span<const double> x, double tol = 1e-12) const;

  // long format: one column per axis then value (and stored derivatives)
  void write_csv(const std::string& path) const;
  nlohmann::json to_json() const;
  static GridFn from_json(const nlohmann::json& j);

 private:
  double interp(const std::vector<double>& vals, std::span<const double> x) const;
  void check();

  std::vector<std::vector<double>> axes_;
  std::vector<std::string> names_;
  std::vector<double> values_;
  std::vector<std::vector<double>> derivs_;
  std::vector<std::size_t> strides_;
};

}  // namespace revid
