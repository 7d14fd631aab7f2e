#include "revid/integrate.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace revid {

namespace {

double simpson_step(const std::function<double(double)>& f, double a, double b, double fa, double fm, double fb,
                    double whole, double tol, int depth) {
  double m = 0.5 * (a + b);
  double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  double flm = f(lm), frm = f(rm);
  double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  double diff = left + right - whole;
  if (depth <= 0 || std::abs(diff) <= 15.0 * tol) return left + right + diff / 15.0;
  return simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol, int max_depth) {
  if (a == b) return 0.0;
  if (!(tol > 0.0)) throw std::invalid_argument("adaptive_simpson: tolerance must be positive");
  double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  double r = simpson_step(f, a, b, fa, fm, fb, whole, tol, max_depth);
  if (!std::isfinite(r)) throw std::runtime_error("adaptive_simpson: integrand not finite on the path");
  return r;
}

double path_integrate(const std::vector<AxisDeriv>& df, std::span<const double> origin,
                      std::span<const double> target, const std::vector<std::size_t>& order, double tol,
                      const std::vector<std::vector<double>>* breaks) {
  const std::size_t d = origin.size();
  if (target.size() != d || df.size() != d) throw std::invalid_argument("path_integrate: dimension mismatch");
  std::vector<double> x(origin.begin(), origin.end());
  double total = 0.0;
  for (std::size_t a : order) {
    if (a >= d) throw std::out_of_range("path_integrate: axis out of range");
    if (x[a] != target[a]) {
      auto seg = [&](double s) {
        double keep = x[a];
        x[a] = s;
        double v = df[a](x);
        x[a] = keep;
        if (!std::isfinite(v)) throw std::runtime_error(fmt::format("path_integrate: evaluator failed on axis {}", a));
        return v;
      };
      double lo = std::min(x[a], target[a]), hi = std::max(x[a], target[a]);
      std::vector<double> cuts{lo};
      if (breaks && a < breaks->size())
        for (double b : (*breaks)[a])
          if (b > lo && b < hi) cuts.push_back(b);
      cuts.push_back(hi);
      double piece = 0.0;
      for (std::size_t c = 0; c + 1 < cuts.size(); ++c) piece += adaptive_simpson(seg, cuts[c], cuts[c + 1], tol);
      total += target[a] >= x[a] ? piece : -piece;
    }
    x[a] = target[a];
  }
  for (std::size_t a = 0; a < d; ++a)
    if (x[a] != target[a]) throw std::invalid_argument("path_integrate: order does not cover every moved axis");
  return total;
}

}  // namespace revid
