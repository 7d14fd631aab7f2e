#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace revid {

// Adaptive Simpson quadrature of f on [a, b] to absolute tolerance tol.
double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol = 1e-8,
                        int max_depth = 40);

using AxisDeriv = std::function<double(std::span<const double>)>;

// Integrates a gradient field along the axis-aligned path from origin to
// target. order lists the axes in the sequence they are moved; each segment
// runs with the already-moved coordinates at their target values and the rest
// at their origin values. When breaks is given, each segment is split at the
// listed per-axis breakpoints (kinks of piecewise-linear integrands).
double path_integrate(const std::vector<AxisDeriv>& df, std::span<const double> origin,
                      std::span<const double> target, const std::vector<std::size_t>& order,
                      double tol = 1e-8, const std::vector<std::vector<double>>* breaks = nullptr);

}  // namespace revid
