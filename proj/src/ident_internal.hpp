#pragma once

// Helpers shared by the identification sources.

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "revid/ident.hpp"

namespace revid::detail {

// Ratio fields G_q / G_{q1} of one anchor on the current grid (m, k, l, z).
struct AnchorFields {
  std::array<std::vector<double>, 4> T;  // q = m, k, l, z
  std::vector<unsigned char> usable;
  std::size_t unusable = 0;
};

AnchorFields anchor_fields(const CondCdf& cdf, const IdentGrid& g, const Anchor& a, const IdentOptions& opt);

// Replaces values at unusable nodes by those of the nearest usable node
// (index-space breadth-first search). Axes with connected[d] == false are not
// crossed. Throws when a connected component has no usable node.
void fill_unusable(const std::vector<std::size_t>& shape, const std::vector<bool>& connected,
                   const std::vector<unsigned char>& usable, std::vector<std::vector<double>*> fields);

// Integral of field along axis d from index i0 to i1 (others fixed at idx),
// exact for the multilinear interpolant.
double line_integral(const GridFn& shape, const std::vector<double>& field, std::vector<std::size_t> idx,
                     std::size_t d, std::size_t i0, std::size_t i1);

// Node values of the function whose axis derivatives are fields, integrated
// along grid lines from the origin node in the given axis order. Each index
// combination along slice_axes is a separate slice with origin value zero.
std::vector<double> integrate_on_grid(const GridFn& shape, const std::vector<const std::vector<double>*>& fields,
                                      const std::vector<std::size_t>& origin, const std::vector<std::size_t>& order,
                                      const std::vector<std::size_t>& slice_axes = {});

std::size_t axis_index(const std::vector<double>& ax, double x);

// Interpolated value, extended linearly with the stored derivative tensors
// beyond the grid.
double eval_extrap(const GridFn& f, std::span<const double> x);

// Step-2 derivative fields dMinv/dq on the current grid, averaged over anchors.
struct DerivFields {
  std::array<std::vector<double>, 4> D;
  std::vector<Anchor> anchors;
  std::vector<double> S;
  std::size_t unusable = 0;
};

DerivFields derivative_fields(const CondCdf& cdf, const std::vector<Anchor>& anchors, const IdentGrid& g,
                              const IdentOptions& opt);

// Current-grid function with the derivative fields attached.
GridFn with_derivs(const IdentGrid& g, std::vector<double> values, const DerivFields& df);

// dhbar/dq1 on a lag grid (q1 = m1, k1, l1, z1), from dG/dq1 / dG/dm times dMinv/dm at
// the current normalization point, density-weighted over m.
struct LagFields {
  std::vector<std::vector<double>> axes;
  std::array<std::vector<double>, 4> H;
  std::vector<std::size_t> origin;  // lag_star
};

LagFields lag_fields(const CondCdf& cdf, const IdentGrid& g, const GridFn& Minv, const IdentOptions& opt);

ControlResult start_control(DerivFields& df);
void finish_control(const PanelPair& pr, const IdentGrid& g, const IdentOptions& opt, ControlResult& out);

// grid indices of (m*_0, k*, l*, z*)
std::vector<std::size_t> norm_index(const IdentGrid& g);

// (z, z1) cell per firm, z-level major; throws on cells below min_rows
std::vector<std::size_t> cell_index(const PanelPair& pr, const IdentGrid& g, std::size_t min_rows);

}  // namespace revid::detail
