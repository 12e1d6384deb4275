#pragma once

// Rectilinear grids and cubic B-spline scalar fields.
//
// Control points sit on the grid nodes. A field is evaluated from the 4x4
// control neighbourhood of the cell containing x; evaluation is restricted to
// an interior band two cells away from the grid edge.

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ustray/common.hpp"

namespace ustray {

struct Grid2D {
  Vec2 origin;
  double spacing = 0.0;
  std::size_t n1 = 0;
  std::size_t n2 = 0;

  Grid2D() = default;
  Grid2D(Vec2 origin_, double spacing_, std::size_t n1_, std::size_t n2_)
      : origin(origin_), spacing(spacing_), n1(n1_), n2(n2_) {
    if (!(spacing > 0.0) || !std::isfinite(spacing))
      throw ConfigError("Grid2D: spacing must be positive and finite");
    if (n1 < 4 || n2 < 4) throw ConfigError("Grid2D: each axis needs at least 4 nodes");
    if (!std::isfinite(origin.x) || !std::isfinite(origin.y))
      throw ConfigError("Grid2D: origin must be finite");
  }

  /// Square grid of n x n nodes centred on `center`.
  static Grid2D centered(Vec2 center, double spacing, std::size_t n) {
    const double half = 0.5 * spacing * static_cast<double>(n - 1);
    return Grid2D({center.x - half, center.y - half}, spacing, n, n);
  }

  std::size_t size() const { return n1 * n2; }
  std::size_t index(std::size_t i, std::size_t j) const { return i * n2 + j; }
  Vec2 node(std::size_t i, std::size_t j) const {
    return {origin.x + spacing * static_cast<double>(i), origin.y + spacing * static_cast<double>(j)};
  }
  Vec2 node(std::size_t flat) const { return node(flat / n2, flat % n2); }

  // Interior band: [x_2, x_{N-3}] along each axis.
  double interior_min1() const { return origin.x + 2.0 * spacing; }
  double interior_max1() const { return origin.x + spacing * static_cast<double>(n1 - 3); }
  double interior_min2() const { return origin.y + 2.0 * spacing; }
  double interior_max2() const { return origin.y + spacing * static_cast<double>(n2 - 3); }

  bool in_interior(Vec2 p) const {
    return p.x >= interior_min1() && p.x <= interior_max1() && p.y >= interior_min2() &&
           p.y <= interior_max2();
  }

  /// Largest radius r such that the disc of radius r about c lies in the interior.
  double interior_radius(Vec2 c) const {
    return std::min({c.x - interior_min1(), interior_max1() - c.x, c.y - interior_min2(),
                     interior_max2() - c.y});
  }

  bool operator==(const Grid2D&) const = default;
};

/// Cubic B-spline basis Y_0..Y_3 at local coordinate u in [0, 1].
constexpr std::array<double, 4> bspline_weights(double u) {
  const double u2 = u * u;
  const double u3 = u2 * u;
  return {(-u3 + 3.0 * u2 - 3.0 * u + 1.0) / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
          (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0};
}

/// dY_q/du.
constexpr std::array<double, 4> bspline_weight_derivatives(double u) {
  const double u2 = u * u;
  return {(-3.0 * u2 + 6.0 * u - 3.0) / 6.0, (9.0 * u2 - 12.0 * u) / 6.0,
          (-9.0 * u2 + 6.0 * u + 3.0) / 6.0, 3.0 * u2 / 6.0};
}

struct ValueGradient {
  double value = 0.0;
  Vec2 gradient;
};

/// Location of a point in the spline: base control index and tensor weights.
struct SplineStencil {
  std::size_t i0 = 0;  // first control index along axis 1 (cell index - 1)
  std::size_t j0 = 0;
  std::array<double, 4> wu{};
  std::array<double, 4> wv{};
};

class ScalarField {
 public:
  ScalarField() = default;
  ScalarField(Grid2D grid, std::vector<double> coefficients)
      : grid_(grid), coeffs_(std::move(coefficients)) {
    if (coeffs_.size() != grid_.size())
      throw ConfigError("ScalarField: coefficient count does not match grid shape");
    for (double c : coeffs_)
      if (!std::isfinite(c)) throw ConfigError("ScalarField: coefficients must be finite");
  }

  static ScalarField constant(Grid2D grid, double value) {
    return ScalarField(grid, std::vector<double>(grid.size(), value));
  }

  const Grid2D& grid() const { return grid_; }
  std::span<const double> coefficients() const { return coeffs_; }
  double coefficient(std::size_t i, std::size_t j) const { return coeffs_[grid_.index(i, j)]; }

  /// Computes the stencil for x; throws DomainError outside the interior band.
  SplineStencil stencil(Vec2 x) const {
    check_interior(x);
    const double t1 = (x.x - grid_.origin.x) / grid_.spacing;
    const double t2 = (x.y - grid_.origin.y) / grid_.spacing;
    auto cell1 = static_cast<std::size_t>(std::floor(t1));
    auto cell2 = static_cast<std::size_t>(std::floor(t2));
    // x_{N-3} sits on the last admissible cell origin.
    cell1 = std::min(cell1, grid_.n1 - 3);
    cell2 = std::min(cell2, grid_.n2 - 3);
    SplineStencil s;
    s.i0 = cell1 - 1;
    s.j0 = cell2 - 1;
    s.wu = bspline_weights(t1 - static_cast<double>(cell1));
    s.wv = bspline_weights(t2 - static_cast<double>(cell2));
    return s;
  }

  double eval(Vec2 x) const {
    const SplineStencil s = stencil(x);
    double acc = 0.0;
    for (std::size_t a = 0; a < 4; ++a) {
      const double* row = &coeffs_[grid_.index(s.i0 + a, s.j0)];
      const double inner = s.wv[0] * row[0] + s.wv[1] * row[1] + s.wv[2] * row[2] + s.wv[3] * row[3];
      acc += s.wu[a] * inner;
    }
    return acc;
  }

  Vec2 gradient(Vec2 x) const { return eval_with_gradient(x).gradient; }

  ValueGradient eval_with_gradient(Vec2 x) const {
    check_interior(x);
    const double t1 = (x.x - grid_.origin.x) / grid_.spacing;
    const double t2 = (x.y - grid_.origin.y) / grid_.spacing;
    const auto cell1 = std::min(static_cast<std::size_t>(std::floor(t1)), grid_.n1 - 3);
    const auto cell2 = std::min(static_cast<std::size_t>(std::floor(t2)), grid_.n2 - 3);
    const double u = t1 - static_cast<double>(cell1);
    const double v = t2 - static_cast<double>(cell2);
    const auto wu = bspline_weights(u);
    const auto wv = bspline_weights(v);
    const auto du = bspline_weight_derivatives(u);
    const auto dv = bspline_weight_derivatives(v);
    double val = 0.0, g1 = 0.0, g2 = 0.0;
    for (std::size_t a = 0; a < 4; ++a) {
      const double* row = &coeffs_[grid_.index(cell1 - 1 + a, cell2 - 1)];
      const double in_v = wv[0] * row[0] + wv[1] * row[1] + wv[2] * row[2] + wv[3] * row[3];
      const double in_dv = dv[0] * row[0] + dv[1] * row[1] + dv[2] * row[2] + dv[3] * row[3];
      val += wu[a] * in_v;
      g1 += du[a] * in_v;
      g2 += wu[a] * in_dv;
    }
    return {val, {g1 / grid_.spacing, g2 / grid_.spacing}};
  }

 private:
  void check_interior(Vec2 x) const {
    if (!std::isfinite(x.x) || !std::isfinite(x.y)) throw DomainError("field evaluation at non-finite position");
    if (x.x < grid_.interior_min1() || x.x > grid_.interior_max1()) {
      std::ostringstream os;
      os << "field evaluation outside interior: x1=" << x.x << " not in [" << grid_.interior_min1() << ", "
         << grid_.interior_max1() << "]";
      throw DomainError(os.str());
    }
    if (x.y < grid_.interior_min2() || x.y > grid_.interior_max2()) {
      std::ostringstream os;
      os << "field evaluation outside interior: x2=" << x.y << " not in [" << grid_.interior_min2() << ", "
         << grid_.interior_max2() << "]";
      throw DomainError(os.str());
    }
  }

  Grid2D grid_;
  std::vector<double> coeffs_;
};

/// Separable moving average of the control points with edge replication.
inline ScalarField smooth_field(const ScalarField& field, int window) {
  if (window < 1 || window % 2 == 0) throw ConfigError("smooth_field: window must be odd and >= 1");
  if (window == 1) return field;
  const Grid2D& g = field.grid();
  const auto half = static_cast<long>(window / 2);
  const auto n1 = static_cast<long>(g.n1);
  const auto n2 = static_cast<long>(g.n2);
  auto src = field.coefficients();
  std::vector<double> tmp(g.size()), out(g.size());
  const double inv = 1.0 / static_cast<double>(window);
  auto clampi = [](long v, long hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  for (long i = 0; i < n1; ++i)
    for (long j = 0; j < n2; ++j) {
      double acc = 0.0;
      for (long d = -half; d <= half; ++d) acc += src[static_cast<std::size_t>(clampi(i + d, n1 - 1) * n2 + j)];
      tmp[static_cast<std::size_t>(i * n2 + j)] = acc * inv;
    }
  for (long i = 0; i < n1; ++i)
    for (long j = 0; j < n2; ++j) {
      double acc = 0.0;
      for (long d = -half; d <= half; ++d) acc += tmp[static_cast<std::size_t>(i * n2 + clampi(j + d, n2 - 1))];
      out[static_cast<std::size_t>(i * n2 + j)] = acc * inv;
    }
  return ScalarField(g, std::move(out));
}

/// Elementwise map of the control points.
template <class F>
ScalarField map_coefficients(const ScalarField& field, F&& f) {
  std::vector<double> out(field.coefficients().begin(), field.coefficients().end());
  for (double& v : out) v = f(v);
  return ScalarField(field.grid(), std::move(out));
}

}  // namespace ustray
