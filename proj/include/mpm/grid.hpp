#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "mpm/types.hpp"

namespace mpm {

/// Node coordinates along one axis of the background grid.
struct GridAxis {
  std::vector<double> coords;

  int node_count() const { return static_cast<int>(coords.size()); }
  int cell_count() const { return node_count() - 1; }
  double front() const { return coords.front(); }
  double back() const { return coords.back(); }
  double spacing(int cell) const { return coords[cell + 1] - coords[cell]; }

  void validate() const {
    if (coords.size() < 2) throw ConfigError("grid axis needs at least 2 nodes");
    for (std::size_t i = 1; i < coords.size(); ++i) {
      if (!(coords[i] > coords[i - 1]))
        throw ConfigError("grid axis coordinates must be strictly increasing");
    }
  }
};

/// Uniform spacing dx0 over the uniform extent, then each spacing raised to
/// `exponent`. If the series does not hit the end exactly, the nearest
/// generated node is snapped onto it.
inline GridAxis build_graded_axis(double dx0, double extent_uniform,
                                  double extent_total, double exponent) {
  if (!std::isfinite(dx0) || !std::isfinite(extent_uniform) ||
      !std::isfinite(extent_total) || !std::isfinite(exponent))
    throw ConfigError("graded axis: non-finite input");
  if (dx0 <= 0.0) throw ConfigError("graded axis: dx0 must be positive");
  if (exponent < 1.0) throw ConfigError("graded axis: exponent must be >= 1");
  if (!(extent_uniform > 0.0) || extent_total < extent_uniform)
    throw ConfigError("graded axis: need extent_total >= extent_uniform > 0");

  GridAxis axis;
  const int n_uniform = std::max(1, static_cast<int>(std::lround(extent_uniform / dx0)));
  const double du = extent_uniform / n_uniform;
  for (int i = 0; i <= n_uniform; ++i) axis.coords.push_back(i * du);

  if (extent_total > extent_uniform) {
    double dx = dx0;
    double x = extent_uniform;
    const double floor_dx = 1e-9 * dx0;
    while (x < extent_total) {
      dx = std::pow(dx, exponent);
      if (dx < floor_dx || axis.coords.size() > 100000)
        throw ConfigError("graded axis: power-law spacing collapsed before reaching extent");
      x += dx;
      axis.coords.push_back(x);
    }
    // Snap whichever generated node is nearest the end onto it.
    double& last = axis.coords.back();
    double& prev = axis.coords[axis.coords.size() - 2];
    if (last - extent_total <= extent_total - prev) {
      last = extent_total;
    } else {
      prev = extent_total;
      axis.coords.pop_back();
    }
  }
  axis.validate();
  return axis;
}

struct LocateResult {
  int element = -1;
  Vec3 local = Vec3::Zero();  // trilinear coordinates in [-1,1]^3
};

/// Values and global-coordinate gradients of the 8 trilinear basis functions.
/// Local node ordering is tensorial: n = di + 2*dj + 4*dk.
struct ShapeHex {
  std::array<double, 8> N;
  std::array<Vec3, 8> dN;
};

/// Tensor-product Cartesian grid of linear hexahedra, possibly graded per
/// axis. Node and element numbering is lexicographic, x fastest.
class BackgroundGrid {
 public:
  explicit BackgroundGrid(std::array<GridAxis, 3> axes) : axes_(std::move(axes)) {
    for (const auto& a : axes_) a.validate();
  }

  const GridAxis& axis(int d) const { return axes_[d]; }
  int node_count(int d) const { return axes_[d].node_count(); }
  int cell_count(int d) const { return axes_[d].cell_count(); }
  int total_nodes() const { return node_count(0) * node_count(1) * node_count(2); }
  int total_elements() const { return cell_count(0) * cell_count(1) * cell_count(2); }

  int node_id(int i, int j, int k) const {
    return i + node_count(0) * (j + node_count(1) * k);
  }
  int elem_id(int i, int j, int k) const {
    return i + cell_count(0) * (j + cell_count(1) * k);
  }
  std::array<int, 3> elem_index3(int e) const {
    const int nx = cell_count(0), ny = cell_count(1);
    return {e % nx, (e / nx) % ny, e / (nx * ny)};
  }
  Vec3 node_position(int id) const {
    const int nx = node_count(0), ny = node_count(1);
    const int i = id % nx, j = (id / nx) % ny, k = id / (nx * ny);
    return {axes_[0].coords[i], axes_[1].coords[j], axes_[2].coords[k]};
  }

  std::array<int, 8> element_nodes(int e) const {
    const auto idx = elem_index3(e);
    std::array<int, 8> out;
    for (int n = 0; n < 8; ++n)
      out[n] = node_id(idx[0] + (n & 1), idx[1] + ((n >> 1) & 1), idx[2] + ((n >> 2) & 1));
    return out;
  }

  /// Lower and upper corner of an element box.
  std::pair<Vec3, Vec3> element_box(int e) const {
    const auto idx = elem_index3(e);
    Vec3 lo, hi;
    for (int d = 0; d < 3; ++d) {
      lo[d] = axes_[d].coords[idx[d]];
      hi[d] = axes_[d].coords[idx[d] + 1];
    }
    return {lo, hi};
  }

  Vec3 element_size(int e) const {
    const auto [lo, hi] = element_box(e);
    return hi - lo;
  }

  Vec3 min_corner() const {
    return {axes_[0].front(), axes_[1].front(), axes_[2].front()};
  }
  Vec3 max_corner() const {
    return {axes_[0].back(), axes_[1].back(), axes_[2].back()};
  }

  /// Cell index along one axis; coordinates on shared faces go to the lower
  /// cell. Throws OutOfDomainError outside the axis range.
  int locate_cell(int d, double x) const {
    const auto& c = axes_[d].coords;
    const double eps = 1e-12 * (c.back() - c.front());
    if (x < c.front() - eps || x > c.back() + eps)
      throw OutOfDomainError("position outside background grid");
    x = std::clamp(x, c.front(), c.back());
    const auto it = std::lower_bound(c.begin(), c.end(), x);
    const int i = static_cast<int>(it - c.begin());
    return (i == 0) ? 0 : i - 1;
  }

  LocateResult locate(const Vec3& x) const {
    std::array<int, 3> cell;
    LocateResult r;
    for (int d = 0; d < 3; ++d) {
      cell[d] = locate_cell(d, x[d]);
      const double a = axes_[d].coords[cell[d]];
      const double b = axes_[d].coords[cell[d] + 1];
      r.local[d] = 2.0 * (x[d] - a) / (b - a) - 1.0;
    }
    r.element = elem_id(cell[0], cell[1], cell[2]);
    return r;
  }

  /// Trilinear values and gradients with respect to the global coordinates.
  ShapeHex shape(int element, const Vec3& local) const {
    const Vec3 h = element_size(element);
    ShapeHex s;
    for (int n = 0; n < 8; ++n) {
      double v[3], g[3];
      for (int d = 0; d < 3; ++d) {
        const double sign = (n >> d & 1) ? 1.0 : -1.0;
        v[d] = 0.5 * (1.0 + sign * local[d]);
        g[d] = sign / h[d];  // d/dx of 0.5*(1 +/- xi), xi = 2(x-a)/h - 1
      }
      s.N[n] = v[0] * v[1] * v[2];
      s.dN[n] = Vec3(g[0] * v[1] * v[2], v[0] * g[1] * v[2], v[0] * v[1] * g[2]);
    }
    return s;
  }

  ShapeHex shape_at(const Vec3& x, int* element_out = nullptr) const {
    const LocateResult r = locate(x);
    if (element_out) *element_out = r.element;
    return shape(r.element, r.local);
  }

  /// Neighbour element across the face in +/- direction along axis d, or -1.
  int neighbour(int e, int d, int dir) const {
    auto idx = elem_index3(e);
    idx[d] += dir;
    if (idx[d] < 0 || idx[d] >= cell_count(d)) return -1;
    return elem_id(idx[0], idx[1], idx[2]);
  }

 private:
  std::array<GridAxis, 3> axes_;
};

}  // namespace mpm
