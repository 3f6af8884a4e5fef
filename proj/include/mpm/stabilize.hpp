#pragma once

#include "mpm/grid.hpp"
#include "mpm/points.hpp"
#include "mpm/types.hpp"

namespace mpm {

/// Interior grid face selected for ghost stabilisation. The positive element
/// is the lower-index element; the face normal points along +axis.
struct GhostFace {
  int elem_pos = -1;
  int elem_neg = -1;
  int axis = 0;
  double h_f = 0.0;       // max side length of the face
  double h_normal = 0.0;  // element size normal to the face
  double area = 0.0;
  double gamma_m = 0.0;   // rho_bar / 4
  double gamma_k = 0.0;   // E_bar / 30
};

namespace detail {

inline double box_overlap(const Vec3& alo, const Vec3& ahi, const Vec3& blo, const Vec3& bhi) {
  double v = 1.0;
  for (int d = 0; d < 3; ++d) {
    const double len = std::min(ahi[d], bhi[d]) - std::max(alo[d], blo[d]);
    if (len <= 0.0) return 0.0;
    v *= len;
  }
  return v;
}

struct ElementCoverage {
  std::vector<double> fraction;   // covered volume fraction per element
  std::vector<double> vol_sum;    // total overlapping point volume
  std::vector<double> rho_sum;    // volume-weighted density
  std::vector<double> e_sum;      // volume-weighted Young's modulus
};

inline ElementCoverage element_coverage(const BackgroundGrid& grid,
                                        const std::vector<MaterialPoint>& points,
                                        const std::vector<double>& rho_of_point) {
  ElementCoverage cov;
  const int ne = grid.total_elements();
  cov.fraction.assign(ne, 0.0);
  cov.vol_sum.assign(ne, 0.0);
  cov.rho_sum.assign(ne, 0.0);
  cov.e_sum.assign(ne, 0.0);
  for (std::size_t pi = 0; pi < points.size(); ++pi) {
    const auto& p = points[pi];
    const Vec3 lo = p.x - p.half, hi = p.x + p.half;
    // Range of cells the domain touches.
    std::array<int, 3> c0, c1;
    for (int d = 0; d < 3; ++d) {
      c0[d] = grid.locate_cell(d, lo[d]);
      c1[d] = grid.locate_cell(d, hi[d]);
    }
    for (int k = c0[2]; k <= c1[2]; ++k)
      for (int j = c0[1]; j <= c1[1]; ++j)
        for (int i = c0[0]; i <= c1[0]; ++i) {
          const int e = grid.elem_id(i, j, k);
          const auto [elo, ehi] = grid.element_box(e);
          const double v = box_overlap(lo, hi, elo, ehi);
          if (v <= 0.0) continue;
          cov.fraction[e] += v;
          cov.vol_sum[e] += v;
          cov.rho_sum[e] += v * rho_of_point[pi];
          cov.e_sum[e] += v * p.E_p;
        }
  }
  for (int e = 0; e < ne; ++e) {
    const auto [lo, hi] = grid.element_box(e);
    cov.fraction[e] /= (hi - lo).prod();
  }
  return cov;
}

}  // namespace detail

/// Faces adjacent to at least one partially covered element, with both
/// elements carrying material. These are the candidates for a small cut.
inline std::vector<GhostFace> select_ghost_faces(const BackgroundGrid& grid,
                                                 const std::vector<MaterialPoint>& points,
                                                 const std::vector<double>& rho_of_point,
                                                 double scale_m = 1.0, double scale_k = 1.0) {
  const detail::ElementCoverage cov =
      detail::element_coverage(grid, points, rho_of_point);
  // Any strictly positive coverage makes an element active: even the
  // faintest sliver activates grid nodes that then need stabilising.
  const double tol = 1e-9;
  std::vector<GhostFace> faces;
  for (int e = 0; e < grid.total_elements(); ++e) {
    if (!(cov.fraction[e] > 0.0)) continue;
    for (int axis = 0; axis < 3; ++axis) {
      const int nb = grid.neighbour(e, axis, +1);
      if (nb < 0) continue;
      if (!(cov.fraction[nb] > 0.0)) continue;
      const bool partial =
          cov.fraction[e] < 1.0 - tol || cov.fraction[nb] < 1.0 - tol;
      if (!partial) continue;
      GhostFace f;
      f.elem_pos = e;
      f.elem_neg = nb;
      f.axis = axis;
      const Vec3 size = grid.element_size(e);
      const Vec3 size_nb = grid.element_size(nb);
      const int t1 = (axis + 1) % 3, t2 = (axis + 2) % 3;
      f.h_f = std::max(size[t1], size[t2]);
      f.h_normal = std::max(size[axis], size_nb[axis]);
      f.area = size[t1] * size[t2];
      const double vol = cov.vol_sum[e] + cov.vol_sum[nb];
      const double rho_bar = (cov.rho_sum[e] + cov.rho_sum[nb]) / vol;
      const double e_bar = (cov.e_sum[e] + cov.e_sum[nb]) / vol;
      f.gamma_m = scale_m * rho_bar / 4.0;
      f.gamma_k = scale_k * e_bar / 30.0;
      faces.push_back(f);
    }
  }
  return faces;
}

/// Scalar face-jump matrix (h_f^3/3) int_F [[d_n u]] [[d_n u]] dF, emitted as
/// triplets over global node ids. 2x2 Gauss, exact for the bilinear gradients
/// of linear hexahedra.
inline void ghost_matrix(const BackgroundGrid& grid, const GhostFace& f,
                         std::vector<Triplet>* out, double scale = 1.0) {
  const auto nodes_pos = grid.element_nodes(f.elem_pos);
  const auto nodes_neg = grid.element_nodes(f.elem_neg);
  const int t1 = (f.axis + 1) % 3, t2 = (f.axis + 2) % 3;
  const double gp = 1.0 / std::sqrt(3.0);
  const double w = f.area / 4.0;
  const double factor = scale * f.h_f * f.h_f * f.h_f / 3.0;

  // 16 slots: 8 of the positive element followed by 8 of the negative one.
  std::array<int, 16> ids;
  for (int n = 0; n < 8; ++n) {
    ids[n] = nodes_pos[n];
    ids[8 + n] = nodes_neg[n];
  }
  Eigen::Matrix<double, 16, 16> J = Eigen::Matrix<double, 16, 16>::Zero();
  for (int q1 = 0; q1 < 2; ++q1)
    for (int q2 = 0; q2 < 2; ++q2) {
      Vec3 loc_pos = Vec3::Zero(), loc_neg = Vec3::Zero();
      loc_pos[f.axis] = 1.0;   // face sits at +1 of the positive element
      loc_neg[f.axis] = -1.0;  // and at -1 of the negative one
      loc_pos[t1] = loc_neg[t1] = (q1 == 0 ? -gp : gp);
      loc_pos[t2] = loc_neg[t2] = (q2 == 0 ? -gp : gp);
      const ShapeHex sp = grid.shape(f.elem_pos, loc_pos);
      const ShapeHex sn = grid.shape(f.elem_neg, loc_neg);
      Eigen::Matrix<double, 16, 1> g;
      for (int n = 0; n < 8; ++n) {
        g[n] = sp.dN[n][f.axis];
        g[8 + n] = -sn.dN[n][f.axis];
      }
      J += (factor * w) * (g * g.transpose());
    }
  for (int a = 0; a < 16; ++a)
    for (int b = 0; b < 16; ++b)
      if (J(a, b) != 0.0) out->emplace_back(ids[a], ids[b], J(a, b));
}

/// Mass and stiffness stabilisation triplets over global node ids:
/// gamma_M J per face for the mass, gamma_K / h^2 J for the stiffness.
struct GhostStabilisation {
  std::vector<GhostFace> faces;
  std::vector<Triplet> mass;       // scalar, global node ids
  std::vector<Triplet> stiffness;  // scalar, global node ids
};

inline GhostStabilisation build_ghost_stabilisation(const BackgroundGrid& grid,
                                                    const std::vector<MaterialPoint>& points,
                                                    const std::vector<double>& rho_of_point,
                                                    double scale_m = 1.0, double scale_k = 1.0) {
  GhostStabilisation out;
  out.faces = select_ghost_faces(grid, points, rho_of_point, scale_m, scale_k);
  for (const auto& f : out.faces) {
    if (f.gamma_m > 0.0) ghost_matrix(grid, f, &out.mass, f.gamma_m);
    if (f.gamma_k > 0.0)
      ghost_matrix(grid, f, &out.stiffness, f.gamma_k / (f.h_normal * f.h_normal));
  }
  return out;
}

}  // namespace mpm
