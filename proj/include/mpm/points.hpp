#pragma once

#include <numeric>

#include "mpm/contact_state.hpp"
#include "mpm/grid.hpp"
#include "mpm/types.hpp"

namespace mpm {

/// Material point carrying a cuboid generalized-interpolation domain.
struct MaterialPoint {
  Vec3 x = Vec3::Zero();      // domain centre
  Vec3 v = Vec3::Zero();
  Vec3 a = Vec3::Zero();
  Vec3 half = Vec3::Zero();   // current half side lengths
  Vec3 half0 = Vec3::Zero();  // initial half side lengths
  double mass = 0.0;
  double V = 0.0;             // current volume
  double V0 = 0.0;            // initial volume
  Mat3 F = Mat3::Identity();
  Mat3 Fe = Mat3::Identity();
  Mat3 sigma = Mat3::Zero();  // Cauchy stress
  int material = 0;
  double E_p = 0.0;           // per-point Young's modulus (penalty scaling)
  std::array<ContactState, 8> corners{};

  /// Corner c in tensor order, bit d of c selecting the +/- face on axis d.
  Vec3 corner(int c) const {
    return {x[0] + ((c >> 0 & 1) ? half[0] : -half[0]),
            x[1] + ((c >> 1 & 1) ? half[1] : -half[1]),
            x[2] + ((c >> 2 & 1) ? half[2] : -half[2])};
  }
  double domain_volume() const { return 8.0 * half.prod(); }
};

/// Basis values of one point over its supporting grid nodes.
struct BasisStencil {
  std::vector<int> nodes;  // global node ids
  std::vector<double> S;
  std::vector<Vec3> dS;
};

namespace detail {

struct AxisBasis {
  std::vector<int> nodes;
  std::vector<double> val;
  std::vector<double> der;
};

inline double hat_value(const std::vector<double>& c, int v, double x) {
  const int n = static_cast<int>(c.size());
  if (v > 0 && x >= c[v - 1] && x <= c[v]) {
    return (x - c[v - 1]) / (c[v] - c[v - 1]);
  }
  if (v < n - 1 && x >= c[v] && x <= c[v + 1]) {
    return (c[v + 1] - x) / (c[v + 1] - c[v]);
  }
  return x == c[v] ? 1.0 : 0.0;
}

// Exact integral of the hat centred at node v over [a, b].
inline double hat_integral(const std::vector<double>& c, int v, double a, double b) {
  const int n = static_cast<int>(c.size());
  double sum = 0.0;
  const auto piece = [&](double p, double q) {
    const double lo = std::max(a, p), hi = std::min(b, q);
    if (hi <= lo) return;
    sum += 0.5 * (hi - lo) * (hat_value(c, v, lo) + hat_value(c, v, hi));
  };
  if (v > 0) piece(c[v - 1], c[v]);
  if (v < n - 1) piece(c[v], c[v + 1]);
  return sum;
}

// One-dimensional generalized-interpolation values: the average of each hat
// over [x-l, x+l] and its derivative with respect to the centre x.
inline AxisBasis axis_basis(const GridAxis& axis, double x, double l) {
  const auto& c = axis.coords;
  const double a = x - l, b = x + l;
  const double eps = 1e-12 * (c.back() - c.front());
  if (a < c.front() - eps || b > c.back() + eps)
    throw OutOfDomainError("point domain protrudes outside the background grid");
  AxisBasis out;
  const int n = static_cast<int>(c.size());
  int lo = 0;
  while (lo < n - 1 && c[lo + 1] <= a) ++lo;
  for (int v = lo; v < n; ++v) {
    if (v > 0 && c[v - 1] >= b) break;
    const double integral = hat_integral(c, v, std::max(a, c.front()), std::min(b, c.back()));
    if (integral <= 0.0) continue;
    out.nodes.push_back(v);
    out.val.push_back(integral / (2.0 * l));
    out.der.push_back((hat_value(c, v, std::min(b, c.back())) -
                       hat_value(c, v, std::max(a, c.front()))) /
                      (2.0 * l));
  }
  return out;
}

}  // namespace detail

/// Basis functions of a cuboid domain: per-axis exact piecewise integrals of
/// the grid hats over the domain, tensor-multiplied.
inline BasisStencil gimp_basis(const Vec3& centre, const Vec3& half, const BackgroundGrid& grid) {
  if (!(half.minCoeff() > 0.0)) throw ConfigError("gimp_basis: half lengths must be positive");
  std::array<detail::AxisBasis, 3> ab;
  for (int d = 0; d < 3; ++d) ab[d] = detail::axis_basis(grid.axis(d), centre[d], half[d]);
  BasisStencil st;
  const std::size_t count = ab[0].nodes.size() * ab[1].nodes.size() * ab[2].nodes.size();
  st.nodes.reserve(count);
  st.S.reserve(count);
  st.dS.reserve(count);
  for (std::size_t k = 0; k < ab[2].nodes.size(); ++k)
    for (std::size_t j = 0; j < ab[1].nodes.size(); ++j)
      for (std::size_t i = 0; i < ab[0].nodes.size(); ++i) {
        const double s = ab[0].val[i] * ab[1].val[j] * ab[2].val[k];
        if (s <= 0.0) continue;
        st.nodes.push_back(grid.node_id(ab[0].nodes[i], ab[1].nodes[j], ab[2].nodes[k]));
        st.S.push_back(s);
        st.dS.push_back(Vec3(ab[0].der[i] * ab[1].val[j] * ab[2].val[k],
                             ab[0].val[i] * ab[1].der[j] * ab[2].val[k],
                             ab[0].val[i] * ab[1].val[j] * ab[2].der[k]));
      }
  return st;
}

inline BasisStencil gimp_basis(const MaterialPoint& p, const BackgroundGrid& grid) {
  return gimp_basis(p.x, p.half, grid);
}

/// Compact indexing of the grid nodes touched by any stencil.
struct ActiveNodes {
  std::vector<int> ids;      // global node id per compact index
  std::vector<int> compact;  // global -> compact, -1 if inactive

  int size() const { return static_cast<int>(ids.size()); }
};

inline ActiveNodes build_active_nodes(const std::vector<BasisStencil>& stencils,
                                      const BackgroundGrid& grid) {
  ActiveNodes an;
  an.compact.assign(grid.total_nodes(), -1);
  for (const auto& st : stencils)
    for (int v : st.nodes)
      if (an.compact[v] < 0) {
        an.compact[v] = 0;  // mark
        an.ids.push_back(v);
      }
  std::sort(an.ids.begin(), an.ids.end());
  for (std::size_t i = 0; i < an.ids.size(); ++i) an.compact[an.ids[i]] = static_cast<int>(i);
  return an;
}

/// Point-to-grid projections: consistent mass (scalar per node pair),
/// internal force, body force and momentum/inertia right-hand sides.
struct PointGridMap {
  std::vector<Triplet> mass;  // compact node indices
  VecX f_int;                 // 3 * active
  VecX f_body;
  VecX momentum_rhs;          // sum_p S^T m v_p
  VecX inertia_rhs;           // sum_p S^T m a_p
  double total_mass = 0.0;
};

inline PointGridMap map_points_to_grid(const std::vector<MaterialPoint>& points,
                                       const std::vector<BasisStencil>& stencils,
                                       const ActiveNodes& an, const Vec3& gravity) {
  PointGridMap out;
  const int n = an.size();
  out.f_int = VecX::Zero(3 * n);
  out.f_body = VecX::Zero(3 * n);
  out.momentum_rhs = VecX::Zero(3 * n);
  out.inertia_rhs = VecX::Zero(3 * n);
  for (std::size_t p = 0; p < points.size(); ++p) {
    const auto& mp = points[p];
    const auto& st = stencils[p];
    out.total_mass += mp.mass;
    for (std::size_t i = 0; i < st.nodes.size(); ++i) {
      const int vi = an.compact[st.nodes[i]];
      const Vec3 fi = mp.sigma * st.dS[i] * mp.V;
      const Vec3 bi = st.S[i] * mp.mass * gravity;
      for (int d = 0; d < 3; ++d) {
        out.f_int[3 * vi + d] += fi[d];
        out.f_body[3 * vi + d] += bi[d];
        out.momentum_rhs[3 * vi + d] += st.S[i] * mp.mass * mp.v[d];
        out.inertia_rhs[3 * vi + d] += st.S[i] * mp.mass * mp.a[d];
      }
      for (std::size_t j = 0; j < st.nodes.size(); ++j) {
        const int vj = an.compact[st.nodes[j]];
        out.mass.emplace_back(vi, vj, st.S[i] * st.S[j] * mp.mass);
      }
    }
  }
  return out;
}

/// Displacement gradient of a nodal field at the point.
inline Mat3 displacement_gradient(const BasisStencil& st, const ActiveNodes& an, const VecX& u) {
  Mat3 g = Mat3::Zero();
  for (std::size_t i = 0; i < st.nodes.size(); ++i) {
    const int vi = an.compact[st.nodes[i]];
    g += u.segment<3>(3 * vi) * st.dS[i].transpose();
  }
  return g;
}

inline Vec3 interpolate(const BasisStencil& st, const ActiveNodes& an, const VecX& field) {
  Vec3 out = Vec3::Zero();
  for (std::size_t i = 0; i < st.nodes.size(); ++i)
    out += st.S[i] * field.segment<3>(3 * an.compact[st.nodes[i]]);
  return out;
}

/// Kinematic grid-to-point update once a step has converged. The stress and
/// elastic deformation commit separately through the constitutive update.
inline void update_point_kinematics(MaterialPoint& p, const BasisStencil& st,
                                    const ActiveNodes& an, const VecX& du,
                                    const VecX* v_nodal, const VecX* a_nodal) {
  const Mat3 dF = Mat3::Identity() + displacement_gradient(st, an, du);
  if (!(dF.determinant() > 0.0))
    throw NumericalError("material point inverted during the grid-to-point update");
  if (v_nodal) p.v = interpolate(st, an, *v_nodal);
  if (a_nodal) p.a = interpolate(st, an, *a_nodal);
  p.x += interpolate(st, an, du);
  p.F = dF * p.F;
  p.V = p.F.determinant() * p.V0;
}

/// Reset the domain to an axis-aligned cuboid scaled by the diagonal of the
/// right stretch, then rescale so the domain volume equals the point volume.
inline void reset_domain(MaterialPoint& p) {
  const Mat3 C = p.F.transpose() * p.F;
  Eigen::SelfAdjointEigenSolver<Mat3> es(C);
  if (es.info() != Eigen::Success || !(es.eigenvalues().minCoeff() > 0.0))
    throw NumericalError("domain reset: polar decomposition failed");
  Mat3 U = Mat3::Zero();
  for (int a = 0; a < 3; ++a)
    U += std::sqrt(es.eigenvalues()[a]) *
         (es.eigenvectors().col(a) * es.eigenvectors().col(a).transpose());
  for (int d = 0; d < 3; ++d) p.half[d] = p.half0[d] * U(d, d);
  const double vd = p.domain_volume();
  const double scale = std::cbrt(p.V / vd);
  p.half *= scale;
}

}  // namespace mpm
