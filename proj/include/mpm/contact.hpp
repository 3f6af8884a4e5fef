#pragma once

#include <limits>

#include "mpm/contact_state.hpp"
#include "mpm/points.hpp"
#include "mpm/rigid.hpp"
#include "mpm/types.hpp"

namespace mpm {

// ---------------------------------------------------------------------------
// Closest point projection
// ---------------------------------------------------------------------------

/// Closest point on the closed triangle (a,b,c); Ericson's region walk.
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + (d1 / (d1 - d3)) * ab;
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return b + w * (c - b);
  }
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

struct CppResult {
  bool found = false;
  bool face = false;  // projection lands on a triangle face (closed)
  int tri = -1;
  Vec2 xi = Vec2::Zero();
  double gap = 0.0;  // signed normal distance, face results only
  Vec3 normal = Vec3::Zero();
  Vec3 point = Vec3::Zero();  // closest point on the surface
  double dist2 = std::numeric_limits<double>::max();
};

namespace detail {

inline double aabb_dist2(const Vec3& p, const Vec3& lo, const Vec3& hi) {
  double d2 = 0.0;
  for (int d = 0; d < 3; ++d) {
    const double v = std::max({lo[d] - p[d], 0.0, p[d] - hi[d]});
    d2 += v * v;
  }
  return d2;
}

}  // namespace detail

/// Median-split AABB tree over the current triangle positions.
class TriangleBvh {
 public:
  void build(const TriMesh& mesh, const std::vector<Vec3>& x) {
    mesh_ = &mesh;
    x_ = &x;
    const int nt = static_cast<int>(mesh.triangles.size());
    order_.resize(nt);
    for (int t = 0; t < nt; ++t) order_[t] = t;
    centroids_.resize(nt);
    for (int t = 0; t < nt; ++t) {
      const auto& tri = mesh.triangles[t];
      centroids_[t] = (x[tri[0]] + x[tri[1]] + x[tri[2]]) / 3.0;
    }
    nodes_.clear();
    nodes_.reserve(2 * nt);
    if (nt > 0) build_node(0, nt);
  }

  template <typename Visit>
  void nearest(const Vec3& p, double* best_d2, Visit&& visit) const {
    if (nodes_.empty()) return;
    descend(0, p, best_d2, visit);
  }

  /// Squared distance from a point to the root bounding box; zero inside.
  double root_dist2(const Vec3& p) const {
    if (nodes_.empty()) return std::numeric_limits<double>::max();
    return detail::aabb_dist2(p, nodes_[0].lo, nodes_[0].hi);
  }

 private:
  struct Node {
    Vec3 lo, hi;
    int left = -1, right = -1;
    int begin = 0, end = 0;
  };

  int build_node(int begin, int end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({});
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::max());
    Vec3 hi = -lo;
    for (int k = begin; k < end; ++k) {
      const auto& tri = mesh_->triangles[order_[k]];
      for (int c = 0; c < 3; ++c) {
        lo = lo.cwiseMin((*x_)[tri[c]]);
        hi = hi.cwiseMax((*x_)[tri[c]]);
      }
    }
    nodes_[id].lo = lo;
    nodes_[id].hi = hi;
    if (end - begin <= 4) {
      nodes_[id].begin = begin;
      nodes_[id].end = end;
      return id;
    }
    int axis = 0;
    const Vec3 ext = hi - lo;
    if (ext[1] > ext[axis]) axis = 1;
    if (ext[2] > ext[axis]) axis = 2;
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int ta, int tb) {
                       if (centroids_[ta][axis] != centroids_[tb][axis])
                         return centroids_[ta][axis] < centroids_[tb][axis];
                       return ta < tb;
                     });
    const int l = build_node(begin, mid);
    const int r = build_node(mid, end);
    nodes_[id].left = l;
    nodes_[id].right = r;
    nodes_[id].begin = -1;
    return id;
  }

  template <typename Visit>
  void descend(int id, const Vec3& p, double* best_d2, Visit&& visit) const {
    const Node& nd = nodes_[id];
    if (detail::aabb_dist2(p, nd.lo, nd.hi) > *best_d2) return;
    if (nd.left < 0) {
      for (int k = nd.begin; k < nd.end; ++k) visit(order_[k], best_d2);
      return;
    }
    const double dl = detail::aabb_dist2(p, nodes_[nd.left].lo, nodes_[nd.left].hi);
    const double dr = detail::aabb_dist2(p, nodes_[nd.right].lo, nodes_[nd.right].hi);
    if (dl <= dr) {
      descend(nd.left, p, best_d2, visit);
      descend(nd.right, p, best_d2, visit);
    } else {
      descend(nd.right, p, best_d2, visit);
      descend(nd.left, p, best_d2, visit);
    }
  }

  const TriMesh* mesh_ = nullptr;
  const std::vector<Vec3>* x_ = nullptr;
  std::vector<int> order_;
  std::vector<Vec3> centroids_;
  std::vector<Node> nodes_;
};

/// Global closest point projection onto a triangulated surface. The winner is
/// the globally nearest triangle (ties broken towards the lower index); the
/// result is a face datum only when the plane projection falls inside the
/// closed winning triangle, otherwise the nearest feature is an edge or a
/// vertex and no gap function exists there.
inline CppResult closest_point_projection(const Vec3& p, const TriMesh& mesh,
                                          const std::vector<Vec3>& x, const TriangleBvh& bvh) {
  CppResult best;
  double best_d2 = std::numeric_limits<double>::max();
  bvh.nearest(p, &best_d2, [&](int t, double* bd2) {
    const auto& tri = mesh.triangles[t];
    const Vec3 q = closest_point_on_triangle(p, x[tri[0]], x[tri[1]], x[tri[2]]);
    const double d2 = (p - q).squaredNorm();
    if (d2 < best.dist2 || (d2 == best.dist2 && t < best.tri)) {
      best.found = true;
      best.tri = t;
      best.point = q;
      best.dist2 = d2;
      *bd2 = std::min(*bd2, d2);
    }
  });
  if (!best.found) return best;

  const auto& tri = mesh.triangles[best.tri];
  const Vec3 a = x[tri[0]];
  Vec3 t1, t2;
  surface_tangents(a, x[tri[1]], x[tri[2]], &t1, &t2);
  Mat2 A;
  A << t1.dot(t1), t1.dot(t2), t2.dot(t1), t2.dot(t2);
  const double det = A.determinant();
  if (!(det > 0.0)) throw MeshError("degenerate rigid triangle in closest point projection");
  const Vec2 rhs((p - a).dot(t1), (p - a).dot(t2));
  Vec2 xi = A.inverse() * rhs;
  const double tol = 1e-10;
  if (xi[0] >= -tol && xi[1] >= -tol && xi[0] + xi[1] <= 1.0 + tol) {
    best.face = true;
    xi[0] = std::clamp(xi[0], 0.0, 1.0);
    xi[1] = std::clamp(xi[1], 0.0, 1.0);
    if (xi[0] + xi[1] > 1.0) xi *= 1.0 / (xi[0] + xi[1]);
    best.xi = xi;
    best.normal = t1.cross(t2).normalized();
    best.point = surface_point(a, x[tri[1]], x[tri[2]], xi);
    best.gap = (p - best.point).dot(best.normal);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Friction return map
// ---------------------------------------------------------------------------

struct FrictionResult {
  Vec3 p_t = Vec3::Zero();
  bool slip = false;
  double yield = 0.0;  // trial yield function value
};

/// Coulomb return map on the trial force p_prev + eps_t * slip_increment.
inline FrictionResult friction_return_map(const Vec3& p_t_prev, const Vec3& slip_increment,
                                          double eps_t, double mu, double p_n_abs) {
  FrictionResult out;
  const Vec3 p_tr = p_t_prev + eps_t * slip_increment;
  const double norm_tr = p_tr.norm();
  out.yield = norm_tr - mu * p_n_abs;
  if (out.yield <= 0.0) {
    out.p_t = p_tr;
    out.slip = false;
  } else {
    out.slip = true;
    out.p_t = norm_tr > 0.0 ? Vec3(mu * p_n_abs * p_tr / norm_tr) : Vec3::Zero();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pair residual and consistent tangent
// ---------------------------------------------------------------------------

struct ContactParams {
  double eps_n = 0.0;
  double eps_t = 0.0;
  double mu = 0.0;
};

/// All current-configuration data of one vertex/triangle pair. Degrees of
/// freedom are ordered as 24 grid components (8 nodes x 3) followed by the 6
/// driver components (x_M, x_D) when the body is free to move.
struct PairInput {
  Eigen::Matrix<double, 8, 1> N = Eigen::Matrix<double, 8, 1>::Zero();  // hats at the vertex
  Vec3 tri_x[3];
  Vec2 xi = Vec2::Zero();
  double gap = 0.0;
  Vec3 normal = Vec3::Zero();

  bool has_theta = false;
  FrameKinematics fk;
  Mat3 gain[3];                      // (A_n R + B_n I) per triangle node
  Eigen::Matrix<double, 3, 6> J[3];  // d(x_n)/d(theta) per triangle node

  // Previous-step anchor x'(tri_m, xi_m, theta_now) for the slip increment.
  bool has_prev = false;
  Vec3 x_prev_proj = Vec3::Zero();
  Eigen::Matrix<double, 3, 6> W_prev = Eigen::Matrix<double, 3, 6>::Zero();
  Vec3 p_t_prev = Vec3::Zero();

  ContactParams prm;
};

struct PairResult {
  int n_dofs = 24;
  Eigen::Matrix<double, 30, 1> r = Eigen::Matrix<double, 30, 1>::Zero();
  Eigen::Matrix<double, 30, 30> K = Eigen::Matrix<double, 30, 30>::Zero();
  double p_n = 0.0;
  Vec3 p_t = Vec3::Zero();
  bool slip = false;
  double yield = 0.0;
  Vec3 body_force = Vec3::Zero();  // reaction acting on the rigid body
};

/// Penalty normal force, Coulomb friction and their consistent linearisation
/// for one active pair. The vertex position follows the grid through the hat
/// values, the projection point follows the driver points of the body.
inline PairResult contact_pair(const PairInput& in) {
  PairResult out;
  const int n = in.has_theta ? 30 : 24;
  out.n_dofs = n;

  const Vec3 t1 = in.tri_x[1] - in.tri_x[0];
  const Vec3 t2 = in.tri_x[2] - in.tri_x[0];
  Mat2 A;
  A << t1.dot(t1), t1.dot(t2), t2.dot(t1), t2.dot(t2);
  if (!(A.determinant() > 0.0)) throw MeshError("degenerate rigid triangle in contact pair");
  const Mat2 Ainv = A.inverse();
  const Vec3 nrm = in.normal;
  const double cross_norm = t1.cross(t2).norm();

  const double dN[2][3] = {{-1.0, 1.0, 0.0}, {-1.0, 0.0, 1.0}};
  const double Ntri[3] = {1.0 - in.xi[0] - in.xi[1], in.xi[0], in.xi[1]};

  // --- First-variation primitives per degree of freedom ------------------
  // Eigen vectors are not zero-initialised by default; the rigid-side
  // primitives must vanish on grid columns.
  std::array<Vec3, 30> dx, dxp, dT1, dT2, dn, dxp_old;
  for (int a = 0; a < 30; ++a) {
    dx[a].setZero();
    dxp[a].setZero();
    dT1[a].setZero();
    dT2[a].setZero();
    dn[a].setZero();
    dxp_old[a].setZero();
  }
  std::array<Vec3, 6> dv;  // theta columns only
  for (auto& v : dv) v.setZero();
  std::array<double, 30> dgN{};
  std::array<Vec2, 30> dxi{};
  for (auto& v : dxi) v.setZero();

  for (int a = 0; a < n; ++a) {
    if (a < 24) {
      dx[a][a % 3] = in.N[a / 3];
    } else {
      const int td = a - 24;  // theta component
      Eigen::Matrix<double, 6, 1> e = Eigen::Matrix<double, 6, 1>::Zero();
      e[td] = 1.0;
      dv[td] = FrameKinematics::dv(e);
      Vec3 sum_p = Vec3::Zero(), sum_t1 = Vec3::Zero(), sum_t2 = Vec3::Zero();
      for (int k = 0; k < 3; ++k) {
        const Vec3 dxn = in.J[k] * e;
        sum_p += Ntri[k] * dxn;
        sum_t1 += dN[0][k] * dxn;
        sum_t2 += dN[1][k] * dxn;
      }
      dxp[a] = sum_p;
      dT1[a] = sum_t1;
      dT2[a] = sum_t2;
      dn[a] = (Mat3::Identity() - nrm * nrm.transpose()) *
              (sum_t1.cross(t2) + t1.cross(sum_t2)) / cross_norm;
      if (in.has_prev) dxp_old[a] = in.W_prev * e;
    }
    dgN[a] = (dx[a] - dxp[a]).dot(nrm);
    const Vec2 rhs((dx[a] - dxp[a]).dot(t1) + in.gap * nrm.dot(dT1[a]),
                   (dx[a] - dxp[a]).dot(t2) + in.gap * nrm.dot(dT2[a]));
    dxi[a] = Ainv * rhs;
  }

  // --- Normal force -------------------------------------------------------
  const double p_n = in.prm.eps_n * in.gap;  // negative while penetrating
  out.p_n = p_n;

  // --- Friction state -----------------------------------------------------
  Vec3 p_t = Vec3::Zero();
  Vec3 slip_inc = Vec3::Zero();
  Vec3 s_hat = Vec3::Zero();
  double norm_tr = 0.0;
  bool slip = false;
  if (in.has_prev && in.prm.mu >= 0.0) {
    const Vec3 x_proj = surface_point(in.tri_x[0], in.tri_x[1], in.tri_x[2], in.xi);
    slip_inc = x_proj - in.x_prev_proj;
    const FrictionResult fr =
        friction_return_map(in.p_t_prev, slip_inc, in.prm.eps_t, in.prm.mu, -p_n);
    p_t = fr.p_t;
    slip = fr.slip;
    out.yield = fr.yield;
    const Vec3 p_tr = in.p_t_prev + in.prm.eps_t * slip_inc;
    norm_tr = p_tr.norm();
    if (slip && norm_tr > 0.0) s_hat = p_tr / norm_tr;
  }
  out.p_t = p_t;
  out.slip = slip;
  out.body_force = p_n * nrm + p_t;

  // --- Residual ------------------------------------------------------------
  const Vec2 tp(t1.dot(p_t), t2.dot(p_t));
  for (int a = 0; a < n; ++a)
    out.r[a] = p_n * dgN[a] + dxi[a][0] * tp[0] + dxi[a][1] * tp[1];

  // --- Friction force variation per dof ------------------------------------
  std::array<Vec3, 30> dpt;
  for (auto& v : dpt) v.setZero();
  if (in.has_prev) {
    for (int b = 0; b < n; ++b) {
      // d/db of the slip increment x'(xi, theta) - x'(xi_m, theta).
      const Vec3 dgT = t1 * dxi[b][0] + t2 * dxi[b][1] + dxp[b] - dxp_old[b];
      const Vec3 dptr = in.prm.eps_t * dgT;
      if (!slip) {
        dpt[b] = dptr;
      } else {
        const double dpN_abs = -in.prm.eps_n * dgN[b];
        dpt[b] = in.prm.mu * dpN_abs * s_hat +
                 (in.prm.mu * (-p_n) / norm_tr) *
                     ((Mat3::Identity() - s_hat * s_hat.transpose()) * dptr);
      }
    }
  }

  // --- Tangent ---------------------------------------------------------------
  const Mat3 Kbar = in.has_theta
                        ? Mat3(Ntri[0] * in.gain[0] + Ntri[1] * in.gain[1] + Ntri[2] * in.gain[2])
                        : Mat3::Zero();
  const Mat3 KdN1 = in.has_theta ? Mat3(-in.gain[0] + in.gain[1]) : Mat3::Zero();
  const Mat3 KdN2 = in.has_theta ? Mat3(-in.gain[0] + in.gain[2]) : Mat3::Zero();

  for (int b = 0; b < n; ++b) {
    for (int a = 0; a < n; ++a) {
      // Second variations vanish unless the rigid frame is involved.
      double DdgN = 0.0;
      Vec2 Ddxi = Vec2::Zero();
      const bool theta_pair = (a >= 24) || (b >= 24);
      if (theta_pair) {
        Vec3 ddt = Vec3::Zero(), Xi = Vec3::Zero(), ddT1 = Vec3::Zero(), ddT2 = Vec3::Zero();
        if (a >= 24 && b >= 24) {
          ddt = in.fk.ddt(dv[a - 24], dv[b - 24]);
          Xi = Kbar * ddt;
          ddT1 = KdN1 * ddt;
          ddT2 = KdN2 * ddt;
        }
        const double nT1a = nrm.dot(dT1[a]), nT2a = nrm.dot(dT2[a]);
        const double nT1b = nrm.dot(dT1[b]), nT2b = nrm.dot(dT2[b]);
        DdgN = -(nT1a * dxi[b][0] + nT2a * dxi[b][1]) - (nT1b * dxi[a][0] + nT2b * dxi[a][1]) -
               nrm.dot(Xi) +
               in.gap * (Ainv(0, 0) * nT1a * nT1b + Ainv(0, 1) * (nT2a * nT1b) +
                         Ainv(1, 0) * (nT1a * nT2b) + Ainv(1, 1) * nT2a * nT2b);

        const Vec3 rel_a = dx[a] - dxp[a];
        Vec2 rhs;
        for (int al = 0; al < 2; ++al) {
          const Vec3& t_al = (al == 0) ? t1 : t2;
          const Vec3& dT_al_a = (al == 0) ? dT1[a] : dT2[a];
          const Vec3& dT_al_b = (al == 0) ? dT1[b] : dT2[b];
          const Vec3& ddT_al = (al == 0) ? ddT1 : ddT2;
          double v = 0.0;
          v -= (dxi[b][0] * dT1[a] + dxi[b][1] * dT2[a] + Xi).dot(t_al);
          v += rel_a.dot(dT_al_b);
          v += dgN[b] * nrm.dot(dT_al_a);
          v += in.gap * dn[b].dot(dT_al_a);
          v += in.gap * nrm.dot(ddT_al);
          v -= (dT_al_b.dot(t1) + t_al.dot(dT1[b])) * dxi[a][0];
          v -= (dT_al_b.dot(t2) + t_al.dot(dT2[b])) * dxi[a][1];
          rhs[al] = v;
        }
        Ddxi = Ainv * rhs;
      }

      double k = in.prm.eps_n * dgN[b] * dgN[a] + p_n * DdgN;
      if (in.has_prev) {
        const double dtp0 = dT1[b].dot(p_t) + t1.dot(dpt[b]);
        const double dtp1 = dT2[b].dot(p_t) + t2.dot(dpt[b]);
        k += dxi[a][0] * dtp0 + dxi[a][1] * dtp1;
        k += Ddxi[0] * tp[0] + Ddxi[1] * tp[1];
      }
      out.K(a, b) += k;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Domain-reset gap correction
// ---------------------------------------------------------------------------

/// Current geometry of one rigid body used by the reset correction.
struct ContactSurface {
  const TriMesh* mesh = nullptr;
  const std::vector<Vec3>* x = nullptr;
  const TriangleBvh* bvh = nullptr;
};

struct ResetGapReport {
  bool moved = false;
  bool converged = true;
  int iterations = 0;
  double energy_old = 0.0;
  double energy_final = 0.0;
};

namespace detail {

// The per-corner penalty is only live while the corner penetrates: the
// energy restores the converged overlaps and resists creating new ones, and
// ignores how separated corners drift.
inline double reset_energy(const MaterialPoint& p, const Vec3& centre,
                           const std::vector<ContactSurface>& bodies, double eps_n) {
  double e = 0.0;
  for (int c = 0; c < 8; ++c) {
    const ContactState& cs = p.corners[c];
    if (cs.body_prev < 0) continue;
    const double a = (cs.had_face_old && cs.gap_old < 0.0) ? eps_n * cs.gap_old : 0.0;
    const Vec3 pos = centre + (p.corner(c) - p.x);
    const auto& body = bodies[cs.body_prev];
    const CppResult r = closest_point_projection(pos, *body.mesh, *body.x, *body.bvh);
    const double b = (r.face && r.gap < 0.0) ? eps_n * r.gap : 0.0;
    const double diff = a - b;
    e += diff * diff;
  }
  return e;
}

}  // namespace detail

/// Forward-Euler descent on the squared mismatch between the converged gaps
/// and the gaps of the reset domain, moving the domain centre. The step
/// length is the smallest side length of the domain divided by 200.
inline ResetGapReport minimise_reset_gap(MaterialPoint& p,
                                         const std::vector<ContactSurface>& bodies,
                                         double eps_n, int max_iterations = 2000,
                                         const Vec3* domain_lo = nullptr,
                                         const Vec3* domain_hi = nullptr) {
  ResetGapReport rep;
  double e_old = 0.0;
  bool any = false;
  for (int c = 0; c < 8; ++c) {
    const ContactState& cs = p.corners[c];
    if (!cs.had_face_old || cs.body_prev < 0) continue;
    any = true;
    if (cs.gap_old < 0.0) e_old += (eps_n * cs.gap_old) * (eps_n * cs.gap_old);
  }
  rep.energy_old = e_old;
  if (!any || e_old == 0.0) {
    // Nothing to restore; still guard against fresh overlaps introduced by
    // the reshaped domain.
    rep.energy_final = detail::reset_energy(p, p.x, bodies, eps_n);
    rep.converged = rep.energy_final == 0.0;
    return rep;
  }

  const double h_p = 2.0 * p.half.minCoeff();
  const double step_max = h_p / 200.0;  // upper bound on the descent step
  const double fd_step = h_p * 1e-6;
  // Converged within a gap tolerance that makes the restart force negligible.
  const double e_floor = (eps_n * 1e-6 * h_p) * (eps_n * 1e-6 * h_p);
  const auto done = [&](double e) { return e <= 0.01 * e_old || e <= e_floor; };

  Vec3 x = p.x;
  double e = detail::reset_energy(p, x, bodies, eps_n);
  Vec3 x_best = x;
  double e_best = e;
  double step = step_max;
  int it = 0;
  while (!done(e)) {
    if (++it > max_iterations || step < 1e-12 * h_p) {
      rep.converged = false;
      break;
    }
    Vec3 grad;
    for (int d = 0; d < 3; ++d) {
      Vec3 xp = x, xm = x;
      xp[d] += fd_step;
      xm[d] -= fd_step;
      grad[d] = (detail::reset_energy(p, xp, bodies, eps_n) -
                 detail::reset_energy(p, xm, bodies, eps_n)) /
                (2.0 * fd_step);
    }
    const double gnorm = grad.norm();
    if (!(gnorm > 0.0)) {
      rep.converged = false;  // stationary but above the target ratio
      break;
    }
    Vec3 x_new = x - grad * (step / gnorm);
    // The corrected domain must stay inside the background grid.
    if (domain_lo && domain_hi)
      for (int d = 0; d < 3; ++d)
        x_new[d] = std::clamp(x_new[d], (*domain_lo)[d] + p.half[d], (*domain_hi)[d] - p.half[d]);
    if ((x_new - x).norm() == 0.0) {
      rep.converged = false;  // pinned against the domain boundary
      break;
    }
    const double e_new = detail::reset_energy(p, x_new, bodies, eps_n);
    if (e_new < e) {
      x = x_new;
      e = e_new;
      step = std::min(1.5 * step, step_max);
      if (e < e_best) {
        e_best = e;
        x_best = x;
      }
    } else {
      step *= 0.5;  // overshot the minimum: refine below the upper bound
    }
  }
  if (e_best < e) {
    e = e_best;
    x = x_best;
  }
  rep.converged = rep.converged && done(e);
  rep.iterations = it;
  rep.energy_final = e;
  rep.moved = (x - p.x).norm() > 0.0;
  p.x = x;
  return rep;
}

}  // namespace mpm
