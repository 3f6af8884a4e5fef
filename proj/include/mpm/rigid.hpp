#pragma once

#include "mpm/types.hpp"

namespace mpm {

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Eigen::Vector3i> triangles;
};

/// Bar-element skeleton. Two designated driver nodes carry the rigid-surface
/// kinematics; the remaining nodes supply mass and stiffness (e.g. the
/// inertia ring of a rolling body).
struct TrussFrame {
  struct Element {
    int i = 0, j = 0;
    double stiffness = 0.0;    // axial force per unit length change
    double rest_length = 0.0;  // captured at build time when zero
  };

  std::vector<Vec3> x;  // current positions
  std::vector<Vec3> v;
  std::vector<Vec3> a;
  std::vector<double> mass;
  std::vector<Element> elements;
  std::vector<std::array<bool, 3>> fixed_dof;
  std::vector<Vec3> f_external;
  int driver_m = 0;
  int driver_d = 1;

  int node_count() const { return static_cast<int>(x.size()); }

  void init_arrays() {
    const std::size_t n = x.size();
    v.assign(n, Vec3::Zero());
    a.assign(n, Vec3::Zero());
    if (mass.size() != n) mass.assign(n, 0.0);
    fixed_dof.assign(n, {false, false, false});
    f_external.assign(n, Vec3::Zero());
    for (auto& e : elements)
      if (e.rest_length <= 0.0) e.rest_length = (x[e.j] - x[e.i]).norm();
  }
};

/// The fixed 90-degree rotation about the y axis mapping the frame tangent
/// onto the frame normal.
inline Mat3 frame_rotation() {
  Mat3 R;
  R << 0, 0, 1, 0, 1, 0, -1, 0, 0;
  return R;
}

/// Per-node constants tying a surface mesh rigidly to the two driver points.
struct RigidCalibration {
  std::vector<double> A;  // offset along the frame normal
  std::vector<double> B;  // offset along the frame tangent
  std::vector<double> C;  // carried out-of-plane offset
  Vec3 y_axis = Vec3::UnitY();
};

inline double mesh_bbox_diagonal(const TriMesh& mesh) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::max());
  Vec3 hi = -lo;
  for (const auto& v : mesh.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  return (hi - lo).norm();
}

/// Project every mesh node onto the driver-point frame. The driver axis must
/// lie in an xz plane; out-of-plane offsets are carried rigidly.
inline RigidCalibration calibrate_frame(const TriMesh& mesh, const Vec3& x_m, const Vec3& x_d) {
  const Vec3 v = x_d - x_m;
  const double scale = std::max(mesh_bbox_diagonal(mesh), 1.0);
  if (v.norm() < 1e-12 * scale)
    throw ConfigError("rigid body: driver points coincide");
  if (std::abs(v[1]) > 1e-9 * v.norm())
    throw ConfigError("rigid body: driver points must share the same y coordinate");
  const Vec3 t = v.normalized();
  const Vec3 n = frame_rotation() * t;
  RigidCalibration cal;
  cal.A.reserve(mesh.vertices.size());
  cal.B.reserve(mesh.vertices.size());
  cal.C.reserve(mesh.vertices.size());
  for (const auto& xn : mesh.vertices) {
    const Vec3 r = xn - x_m;
    cal.A.push_back(r.dot(n));
    cal.B.push_back(r.dot(t));
    cal.C.push_back(r.dot(Vec3::UnitY()));
  }
  return cal;
}

inline Vec3 rigid_node_position(const RigidCalibration& cal, int n, const Vec3& x_m,
                                const Vec3& x_d) {
  const Vec3 t = (x_d - x_m).normalized();
  const Vec3 nrm = frame_rotation() * t;
  return cal.A[n] * nrm + cal.B[n] * t + x_m + cal.C[n] * Vec3::UnitY();
}

/// First- and second-variation kernels of the driver frame at the current
/// driver positions. Theta is ordered (x_M, x_D).
struct FrameKinematics {
  Vec3 t = Vec3::UnitX();
  double vnorm = 1.0;
  Mat3 P = Mat3::Identity();  // I - t t^T

  static FrameKinematics at(const Vec3& x_m, const Vec3& x_d) {
    FrameKinematics f;
    const Vec3 v = x_d - x_m;
    f.vnorm = v.norm();
    if (!(f.vnorm > 0.0)) throw NumericalError("rigid frame: zero driver separation");
    f.t = v / f.vnorm;
    f.P = Mat3::Identity() - f.t * f.t.transpose();
    return f;
  }

  /// delta v from a theta perturbation.
  static Vec3 dv(const Eigen::Matrix<double, 6, 1>& dtheta) {
    return dtheta.tail<3>() - dtheta.head<3>();
  }

  Vec3 dt(const Vec3& dv_) const { return P * dv_ / vnorm; }

  /// Second variation of the unit tangent in directions (delta, Delta).
  Vec3 ddt(const Vec3& dv_a, const Vec3& dv_b) const {
    const Vec3 dt_b = dt(dv_b);
    return -(t.dot(dv_b) / (vnorm * vnorm)) * (P * dv_a) -
           (t.dot(dv_a) * dt_b + dt_b.dot(dv_a) * t) / vnorm;
  }
};

/// (A_n R + B_n I), the matrix carrying tangent variations into node motion.
inline Mat3 rigid_node_gain(const RigidCalibration& cal, int n) {
  return cal.A[n] * frame_rotation() + cal.B[n] * Mat3::Identity();
}

/// d(x_n)/d(theta) as a 3x6 block.
inline Eigen::Matrix<double, 3, 6> rigid_node_jacobian(const RigidCalibration& cal, int n,
                                                       const FrameKinematics& fk) {
  const Mat3 K = rigid_node_gain(cal, n);
  const Mat3 KP = K * fk.P / fk.vnorm;
  Eigen::Matrix<double, 3, 6> J;
  J.block<3, 3>(0, 0) = Mat3::Identity() - KP;  // d/d x_M
  J.block<3, 3>(0, 3) = KP;                     // d/d x_D
  return J;
}

/// Linear triangle interpolation, N = (1 - xi1 - xi2, xi1, xi2).
inline Vec3 surface_point(const Vec3& x0, const Vec3& x1, const Vec3& x2, const Vec2& xi) {
  return (1.0 - xi[0] - xi[1]) * x0 + xi[0] * x1 + xi[1] * x2;
}

inline void surface_tangents(const Vec3& x0, const Vec3& x1, const Vec3& x2, Vec3* t1, Vec3* t2) {
  *t1 = x1 - x0;
  *t2 = x2 - x0;
}

/// Axial force and consistent stiffness of one 3D truss element. Sign
/// convention: the returned force is the internal force on (node i, node j),
/// equal to the external load at equilibrium.
inline void truss_element(const Vec3& x1, const Vec3& x2, double stiffness, double rest_length,
                          Eigen::Matrix<double, 6, 1>* f_int,
                          Eigen::Matrix<double, 6, 6>* K) {
  const Vec3 d = x2 - x1;
  const double L = d.norm();
  if (!(L > 1e-14 * rest_length))
    throw NumericalError("truss element collapsed to zero length");
  const Vec3 t = d / L;
  const double N = stiffness * (L - rest_length);  // tension positive
  if (f_int) {
    f_int->head<3>() = -N * t;
    f_int->tail<3>() = N * t;
  }
  if (K) {
    const Mat3 km = stiffness * (t * t.transpose()) +
                    (N / L) * (Mat3::Identity() - t * t.transpose());
    K->block<3, 3>(0, 0) = km;
    K->block<3, 3>(3, 3) = km;
    K->block<3, 3>(0, 3) = -km;
    K->block<3, 3>(3, 0) = -km;
  }
}

/// Internal force vector of the whole frame at its current geometry.
inline VecX frame_internal_force(const TrussFrame& frame) {
  VecX f = VecX::Zero(3 * frame.node_count());
  for (const auto& e : frame.elements) {
    Eigen::Matrix<double, 6, 1> fe;
    truss_element(frame.x[e.i], frame.x[e.j], e.stiffness, e.rest_length, &fe, nullptr);
    f.segment<3>(3 * e.i) += fe.head<3>();
    f.segment<3>(3 * e.j) += fe.tail<3>();
  }
  return f;
}

inline std::vector<Triplet> frame_stiffness(const TrussFrame& frame) {
  std::vector<Triplet> out;
  for (const auto& e : frame.elements) {
    Eigen::Matrix<double, 6, 6> Ke;
    truss_element(frame.x[e.i], frame.x[e.j], e.stiffness, e.rest_length, nullptr, &Ke);
    const int base[2] = {3 * e.i, 3 * e.j};
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j)
            out.emplace_back(base[a] + i, base[b] + j, Ke(3 * a + i, 3 * b + j));
  }
  return out;
}

}  // namespace mpm
