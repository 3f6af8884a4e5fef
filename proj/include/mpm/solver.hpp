#pragma once

#include <Eigen/SparseLU>
#include <functional>
#include <optional>

#include "mpm/contact.hpp"
#include "mpm/grid.hpp"
#include "mpm/materials.hpp"
#include "mpm/points.hpp"
#include "mpm/rigid.hpp"
#include "mpm/stabilize.hpp"

namespace mpm {

struct NewmarkParams {
  double gamma = 0.5;
  double beta = 0.25;
  double dt = 1.0;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("newmark: beta must be positive");
    if (!(dt > 0.0)) throw ConfigError("newmark: dt must be positive");
  }
};

/// Velocity and acceleration at the end of the step from the step
/// displacement, with the step taken from a reset grid (u_n = 0).
inline double newmark_velocity(double u, double v_n, double a_n, const NewmarkParams& nm) {
  return nm.gamma / (nm.beta * nm.dt) * u + (1.0 - nm.gamma / nm.beta) * v_n +
         nm.dt * (1.0 - nm.gamma / (2.0 * nm.beta)) * a_n;
}

inline double newmark_acceleration(double u, double v_n, double a_n, const NewmarkParams& nm) {
  return u / (nm.beta * nm.dt * nm.dt) - v_n / (nm.beta * nm.dt) -
         (1.0 / (2.0 * nm.beta) - 1.0) * a_n;
}

inline void newmark_kinematics(const VecX& u, const VecX& v_n, const VecX& a_n,
                               const NewmarkParams& nm, VecX* v1, VecX* a1) {
  v1->resize(u.size());
  a1->resize(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    (*v1)[i] = newmark_velocity(u[i], v_n[i], a_n[i], nm);
    (*a1)[i] = newmark_acceleration(u[i], v_n[i], a_n[i], nm);
  }
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

/// One rigid body: surface mesh bound to a truss frame through the driver
/// points. Prescribed bodies move by a fixed displacement per base step and
/// carry no degrees of freedom.
struct RigidBodyInstance {
  std::string name;
  TriMesh mesh;  // vertices at calibration
  RigidCalibration cal;
  TrussFrame frame;
  double mu = 0.0;
  double penalty_factor_n = 50.0;
  double penalty_factor_t = 25.0;
  bool prescribed = false;
  Vec3 step_displacement = Vec3::Zero();  // per base step when prescribed

  std::vector<Vec3> x_surf;  // current surface vertex positions
  TriangleBvh bvh;

  void calibrate() {
    cal = calibrate_frame(mesh, frame.x[frame.driver_m], frame.x[frame.driver_d]);
    update_surface();
  }

  void update_surface() {
    const Vec3& xm = frame.x[frame.driver_m];
    const Vec3& xd = frame.x[frame.driver_d];
    x_surf.resize(mesh.vertices.size());
    for (std::size_t n = 0; n < x_surf.size(); ++n)
      x_surf[n] = rigid_node_position(cal, static_cast<int>(n), xm, xd);
    bvh.build(mesh, x_surf);
  }

  /// Total moment of inertia of the frame masses about the y axis through a
  /// pivot, used by scenario checks.
  double inertia_about_y(const Vec3& pivot) const {
    double I = 0.0;
    for (int n = 0; n < frame.node_count(); ++n) {
      const Vec3 r = frame.x[n] - pivot;
      I += frame.mass[n] * (r[0] * r[0] + r[2] * r[2]);
    }
    return I;
  }
};

struct Material {
  ConstitutiveParams params;  // E acts as the default, overridden per point
  double rho = 0.0;
};

struct World {
  BackgroundGrid grid;
  std::vector<Material> materials;
  std::vector<MaterialPoint> points;
  std::vector<RigidBodyInstance> bodies;
  Vec3 gravity = Vec3::Zero();

  struct Roller {
    int axis = 0;      // fixed displacement component
    double coord = 0;  // plane position along that axis
  };
  std::vector<Roller> rollers;
  struct FixedPlane {
    int axis = 0;
    double coord = 0;  // all components fixed for nodes on this plane
  };
  std::vector<FixedPlane> fixed_planes;
  bool fix_all_boundary_nodes = false;
  bool fix_all_active_nodes = false;  // clamps the whole deformable body

  double time = 0.0;
  int step_index = 0;

  explicit World(BackgroundGrid g) : grid(std::move(g)) {}

  ConstitutiveParams point_params(const MaterialPoint& p) const {
    ConstitutiveParams mp = materials[p.material].params;
    if (p.E_p > 0.0) mp.E = p.E_p;
    return mp;
  }
  double point_rho(const MaterialPoint& p) const { return materials[p.material].rho; }
};

struct SolverSettings {
  double tol_rel = 1e-6;
  double tol_abs = 1e-9;
  int max_iterations = 25;
  int halving_cap = 10;
  bool quasi_static = false;
  double stab_mass_scale = 1.0;
  double stab_stiff_scale = 1.0;
  bool init_acceleration = true;
  int gravity_ramp_steps = 0;
  int induce_failure_at_step = -1;  // fault injection: fail the first attempt
};

// ---------------------------------------------------------------------------
// One time-step attempt
// ---------------------------------------------------------------------------

struct ContactDiagnostics {
  int point = 0;
  int corner = 0;
  int body = 0;
  int tri = 0;
  double gap = 0.0;
  double p_n = 0.0;
  double p_t_norm = 0.0;
  double yield = 0.0;
  bool slip = false;
  bool has_history = false;
};

struct NewtonReport {
  bool converged = false;
  bool nan_detected = false;
  int iterations = 0;
  std::vector<double> residual_history;
  std::string failure;
};

/// Assembles and solves one implicit step at a fixed increment size. The
/// caller owns retry logic (step halving) and state rollback.
class StepSolver {
 public:
  StepSolver(World& world, const SolverSettings& settings, const NewmarkParams& nm)
      : w_(world), s_(settings), nm_(nm) {}

  /// Freeze stencils, contact anchors, mass and ghost matrices; apply the
  /// prescribed rigid-body increments; project grid velocities.
  void begin(double dt_scale, bool move_prescribed = true) {
    nm_scaled_ = nm_;
    nm_scaled_.dt = nm_.dt * dt_scale;

    if (move_prescribed)
      for (auto& b : w_.bodies)
        if (b.prescribed) {
          const Vec3 inc = b.step_displacement * dt_scale;
          for (auto& xn : b.frame.x) xn += inc;
          b.update_surface();
        }

    stencils_.clear();
    stencils_.reserve(w_.points.size());
    corner_stencils_.assign(w_.points.size(), {});
    rho_.resize(w_.points.size());
    for (std::size_t p = 0; p < w_.points.size(); ++p) {
      stencils_.push_back(gimp_basis(w_.points[p], w_.grid));
      rho_[p] = w_.point_rho(w_.points[p]);
      for (int c = 0; c < 8; ++c) {
        const Vec3 xc = w_.points[p].corner(c);
        int elem = -1;
        const ShapeHex sh = w_.grid.shape_at(xc, &elem);
        corner_stencils_[p][c] = {elem, w_.grid.element_nodes(elem), sh.N};
      }
    }
    an_ = build_active_nodes(stencils_, w_.grid);
    n_grid_dofs_ = 3 * an_.size();

    // Broad-phase margin: corners further than this from a body cannot touch
    // it within the step.
    double h_max = 0.0;
    for (int d = 0; d < 3; ++d)
      for (int c = 0; c < w_.grid.cell_count(d); ++c)
        h_max = std::max(h_max, w_.grid.axis(d).spacing(c));
    double move = 0.0;
    for (const auto& b : w_.bodies) move = std::max(move, b.step_displacement.norm());
    const double margin = 3.0 * h_max + move;
    contact_margin2_ = margin * margin;

    // Frame degrees of freedom for free bodies.
    frame_offset_.assign(w_.bodies.size(), -1);
    int offset = n_grid_dofs_;
    for (std::size_t b = 0; b < w_.bodies.size(); ++b) {
      if (w_.bodies[b].prescribed) continue;
      frame_offset_[b] = offset;
      offset += 3 * w_.bodies[b].frame.node_count();
    }
    n_dofs_ = offset;

    build_dirichlet();
    stencil_has_free_.assign(w_.points.size(), 1);
    has_any_free_grid_dof_ = false;
    for (int i = 0; i < n_grid_dofs_; ++i) has_any_free_grid_dof_ |= dof_free_[i] != 0;
    for (std::size_t p = 0; p < w_.points.size(); ++p) {
      bool any_free = false;
      for (int v : stencils_[p].nodes) {
        const int vi = an_.compact[v];
        any_free |= dof_free_[3 * vi] || dof_free_[3 * vi + 1] || dof_free_[3 * vi + 2];
      }
      stencil_has_free_[p] = any_free ? 1 : 0;
    }

    const Vec3 g_eff = effective_gravity();
    map_ = map_points_to_grid(w_.points, stencils_, an_, g_eff);
    stab_ = build_ghost_stabilisation(w_.grid, w_.points, rho_, s_.stab_mass_scale,
                                      s_.stab_stiff_scale);
    // Compact scalar ghost matrices on the active nodes.
    auto compact_scalar = [&](const std::vector<Triplet>& in) {
      std::vector<Triplet> out;
      out.reserve(in.size());
      for (const auto& t : in) {
        const int r = an_.compact[t.row()], c = an_.compact[t.col()];
        if (r >= 0 && c >= 0) out.emplace_back(r, c, t.value());
      }
      SpMat m(an_.size(), an_.size());
      m.setFromTriplets(out.begin(), out.end());
      return m;
    };
    ghost_mass_ = compact_scalar(stab_.mass);
    ghost_stiffness_ = compact_scalar(stab_.stiffness);
    SpMat mass_plain(an_.size(), an_.size());
    mass_plain.setFromTriplets(map_.mass.begin(), map_.mass.end());
    mass_ = mass_plain + ghost_mass_;

    if (!s_.quasi_static) project_grid_state();
  }

  int n_dofs() const { return n_dofs_; }
  int n_grid_dofs() const { return n_grid_dofs_; }
  const ActiveNodes& active_nodes() const { return an_; }
  int frame_offset(int body) const { return frame_offset_[body]; }
  const std::vector<char>& dof_free() const { return dof_free_; }
  const NewmarkParams& newmark() const { return nm_scaled_; }

  struct Evaluation {
    VecX residual;               // full dof vector
    std::vector<Triplet> tangent;  // free-free entries only
    double f_ref = 1.0;
    bool nan = false;
    // Converged-state bookkeeping refreshed on every evaluation.
    std::vector<std::array<ContactState, 8>> corner_states;
    std::vector<ContactDiagnostics> diagnostics;
    std::vector<Vec3> body_contact_force;  // reaction per body
    double max_penetration = 0.0;
    int active_pairs = 0;
    // Per-point committed state candidates.
    std::vector<Mat3> sigma, fe;
  };

  Evaluation evaluate(const VecX& u) {
    Evaluation ev;
    ev.residual = VecX::Zero(n_dofs_);
    ev.corner_states.assign(w_.points.size(), {});
    ev.body_contact_force.assign(w_.bodies.size(), Vec3::Zero());
    ev.sigma.resize(w_.points.size());
    ev.fe.resize(w_.points.size());

    const Vec3 g_eff = effective_gravity();

    // --- Material points: stress, internal force, stiffness ---------------
    for (std::size_t p = 0; p < w_.points.size(); ++p) {
      const auto& mp = w_.points[p];
      const auto& st = stencils_[p];
      if (!stencil_has_free_[p] && !has_any_free_grid_dof_) {
        // Fully clamped body: the state cannot change within the step.
        ev.sigma[p] = mp.sigma;
        ev.fe[p] = mp.Fe;
        continue;
      }
      const Mat3 grad = displacement_gradient(st, an_, u.head(n_grid_dofs_));
      const Mat3 dF = Mat3::Identity() + grad;
      const double ddet = dF.determinant();
      if (!(ddet > 0.0))
        throw NumericalError("grid increment inverted material point " + std::to_string(p) +
                             " at x = " + std::to_string(mp.x[0]) + "," + std::to_string(mp.x[1]) +
                             "," + std::to_string(mp.x[2]));
      const Mat3 Fe_trial = dF * mp.Fe;
      const double J = (dF * mp.F).determinant();
      const StressUpdate su = update_stress(Fe_trial, J, w_.point_params(mp));
      ev.sigma[p] = su.sigma;
      ev.fe[p] = su.Fe;
      const double Vp = J * mp.V0;

      // Push the reference gradients to the updated configuration.
      const Mat3 dFinvT = dF.inverse().transpose();
      const std::size_t ns = st.nodes.size();
      grad_x_.resize(ns);
      for (std::size_t i = 0; i < ns; ++i) grad_x_[i] = dFinvT * st.dS[i];

      for (std::size_t i = 0; i < ns; ++i) {
        const int vi = an_.compact[st.nodes[i]];
        const Vec3 f = su.sigma * grad_x_[i] * Vp;
        const Vec3 fb = st.S[i] * mp.mass * g_eff;
        ev.residual.segment<3>(3 * vi) += f - fb;
      }
      if (!stencil_has_free_[p]) continue;  // stiffness rows all eliminated
      // Stiffness: grad^T a grad V over the stencil.
      for (std::size_t i = 0; i < ns; ++i) {
        const int vi = an_.compact[st.nodes[i]];
        for (std::size_t j = 0; j < ns; ++j) {
          const int vj = an_.compact[st.nodes[j]];
          Mat3 kij = Mat3::Zero();
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
              double v = 0.0;
              for (int k = 0; k < 3; ++k)
                for (int l = 0; l < 3; ++l)
                  v += grad_x_[i][k] * su.a(flat3(a, k), flat3(b, l)) * grad_x_[j][l];
              kij(a, b) = v * Vp;
            }
          push_block(&ev.tangent, 3 * vi, 3 * vj, kij);
        }
      }
    }

    double f_ref = map_.f_body.norm();

    // --- Ghost stabilisation of the stiffness ------------------------------
    if (ghost_stiffness_.nonZeros() > 0) {
      for (int d = 0; d < 3; ++d) {
        VecX comp(an_.size());
        for (int i = 0; i < an_.size(); ++i) comp[i] = u[3 * i + d];
        const VecX f = ghost_stiffness_ * comp;
        for (int i = 0; i < an_.size(); ++i) ev.residual[3 * i + d] += f[i];
      }
      for (int k = 0; k < ghost_stiffness_.outerSize(); ++k)
        for (SpMat::InnerIterator it(ghost_stiffness_, k); it; ++it)
          for (int d = 0; d < 3; ++d)
            push_entry(&ev.tangent, 3 * static_cast<int>(it.row()) + d,
                       3 * static_cast<int>(it.col()) + d, it.value());
    }

    // --- Inertia ------------------------------------------------------------
    if (!s_.quasi_static) {
      const double c_a = 1.0 / (nm_scaled_.beta * nm_scaled_.dt * nm_scaled_.dt);
      VecX accel(n_grid_dofs_);
      for (int i = 0; i < n_grid_dofs_; ++i)
        accel[i] = newmark_acceleration(u[i], v_n_[i], a_n_[i], nm_scaled_);
      for (int d = 0; d < 3; ++d) {
        VecX comp(an_.size());
        for (int i = 0; i < an_.size(); ++i) comp[i] = accel[3 * i + d];
        const VecX f = mass_ * comp;
        for (int i = 0; i < an_.size(); ++i) ev.residual[3 * i + d] += f[i];
      }
      for (int k = 0; k < mass_.outerSize(); ++k)
        for (SpMat::InnerIterator it(mass_, k); it; ++it)
          for (int d = 0; d < 3; ++d)
            push_entry(&ev.tangent, 3 * static_cast<int>(it.row()) + d,
                       3 * static_cast<int>(it.col()) + d, it.value() * c_a);
    }

    // --- Rigid frames --------------------------------------------------------
    for (std::size_t b = 0; b < w_.bodies.size(); ++b) {
      auto& body = w_.bodies[b];
      if (body.prescribed) continue;
      const int base = frame_offset_[b];
      auto& fr = body.frame;
      const int nn = fr.node_count();
      // Current positions from the step increment.
      frame_x_.resize(nn);
      for (int n = 0; n < nn; ++n) frame_x_[n] = fr.x[n] + u.segment<3>(base + 3 * n);
      TrussFrame cur = fr;
      cur.x = frame_x_;
      const VecX f_int = frame_internal_force(cur);
      for (int n = 0; n < nn; ++n) {
        Vec3 r = f_int.segment<3>(3 * n);
        r -= fr.mass[n] * g_eff + fr.f_external[n];
        if (!s_.quasi_static) {
          Vec3 acc;
          for (int d = 0; d < 3; ++d)
            acc[d] = newmark_acceleration(u[base + 3 * n + d], fr.v[n][d], fr.a[n][d], nm_scaled_);
          r += fr.mass[n] * acc;
        }
        ev.residual.segment<3>(base + 3 * n) += r;
        f_ref += (fr.mass[n] * g_eff + fr.f_external[n]).norm();
      }
      for (const auto& t : frame_stiffness(cur))
        push_entry(&ev.tangent, base + t.row(), base + t.col(), t.value());
      if (!s_.quasi_static) {
        const double c_a = 1.0 / (nm_scaled_.beta * nm_scaled_.dt * nm_scaled_.dt);
        for (int n = 0; n < nn; ++n)
          for (int d = 0; d < 3; ++d)
            push_entry(&ev.tangent, base + 3 * n + d, base + 3 * n + d, fr.mass[n] * c_a);
      }
    }

    // --- Contact --------------------------------------------------------------
    assemble_contact(u, &ev, &f_ref);

    ev.f_ref = std::max(f_ref, 1.0);
    if (!ev.residual.allFinite()) ev.nan = true;
    return ev;
  }

  NewtonReport solve(VecX* u_out) {
    NewtonReport rep;
    VecX u = VecX::Zero(n_dofs_);
    std::optional<Evaluation> ev;
    for (int it = 0; it <= s_.max_iterations; ++it) {
      ev = evaluate(u);
      if (ev->nan || fault_requested_) {
        rep.nan_detected = true;
        rep.failure = fault_requested_ ? "injected fault" : "non-finite residual";
        fault_requested_ = false;
        return rep;
      }
      const double rnorm = free_norm(ev->residual);
      rep.residual_history.push_back(rnorm);
      if (rnorm / ev->f_ref < s_.tol_rel || rnorm < s_.tol_abs) {
        rep.converged = true;
        rep.iterations = it;
        *u_out = u;
        last_eval_ = std::move(*ev);
        return rep;
      }
      if (it == s_.max_iterations) break;

      // Reduced linear solve.
      SpMat K(n_free_, n_free_);
      {
        reduced_triplets_.clear();
        reduced_triplets_.reserve(ev->tangent.size());
        for (const auto& t : ev->tangent) {
          const int r = free_index_[t.row()], c = free_index_[t.col()];
          if (r >= 0 && c >= 0) reduced_triplets_.emplace_back(r, c, t.value());
        }
        K.setFromTriplets(reduced_triplets_.begin(), reduced_triplets_.end());
      }
      VecX rhs(n_free_);
      for (int i = 0; i < n_dofs_; ++i)
        if (free_index_[i] >= 0) rhs[free_index_[i]] = -ev->residual[i];
      Eigen::SparseLU<SpMat> lu;
      lu.compute(K);
      if (lu.info() != Eigen::Success)
        throw IllConditioningError("tangent factorisation failed", small_cut_elements());
      const VecX du = lu.solve(rhs);
      if (!du.allFinite()) {
        rep.nan_detected = true;
        rep.failure = "non-finite Newton update";
        return rep;
      }
      for (int i = 0; i < n_dofs_; ++i)
        if (free_index_[i] >= 0) u[i] += du[free_index_[i]];
    }
    rep.failure = "no convergence within the iteration budget";
    rep.iterations = s_.max_iterations;
    *u_out = u;
    return rep;
  }

  /// Commit the converged step: grid-to-point transfer, frame update, contact
  /// history snapshot, domain reset and gap correction.
  void commit(const VecX& u) {
    const Evaluation& ev = last_eval_;
    VecX v1, a1;
    if (!s_.quasi_static) {
      v1.resize(n_grid_dofs_);
      a1.resize(n_grid_dofs_);
      for (int i = 0; i < n_grid_dofs_; ++i) {
        v1[i] = newmark_velocity(u[i], v_n_[i], a_n_[i], nm_scaled_);
        a1[i] = newmark_acceleration(u[i], v_n_[i], a_n_[i], nm_scaled_);
      }
    }
    const VecX du_grid = u.head(n_grid_dofs_);
    for (std::size_t p = 0; p < w_.points.size(); ++p) {
      auto& mp = w_.points[p];
      update_point_kinematics(mp, stencils_[p], an_, du_grid,
                              s_.quasi_static ? nullptr : &v1,
                              s_.quasi_static ? nullptr : &a1);
      mp.sigma = ev.sigma[p];
      mp.Fe = ev.fe[p];
      mp.corners = ev.corner_states[p];
    }

    for (std::size_t b = 0; b < w_.bodies.size(); ++b) {
      auto& body = w_.bodies[b];
      if (body.prescribed) continue;
      const int base = frame_offset_[b];
      auto& fr = body.frame;
      for (int n = 0; n < fr.node_count(); ++n) {
        for (int d = 0; d < 3; ++d) {
          const double un = u[base + 3 * n + d];
          if (!s_.quasi_static) {
            const double vn = newmark_velocity(un, fr.v[n][d], fr.a[n][d], nm_scaled_);
            const double an = newmark_acceleration(un, fr.v[n][d], fr.a[n][d], nm_scaled_);
            fr.v[n][d] = vn;
            fr.a[n][d] = an;
          }
          fr.x[n][d] += un;
        }
      }
      body.update_surface();
    }

    // Domain reset and the gap-energy correction for contacting points.
    std::vector<ContactSurface> surfaces;
    surfaces.reserve(w_.bodies.size());
    for (const auto& body : w_.bodies)
      surfaces.push_back({&body.mesh, &body.x_surf, &body.bvh});
    reset_reports_.clear();
    const Vec3 grid_lo = w_.grid.min_corner();
    const Vec3 grid_hi = w_.grid.max_corner();
    for (auto& mp : w_.points) {
      reset_domain(mp);
      bool in_contact = false;
      for (const auto& cs : mp.corners) in_contact |= cs.active;
      if (in_contact) {
        const double eps_n = w_.point_params(mp).E *
                             body_penalty_factor(mp);
        reset_reports_.push_back(
            minimise_reset_gap(mp, surfaces, eps_n, 2000, &grid_lo, &grid_hi));
      }
    }
  }

  const Evaluation& last_eval() const { return last_eval_; }
  const std::vector<ResetGapReport>& reset_reports() const { return reset_reports_; }
  const SpMat& stabilised_mass() const { return mass_; }
  const GhostStabilisation& ghost() const { return stab_; }

  double free_norm(const VecX& r) const {
    double s = 0.0;
    for (int i = 0; i < n_dofs_; ++i)
      if (free_index_[i] >= 0) s += r[i] * r[i];
    return std::sqrt(s);
  }

  /// Consistent initial accelerations at simulation start.
  void initialise_accelerations() {
    if (s_.quasi_static) return;
    const VecX u0 = VecX::Zero(n_dofs_);
    Evaluation ev = evaluate(u0);
    // Grid: solve M a0 = -(static residual) on the free dofs.
    if (n_grid_dofs_ > 0) {
      VecX rhs = VecX::Zero(n_grid_dofs_);
      for (int i = 0; i < n_grid_dofs_; ++i) rhs[i] = -ev.residual[i];
      // Remove the inertia already included at u=0 (a(0) depends on v_n, a_n;
      // both are zero at start, so the residual is purely static).
      VecX a0 = VecX::Zero(n_grid_dofs_);
      solve_mass_system(rhs, &a0);
      for (std::size_t p = 0; p < w_.points.size(); ++p)
        w_.points[p].a = interpolate(stencils_[p], an_, a0);
    }
    for (std::size_t b = 0; b < w_.bodies.size(); ++b) {
      auto& body = w_.bodies[b];
      if (body.prescribed) continue;
      const int base = frame_offset_[b];
      auto& fr = body.frame;
      for (int n = 0; n < fr.node_count(); ++n)
        for (int d = 0; d < 3; ++d) {
          if (fr.mass[n] <= 0.0 || fr.fixed_dof[n][d]) continue;
          fr.a[n][d] = -ev.residual[base + 3 * n + d] / fr.mass[n];
        }
    }
  }

  /// Elements whose coverage suggests a small cut, for diagnostics.
  std::vector<int> small_cut_elements() const {
    const auto cov = detail::element_coverage(w_.grid, w_.points, rho_);
    std::vector<int> out;
    for (int e = 0; e < w_.grid.total_elements(); ++e)
      if (cov.fraction[e] > 1e-9 && cov.fraction[e] < 0.05) out.push_back(e);
    return out;
  }

  void request_fault() { fault_requested_ = true; }

 private:
  struct CornerStencil {
    int element = -1;
    std::array<int, 8> nodes{};
    std::array<double, 8> N{};
  };

  double body_penalty_factor(const MaterialPoint& mp) const {
    // Normal penalty factor of the body this point last touched; falls back
    // to the first body.
    for (const auto& cs : mp.corners)
      if (cs.active && cs.body >= 0) return w_.bodies[cs.body].penalty_factor_n;
    return w_.bodies.empty() ? 0.0 : w_.bodies[0].penalty_factor_n;
  }

  Vec3 effective_gravity() const {
    if (s_.gravity_ramp_steps <= 0) return w_.gravity;
    const double f = std::min(1.0, (w_.step_index + 1.0) / s_.gravity_ramp_steps);
    return f * w_.gravity;
  }

  void build_dirichlet() {
    dof_free_.assign(n_dofs_, 1);
    const double tol = 1e-9 * (w_.grid.max_corner() - w_.grid.min_corner()).norm();
    if (w_.fix_all_active_nodes)
      for (int i = 0; i < n_grid_dofs_; ++i) dof_free_[i] = 0;
    for (int i = 0; i < an_.size(); ++i) {
      const Vec3 xv = w_.grid.node_position(an_.ids[i]);
      if (w_.fix_all_boundary_nodes) {
        bool on_boundary = false;
        for (int d = 0; d < 3; ++d)
          on_boundary |= std::abs(xv[d] - w_.grid.min_corner()[d]) < tol ||
                         std::abs(xv[d] - w_.grid.max_corner()[d]) < tol;
        if (on_boundary)
          for (int d = 0; d < 3; ++d) dof_free_[3 * i + d] = 0;
      }
      for (const auto& r : w_.rollers)
        if (std::abs(xv[r.axis] - r.coord) < tol) dof_free_[3 * i + r.axis] = 0;
      for (const auto& f : w_.fixed_planes)
        if (std::abs(xv[f.axis] - f.coord) < tol)
          for (int d = 0; d < 3; ++d) dof_free_[3 * i + d] = 0;
    }
    for (std::size_t b = 0; b < w_.bodies.size(); ++b) {
      if (w_.bodies[b].prescribed) continue;
      const int base = frame_offset_[b];
      const auto& fr = w_.bodies[b].frame;
      for (int n = 0; n < fr.node_count(); ++n)
        for (int d = 0; d < 3; ++d)
          if (fr.fixed_dof[n][d]) dof_free_[base + 3 * n + d] = 0;
    }
    free_index_.assign(n_dofs_, -1);
    n_free_ = 0;
    for (int i = 0; i < n_dofs_; ++i)
      if (dof_free_[i]) free_index_[i] = n_free_++;
  }

  void solve_mass_system(const VecX& rhs, VecX* out) {
    // Reduce to free grid dofs; fixed nodes keep zero.
    std::vector<int> idx(n_grid_dofs_, -1);
    int nf = 0;
    for (int i = 0; i < n_grid_dofs_; ++i)
      if (dof_free_[i]) idx[i] = nf++;
    if (nf == 0) {
      *out = VecX::Zero(n_grid_dofs_);
      return;
    }
    std::vector<Triplet> trips;
    for (int k = 0; k < mass_.outerSize(); ++k)
      for (SpMat::InnerIterator it(mass_, k); it; ++it)
        for (int d = 0; d < 3; ++d) {
          const int r = idx[3 * it.row() + d], c = idx[3 * it.col() + d];
          if (r >= 0 && c >= 0) trips.emplace_back(r, c, it.value());
        }
    SpMat M(nf, nf);
    M.setFromTriplets(trips.begin(), trips.end());
    Eigen::SimplicialLDLT<SpMat> ldlt(M);
    if (ldlt.info() != Eigen::Success)
      throw IllConditioningError("stabilised mass matrix is singular", small_cut_elements());
    VecX r(nf);
    for (int i = 0; i < n_grid_dofs_; ++i)
      if (idx[i] >= 0) r[idx[i]] = rhs[i];
    const VecX x = ldlt.solve(r);
    *out = VecX::Zero(n_grid_dofs_);
    for (int i = 0; i < n_grid_dofs_; ++i)
      if (idx[i] >= 0) (*out)[i] = x[idx[i]];
  }

  void project_grid_state() {
    v_n_ = VecX::Zero(n_grid_dofs_);
    a_n_ = VecX::Zero(n_grid_dofs_);
    solve_mass_system(map_.momentum_rhs, &v_n_);
    solve_mass_system(map_.inertia_rhs, &a_n_);
  }

  void assemble_contact(const VecX& u, Evaluation* ev, double* f_ref) {
    // Current surfaces of free bodies follow the frame increment.
    body_surf_.assign(w_.bodies.size(), {});
    body_bvh_.assign(w_.bodies.size(), {});
    for (std::size_t b = 0; b < w_.bodies.size(); ++b) {
      const auto& body = w_.bodies[b];
      if (body.prescribed) {
        body_surf_[b] = body.x_surf;
        continue;
      }
      const int base = frame_offset_[b];
      const Vec3 xm = body.frame.x[body.frame.driver_m] +
                      u.segment<3>(base + 3 * body.frame.driver_m);
      const Vec3 xd = body.frame.x[body.frame.driver_d] +
                      u.segment<3>(base + 3 * body.frame.driver_d);
      body_surf_[b].resize(body.mesh.vertices.size());
      for (std::size_t n = 0; n < body_surf_[b].size(); ++n)
        body_surf_[b][n] = rigid_node_position(body.cal, static_cast<int>(n), xm, xd);
      body_bvh_[b].build(body.mesh, body_surf_[b]);
    }

    for (std::size_t p = 0; p < w_.points.size(); ++p) {
      auto& mp = w_.points[p];
      const ConstitutiveParams prm_pt = w_.point_params(mp);
      for (int c = 0; c < 8; ++c) {
        const CornerStencil& cst = corner_stencils_[p][c];
        Vec3 xc = mp.corner(c);
        for (int k = 0; k < 8; ++k) {
          const int vi = an_.compact[cst.nodes[k]];
          if (vi >= 0) xc += cst.N[k] * u.segment<3>(3 * vi);
        }

        ContactState& out_state = ev->corner_states[p][c];
        const ContactState& prev = mp.corners[c];

        // One projection per body: deepest penetrating face carries the
        // force, the nearest face of any sign refreshes the anchor.
        int best_body = -1, near_body = -1;
        CppResult best, near;
        for (std::size_t b = 0; b < w_.bodies.size(); ++b) {
          const auto& bvh = w_.bodies[b].prescribed ? w_.bodies[b].bvh : body_bvh_[b];
          if (bvh.root_dist2(xc) > contact_margin2_) continue;
          const CppResult r =
              closest_point_projection(xc, w_.bodies[b].mesh, body_surf_[b], bvh);
          if (!r.face) continue;
          if (near_body < 0 || r.dist2 < near.dist2) {
            near_body = static_cast<int>(b);
            near = r;
          }
          if (r.gap < 0.0 && (best_body < 0 || r.gap < best.gap)) {
            best_body = static_cast<int>(b);
            best = r;
          }
        }
        if (best_body < 0) {
          if (near_body >= 0) {
            out_state.has_prev = true;
            out_state.body_prev = near_body;
            out_state.tri_prev = near.tri;
            out_state.xi_prev = near.xi;
            out_state.p_t_prev = Vec3::Zero();
            out_state.had_face_old = true;
            out_state.gap_old = near.gap;
          }
          continue;
        }

        const auto& body = w_.bodies[best_body];
        const auto& xs = body_surf_[best_body];
        PairInput in;
        for (int k = 0; k < 8; ++k) in.N[k] = cst.N[k];
        const auto& tri = body.mesh.triangles[best.tri];
        for (int k = 0; k < 3; ++k) in.tri_x[k] = xs[tri[k]];
        in.xi = best.xi;
        in.gap = best.gap;
        in.normal = best.normal;
        in.prm.eps_n = prm_pt.E * body.penalty_factor_n;
        in.prm.eps_t = prm_pt.E * body.penalty_factor_t;
        in.prm.mu = body.mu;
        const bool free_body = !body.prescribed;
        FrameKinematics fk;
        if (free_body) {
          const int base = frame_offset_[best_body];
          const Vec3 xm = body.frame.x[body.frame.driver_m] +
                          u.segment<3>(base + 3 * body.frame.driver_m);
          const Vec3 xd = body.frame.x[body.frame.driver_d] +
                          u.segment<3>(base + 3 * body.frame.driver_d);
          fk = FrameKinematics::at(xm, xd);
          in.has_theta = true;
          in.fk = fk;
          for (int k = 0; k < 3; ++k) {
            in.gain[k] = rigid_node_gain(body.cal, tri[k]);
            in.J[k] = rigid_node_jacobian(body.cal, tri[k], fk);
          }
        }
        // Slip anchor from the previous converged state on the same body.
        if (prev.has_prev && prev.body_prev == best_body) {
          in.has_prev = true;
          const auto& tp = body.mesh.triangles[prev.tri_prev];
          in.x_prev_proj = surface_point(xs[tp[0]], xs[tp[1]], xs[tp[2]], prev.xi_prev);
          in.p_t_prev = prev.p_t_prev;
          if (free_body) {
            const double Np[3] = {1.0 - prev.xi_prev[0] - prev.xi_prev[1], prev.xi_prev[0],
                                  prev.xi_prev[1]};
            in.W_prev.setZero();
            for (int k = 0; k < 3; ++k)
              in.W_prev += Np[k] * rigid_node_jacobian(body.cal, tp[k], fk);
          }
        }

        const PairResult pr = contact_pair(in);

        // Scatter into the global system.
        int dof_map[30];
        for (int k = 0; k < 8; ++k) {
          const int vi = an_.compact[cst.nodes[k]];
          for (int d = 0; d < 3; ++d) dof_map[3 * k + d] = vi >= 0 ? 3 * vi + d : -1;
        }
        if (free_body) {
          const int base = frame_offset_[best_body];
          for (int d = 0; d < 3; ++d) {
            dof_map[24 + d] = base + 3 * body.frame.driver_m + d;
            dof_map[27 + d] = base + 3 * body.frame.driver_d + d;
          }
        }
        const int nd = pr.n_dofs;
        for (int a = 0; a < nd; ++a) {
          if (dof_map[a] < 0) continue;
          ev->residual[dof_map[a]] += pr.r[a];
          for (int b2 = 0; b2 < nd; ++b2)
            if (dof_map[b2] >= 0)
              push_entry(&ev->tangent, dof_map[a], dof_map[b2], pr.K(a, b2));
        }

        // Bookkeeping: current state plus the converged-history snapshot the
        // next step will read if this evaluation is the accepted one.
        out_state.active = true;
        out_state.body = best_body;
        out_state.tri = best.tri;
        out_state.xi = best.xi;
        out_state.gap = best.gap;
        out_state.normal = best.normal;
        out_state.p_n = pr.p_n;
        out_state.p_t = pr.p_t;
        out_state.slip = pr.slip;
        out_state.has_prev = true;
        out_state.body_prev = best_body;
        out_state.tri_prev = best.tri;
        out_state.xi_prev = best.xi;
        out_state.p_t_prev = pr.p_t;
        out_state.had_face_old = true;
        out_state.gap_old = best.gap;
        ev->body_contact_force[best_body] += pr.body_force;
        ev->max_penetration = std::max(ev->max_penetration, -best.gap);
        ev->active_pairs += 1;
        *f_ref += pr.body_force.norm();
        ev->diagnostics.push_back({static_cast<int>(p), c, best_body, best.tri, best.gap,
                                   pr.p_n, pr.p_t.norm(), pr.yield, pr.slip, in.has_prev});
      }
    }
  }

  static void push_entry(std::vector<Triplet>* out, int r, int c, double v) {
    if (v != 0.0) out->emplace_back(r, c, v);
  }
  static void push_block(std::vector<Triplet>* out, int r, int c, const Mat3& m) {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (m(i, j) != 0.0) out->emplace_back(r + i, c + j, m(i, j));
  }

  World& w_;
  SolverSettings s_;
  NewmarkParams nm_;
  NewmarkParams nm_scaled_;

  std::vector<BasisStencil> stencils_;
  std::vector<std::array<CornerStencil, 8>> corner_stencils_;
  std::vector<double> rho_;
  ActiveNodes an_;
  PointGridMap map_;
  GhostStabilisation stab_;
  SpMat mass_, ghost_mass_, ghost_stiffness_;
  VecX v_n_, a_n_;

  int n_grid_dofs_ = 0;
  int n_dofs_ = 0;
  int n_free_ = 0;
  double contact_margin2_ = std::numeric_limits<double>::max();
  std::vector<int> frame_offset_;
  std::vector<char> dof_free_;
  std::vector<char> stencil_has_free_;
  bool has_any_free_grid_dof_ = true;
  std::vector<int> free_index_;
  bool fault_requested_ = false;

  Evaluation last_eval_;
  std::vector<ResetGapReport> reset_reports_;

  // scratch
  std::vector<Vec3> grad_x_;
  std::vector<Vec3> frame_x_;
  std::vector<std::vector<Vec3>> body_surf_;
  std::vector<TriangleBvh> body_bvh_;
  std::vector<Triplet> reduced_triplets_;
};

// ---------------------------------------------------------------------------
// Time stepping with step halving
// ---------------------------------------------------------------------------

struct TimestepReport {
  bool converged = false;
  int halving_depth = 0;
  double dt_used = 0.0;
  NewtonReport newton;
  std::vector<Vec3> body_contact_force;
  double max_penetration = 0.0;
  int active_pairs = 0;
  std::vector<ContactDiagnostics> diagnostics;
  int reset_corrections = 0;
  int reset_stalls = 0;
};

namespace detail {

struct WorldSnapshot {
  std::vector<MaterialPoint> points;
  std::vector<std::vector<Vec3>> frame_x;
  std::vector<std::vector<Vec3>> frame_v;
  std::vector<std::vector<Vec3>> frame_a;

  static WorldSnapshot take(const World& w) {
    WorldSnapshot s;
    s.points = w.points;
    for (const auto& b : w.bodies) {
      s.frame_x.push_back(b.frame.x);
      s.frame_v.push_back(b.frame.v);
      s.frame_a.push_back(b.frame.a);
    }
    return s;
  }
  void restore(World* w) const {
    w->points = points;
    for (std::size_t b = 0; b < w->bodies.size(); ++b) {
      w->bodies[b].frame.x = frame_x[b];
      w->bodies[b].frame.v = frame_v[b];
      w->bodies[b].frame.a = frame_a[b];
      w->bodies[b].update_surface();
    }
  }
};

}  // namespace detail

/// One base time step: attempt at the base size, halve on failure, restore
/// the base size once a reduced attempt has converged.
inline TimestepReport run_timestep(World& world, const SolverSettings& settings,
                                   const NewmarkParams& nm) {
  const detail::WorldSnapshot snap = detail::WorldSnapshot::take(world);
  TimestepReport rep;
  for (int depth = 0; depth <= settings.halving_cap; ++depth) {
    const double scale = std::pow(0.5, depth);
    StepSolver solver(world, settings, nm);
    bool failed = false;
    NewtonReport newton;
    try {
      solver.begin(scale);
      if (settings.induce_failure_at_step == world.step_index && depth == 0)
        solver.request_fault();
      VecX u;
      newton = solver.solve(&u);
      if (newton.converged) {
        solver.commit(u);
        rep.converged = true;
        rep.halving_depth = depth;
        rep.dt_used = nm.dt * scale;
        rep.newton = newton;
        rep.body_contact_force = solver.last_eval().body_contact_force;
        rep.max_penetration = solver.last_eval().max_penetration;
        rep.active_pairs = solver.last_eval().active_pairs;
        rep.diagnostics = solver.last_eval().diagnostics;
        for (const auto& rr : solver.reset_reports()) {
          rep.reset_corrections += rr.moved ? 1 : 0;
          rep.reset_stalls += rr.converged ? 0 : 1;
        }
        world.time += rep.dt_used;
        world.step_index += 1;
        return rep;
      }
      failed = true;
    } catch (const NumericalError&) {
      failed = true;
    }
    if (failed) {
      snap.restore(&world);
      rep.newton = newton;
    }
  }
  throw NumericalError("step halving exceeded its cap at step " +
                       std::to_string(world.step_index));
}

}  // namespace mpm
