#pragma once

#include <filesystem>
#include <functional>

#include "mpm/io.hpp"
#include "mpm/solver.hpp"

namespace mpm {

// ---------------------------------------------------------------------------
// Analytic benchmark solutions
// ---------------------------------------------------------------------------

/// Constant axial stress of a column compressed from length l0 to l.
inline double analytic_cube_stress(double E, double l, double l0) {
  if (!(l > 0.0) || !(l0 > 0.0)) throw ConfigError("analytic cube stress: lengths must be positive");
  return E * std::log(l / l0) * (l0 / l);
}

/// L2 stress error against a constant axial reference, weighted by the
/// initial point volumes.
inline double l2_stress_error(const std::vector<MaterialPoint>& points, double sigma_ref,
                              int axis = 2) {
  double e2 = 0.0;
  for (const auto& p : points) {
    const double d = p.sigma(axis, axis) - sigma_ref;
    e2 += d * d * p.V0;
  }
  return std::sqrt(e2);
}

/// Travel of a ball released on a slope, slip and stick branches.
inline double analytic_sphere_position(double t, double mu, double theta_deg, double g) {
  const double th = theta_deg * M_PI / 180.0;
  if (std::tan(th) > 3.0 * mu)
    return 0.5 * g * t * t * (std::sin(th) - mu * std::cos(th));
  return g * t * t * std::sin(th) / 3.0;
}

inline bool sphere_slips(double mu, double theta_deg) {
  return std::tan(theta_deg * M_PI / 180.0) > 3.0 * mu;
}

// ---------------------------------------------------------------------------
// Rigid mesh generators
// ---------------------------------------------------------------------------

/// Rectangular plate spanned by u and v from a corner; normal follows u x v.
inline TriMesh make_plate(const Vec3& corner, const Vec3& u, const Vec3& v) {
  TriMesh m;
  m.vertices = {corner, corner + u, corner + u + v, corner + v};
  m.triangles = {{0, 1, 2}, {0, 2, 3}};
  return m;
}

/// Closed axis-aligned box with outward normals.
inline TriMesh make_box(const Vec3& lo, const Vec3& hi) {
  TriMesh m;
  m.vertices = {{lo[0], lo[1], lo[2]}, {hi[0], lo[1], lo[2]}, {hi[0], hi[1], lo[2]},
                {lo[0], hi[1], lo[2]}, {lo[0], lo[1], hi[2]}, {hi[0], lo[1], hi[2]},
                {hi[0], hi[1], hi[2]}, {lo[0], hi[1], hi[2]}};
  m.triangles = {{0, 2, 1}, {0, 3, 2},   // bottom (-z)
                 {4, 5, 6}, {4, 6, 7},   // top (+z)
                 {0, 1, 5}, {0, 5, 4},   // -y
                 {2, 3, 7}, {2, 7, 6},   // +y
                 {1, 2, 6}, {1, 6, 5},   // +x
                 {3, 0, 4}, {3, 4, 7}};  // -x
  return m;
}

/// Latitude/longitude sphere; 2 * n_lon * (n_lat - 1) triangles.
inline TriMesh make_sphere_latlong(const Vec3& centre, double diameter, int n_lat, int n_lon) {
  if (n_lat < 3 || n_lon < 3) throw ConfigError("sphere mesh needs n_lat >= 3 and n_lon >= 3");
  const double r = 0.5 * diameter;
  TriMesh m;
  m.vertices.push_back(centre + Vec3(0, 0, r));  // north pole
  for (int i = 1; i < n_lat; ++i) {
    const double th = M_PI * i / n_lat;
    for (int j = 0; j < n_lon; ++j) {
      const double ph = 2.0 * M_PI * j / n_lon;
      m.vertices.push_back(centre + r * Vec3(std::sin(th) * std::cos(ph),
                                             std::sin(th) * std::sin(ph), std::cos(th)));
    }
  }
  m.vertices.push_back(centre + Vec3(0, 0, -r));  // south pole
  const int south = static_cast<int>(m.vertices.size()) - 1;
  const auto ring = [&](int i, int j) { return 1 + (i - 1) * n_lon + (j % n_lon); };
  for (int j = 0; j < n_lon; ++j) m.triangles.emplace_back(0, ring(1, j), ring(1, j + 1));
  for (int i = 1; i + 1 < n_lat; ++i)
    for (int j = 0; j < n_lon; ++j) {
      m.triangles.emplace_back(ring(i, j), ring(i + 1, j), ring(i + 1, j + 1));
      m.triangles.emplace_back(ring(i, j), ring(i + 1, j + 1), ring(i, j + 1));
    }
  for (int j = 0; j < n_lon; ++j)
    m.triangles.emplace_back(south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j));
  io::validate_and_orient(&m);
  return m;
}

/// Quarter cone (tip down) with a cylindrical shaft, open on the symmetry
/// planes x = 0 and y = 0 and at the shaft top. Outward normals.
inline TriMesh make_cone_quarter(const Vec3& tip, double radius, double tip_half_angle_deg,
                                 double shaft_length, int n_seg) {
  if (n_seg < 2) throw ConfigError("cone mesh needs at least 2 segments per quarter");
  const double h_cone = radius / std::tan(tip_half_angle_deg * M_PI / 180.0);
  TriMesh m;
  m.vertices.push_back(tip);
  const auto arc = [&](double z) {
    const int base = static_cast<int>(m.vertices.size());
    for (int j = 0; j <= n_seg; ++j) {
      const double ph = 0.5 * M_PI * j / n_seg;
      m.vertices.push_back(tip + Vec3(radius * std::cos(ph), radius * std::sin(ph), z));
    }
    return base;
  };
  const int ring1 = arc(h_cone);
  const int ring2 = arc(h_cone + shaft_length);
  // Wound so normals point outward (away from the axis, downward at the tip).
  for (int j = 0; j < n_seg; ++j)
    m.triangles.emplace_back(0, ring1 + j + 1, ring1 + j);
  for (int j = 0; j < n_seg; ++j) {
    m.triangles.emplace_back(ring1 + j, ring2 + j + 1, ring2 + j);
    m.triangles.emplace_back(ring1 + j, ring1 + j + 1, ring2 + j + 1);
  }
  io::validate_and_orient(&m);
  return m;
}

/// Inertia ring frame: a massless hub driving a ring of point masses, braced
/// by spokes and hoop bars so it acts as a rigid disc in its plane.
inline TrussFrame make_ring_frame(const Vec3& centre, double ring_diameter, int n_nodes,
                                  double node_mass, double stiffness) {
  TrussFrame f;
  f.x.push_back(centre);
  f.mass.push_back(0.0);
  const double r = 0.5 * ring_diameter;
  for (int j = 0; j < n_nodes; ++j) {
    const double ph = 2.0 * M_PI * j / n_nodes;
    f.x.push_back(centre + Vec3(r * std::cos(ph), 0.0, r * std::sin(ph)));
    f.mass.push_back(node_mass);
  }
  for (int j = 1; j <= n_nodes; ++j) {
    f.elements.push_back({0, j, stiffness, 0.0});                          // spoke
    f.elements.push_back({j, j % n_nodes + 1, stiffness, 0.0});            // hoop
  }
  f.driver_m = 0;
  f.driver_d = 1;
  f.init_arrays();
  for (auto& fd : f.fixed_dof) fd[1] = true;  // in-plane motion only
  return f;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

inline constexpr int kConfigVersion = 1;

namespace detail {

template <typename T>
T req(const nlohmann::json& j, const std::string& key, const std::string& ctx) {
  if (!j.contains(key)) throw ConfigError(ctx + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(ctx + ": field '" + key + "' has the wrong type");
  }
}

template <typename T>
T opt(const nlohmann::json& j, const std::string& key, const T& fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

inline Vec3 req_vec3(const nlohmann::json& j, const std::string& key, const std::string& ctx) {
  const auto arr = req<std::vector<double>>(j, key, ctx);
  if (arr.size() != 3) throw ConfigError(ctx + ": field '" + key + "' must have 3 components");
  return {arr[0], arr[1], arr[2]};
}

}  // namespace detail

struct OutputOptions {
  std::string directory = "out";
  int cadence = 1;
  bool vtk = true;
  bool rigid_stl = true;
  bool contact_csv = true;
  bool convergence_csv = true;
  bool history_csv = true;
  int checkpoint_cadence = 0;
  bool summary = true;
};

/// Scenario: a fully built world plus run controls, constructed from the
/// versioned JSON configuration.
class Scenario {
 public:
  World world;
  SolverSettings settings;
  NewmarkParams newmark;
  int n_steps = 0;
  OutputOptions out;
  std::string title;

  static Scenario from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scenario config: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("scenario config is not valid JSON: " + std::string(e.what()));
    }
    return from_json(j, std::filesystem::path(path).parent_path().string());
  }

  static Scenario from_json(const nlohmann::json& j, const std::string& base_dir = ".");

  struct StepRecord {
    double time = 0.0;
    double dt = 0.0;
    int halving_depth = 0;
    int iterations = 0;
    std::vector<Vec3> body_force;
    std::vector<Vec3> driver_position;
    double max_penetration = 0.0;
    int active_pairs = 0;
    int reset_corrections = 0;
    int reset_stalls = 0;
  };

  struct RunSummary {
    int steps = 0;
    double final_time = 0.0;
    double mass_initial = 0.0;
    double mass_final = 0.0;
    int total_halvings = 0;
    std::vector<StepRecord> history;
    std::string output_directory;
  };

  using StepCallback = std::function<void(const World&, const TimestepReport&)>;

  RunSummary run(const StepCallback& callback = nullptr);

  /// Field-precise validation beyond what building already enforces.
  void validate() const {
    for (const auto& b : world.bodies)
      if (b.mu < 0.0) throw ConfigError("rigid body '" + b.name + "': friction must be >= 0");
    if (n_steps <= 0) throw ConfigError("solver: steps must be positive");
  }

 private:
  std::string resolve_output() const {
    std::filesystem::path dir = out.directory;
    if (const char* root = std::getenv("MPM3D_OUTPUT_ROOT"); root && dir.is_relative())
      dir = std::filesystem::path(root) / dir;
    std::filesystem::create_directories(dir);
    return dir.string();
  }
};

// ---------------------------------------------------------------------------
// Building
// ---------------------------------------------------------------------------

namespace detail {

inline GridAxis axis_from_json(const nlohmann::json& j, const std::string& ctx) {
  if (j.contains("coords")) {
    GridAxis a;
    a.coords = req<std::vector<double>>(j, "coords", ctx);
    a.validate();
    return a;
  }
  const double dx = req<double>(j, "dx", ctx);
  const double uniform = req<double>(j, "uniform_extent", ctx);
  const double total = req<double>(j, "total_extent", ctx);
  const double exponent = opt<double>(j, "exponent", 1.3);
  const double origin = opt<double>(j, "origin", 0.0);
  GridAxis a = build_graded_axis(dx, uniform, total, exponent);
  for (auto& c : a.coords) c += origin;
  return a;
}

inline TriMesh mesh_from_json(const nlohmann::json& j, const std::string& ctx,
                              const std::string& base_dir) {
  const std::string type = req<std::string>(j, "type", ctx);
  if (type == "file") {
    std::filesystem::path p = req<std::string>(j, "path", ctx);
    if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
    if (!std::filesystem::exists(p)) throw ConfigError(ctx + ": mesh file not found: " + p.string());
    return io::load_mesh(p.string());
  }
  if (type == "plate")
    return make_plate(req_vec3(j, "corner", ctx), req_vec3(j, "u", ctx), req_vec3(j, "v", ctx));
  if (type == "box") return make_box(req_vec3(j, "min", ctx), req_vec3(j, "max", ctx));
  if (type == "sphere_latlong")
    return make_sphere_latlong(req_vec3(j, "center", ctx), req<double>(j, "diameter", ctx),
                               opt<int>(j, "n_lat", 11), opt<int>(j, "n_lon", 16));
  if (type == "cone_quarter")
    return make_cone_quarter(req_vec3(j, "tip", ctx), req<double>(j, "radius", ctx),
                             opt<double>(j, "tip_half_angle_deg", 30.0),
                             req<double>(j, "shaft_length", ctx), opt<int>(j, "segments", 6));
  throw ConfigError(ctx + ": unknown mesh type '" + type + "'");
}

}  // namespace detail

inline Scenario Scenario::from_json(const nlohmann::json& j, const std::string& base_dir) {
  using detail::opt;
  using detail::req;
  using detail::req_vec3;

  if (req<int>(j, "version", "config") != kConfigVersion)
    throw ConfigError("config: unsupported version, expected " + std::to_string(kConfigVersion));

  // Grid.
  const auto& jgrid = j.contains("grid") ? j.at("grid")
                                         : throw ConfigError("config: missing field 'grid'");
  const auto jaxes = jgrid.contains("axes") ? jgrid.at("axes")
                                            : throw ConfigError("grid: missing field 'axes'");
  if (!jaxes.is_array() || jaxes.size() != 3) throw ConfigError("grid.axes must list 3 axes");
  std::array<GridAxis, 3> axes = {detail::axis_from_json(jaxes[0], "grid.axes[0]"),
                                  detail::axis_from_json(jaxes[1], "grid.axes[1]"),
                                  detail::axis_from_json(jaxes[2], "grid.axes[2]")};

  Scenario sc{World(BackgroundGrid(axes))};
  sc.title = opt<std::string>(j, "title", "scenario");

  // Materials.
  std::map<std::string, int> material_ids;
  std::map<int, DruckerPragerParams> dp_params;
  for (const auto& jm : j.contains("materials")
                            ? j.at("materials")
                            : throw ConfigError("config: missing field 'materials'")) {
    const std::string name = req<std::string>(jm, "name", "materials[]");
    const std::string ctx = "material '" + name + "'";
    const std::string model = req<std::string>(jm, "model", ctx);
    Material m;
    m.rho = req<double>(jm, "density", ctx);
    const double nu = req<double>(jm, "nu", ctx);
    if (model == "hencky") {
      ElasticParams ep{req<double>(jm, "E", ctx), nu, m.rho};
      ep.validate();
      m.params = ConstitutiveParams::elastic(ep.E, ep.nu);
    } else if (model == "drucker_prager") {
      DruckerPragerParams dp;
      dp.phi_deg = req<double>(jm, "friction_angle", ctx);
      dp.psi_deg = req<double>(jm, "dilation_angle", ctx);
      dp.cohesion = req<double>(jm, "cohesion", ctx);
      dp.E_ref_50 = req<double>(jm, "E_ref_50", ctx);
      dp.m_E = req<double>(jm, "m_E", ctx);
      dp.K_0 = opt<double>(jm, "K_0", k0_jaky(dp.phi_deg));
      dp.p_ref = opt<double>(jm, "p_ref", 100.0e3);
      dp.unit_weight = opt<double>(jm, "unit_weight", m.rho * 9.81);
      dp.validate();
      m.params = ConstitutiveParams::drucker_prager(opt<double>(jm, "E", dp.E_ref_50), nu, dp);
      dp_params[static_cast<int>(sc.world.materials.size())] = dp;
    } else {
      throw ConfigError(ctx + ": unknown model '" + model + "'");
    }
    material_ids[name] = static_cast<int>(sc.world.materials.size());
    sc.world.materials.push_back(m);
  }

  // Material points.
  const auto& jbody = j.contains("body") ? j.at("body")
                                         : throw ConfigError("config: missing field 'body'");
  for (const auto& jr : jbody.contains("regions")
                            ? jbody.at("regions")
                            : throw ConfigError("body: missing field 'regions'")) {
    const std::string ctx = "body.regions[]";
    const auto box = req<std::vector<double>>(jr, "box", ctx);
    if (box.size() != 6) throw ConfigError(ctx + ": box must be [x0,y0,z0,x1,y1,z1]");
    const std::string mat_name = req<std::string>(jr, "material", ctx);
    if (!material_ids.count(mat_name))
      throw ConfigError(ctx + ": unknown material '" + mat_name + "'");
    const int mat = material_ids[mat_name];
    const int ppc = opt<int>(jr, "points_per_cell", 2);
    if (ppc < 1 || ppc > 4) throw ConfigError(ctx + ": points_per_cell must be 1..4");
    const Vec3 lo(box[0], box[1], box[2]), hi(box[3], box[4], box[5]);
    const auto& grid = sc.world.grid;
    const double tol = 1e-9;
    for (int e = 0; e < grid.total_elements(); ++e) {
      const auto [elo, ehi] = grid.element_box(e);
      bool inside = true;
      for (int d = 0; d < 3; ++d)
        inside &= elo[d] >= lo[d] - tol && ehi[d] <= hi[d] + tol;
      if (!inside) continue;
      const Vec3 h = ehi - elo;
      for (int kz = 0; kz < ppc; ++kz)
        for (int ky = 0; ky < ppc; ++ky)
          for (int kx = 0; kx < ppc; ++kx) {
            MaterialPoint p;
            p.half = p.half0 = h / (2.0 * ppc);
            p.x = elo + Vec3(h[0] * (2 * kx + 1), h[1] * (2 * ky + 1), h[2] * (2 * kz + 1)) /
                            (2.0 * ppc);
            p.V = p.V0 = p.domain_volume();
            p.mass = sc.world.materials[mat].rho * p.V0;
            p.material = mat;
            p.E_p = sc.world.materials[mat].params.E;
            sc.world.points.push_back(p);
          }
    }
    if (sc.world.points.empty())
      throw ConfigError(ctx + ": region produced no material points (check element alignment)");
  }

  // Optional geostatic initialisation (stress state plus depth stiffness).
  if (jbody.contains("geostatic")) {
    const auto& jg = jbody.at("geostatic");
    const std::string ctx = "body.geostatic";
    const double surface_z = req<double>(jg, "surface_z", ctx);
    for (auto& p : sc.world.points) {
      if (!dp_params.count(p.material)) continue;
      const auto& dp = dp_params.at(p.material);
      const double depth = std::max(0.0, surface_z - p.x[2]);
      p.E_p = depth_stiffness(depth, dp);
      const double sv = -dp.unit_weight * depth;
      const Mat3 tau0 = Vec3(dp.K_0 * sv, dp.K_0 * sv, sv).asDiagonal();
      ConstitutiveParams cp = sc.world.materials[p.material].params;
      cp.E = p.E_p;
      p.Fe = fe_from_stress(tau0, cp);
      p.sigma = tau0;  // J = 1 initially
    }
  }

  // Rigid bodies.
  if (j.contains("rigid_bodies"))
    for (const auto& jb : j.at("rigid_bodies")) {
      RigidBodyInstance body;
      body.name = req<std::string>(jb, "name", "rigid_bodies[]");
      const std::string ctx = "rigid body '" + body.name + "'";
      body.mesh = detail::mesh_from_json(
          jb.contains("mesh") ? jb.at("mesh") : throw ConfigError(ctx + ": missing field 'mesh'"),
          ctx, base_dir);
      body.mu = opt<double>(jb, "friction", 0.0);
      if (body.mu < 0.0) throw ConfigError(ctx + ": friction must be >= 0");
      body.penalty_factor_n = opt<double>(jb, "penalty_factor_normal", 50.0);
      body.penalty_factor_t = opt<double>(jb, "penalty_factor_tangential", 25.0);

      const auto& jmotion = jb.contains("motion")
                                ? jb.at("motion")
                                : throw ConfigError(ctx + ": missing field 'motion'");
      const std::string mtype = req<std::string>(jmotion, "type", ctx + ".motion");
      if (mtype == "prescribed") {
        body.prescribed = true;
        body.step_displacement = req_vec3(jmotion, "displacement_per_step", ctx + ".motion");
        // Pose-only frame from the mesh bounding box.
        Vec3 lo = Vec3::Constant(std::numeric_limits<double>::max()), hi = -lo;
        for (const auto& v : body.mesh.vertices) {
          lo = lo.cwiseMin(v);
          hi = hi.cwiseMax(v);
        }
        const Vec3 c = 0.5 * (lo + hi);
        body.frame.x = {c, c + Vec3(std::max(1.0, (hi - lo).norm()), 0, 0)};
        body.frame.mass = {0.0, 0.0};
        body.frame.init_arrays();
      } else if (mtype == "free") {
        const auto& jf = jmotion.contains("frame")
                             ? jmotion.at("frame")
                             : throw ConfigError(ctx + ".motion: missing field 'frame'");
        const std::string ftype = opt<std::string>(jf, "type", std::string("nodes"));
        if (ftype == "ring") {
          body.frame = make_ring_frame(req_vec3(jf, "center", ctx), req<double>(jf, "ring_diameter", ctx),
                                       opt<int>(jf, "n_nodes", 100), req<double>(jf, "node_mass", ctx),
                                       req<double>(jf, "stiffness", ctx));
        } else {
          TrussFrame f;
          for (const auto& jn : jf.contains("nodes")
                                    ? jf.at("nodes")
                                    : throw ConfigError(ctx + ": frame missing 'nodes'")) {
            f.x.push_back(req_vec3(jn, "position", ctx + ".frame.nodes[]"));
            f.mass.push_back(opt<double>(jn, "mass", 0.0));
          }
          if (jf.contains("elements"))
            for (const auto& je : jf.at("elements")) {
              const auto arr = je.get<std::vector<double>>();
              if (arr.size() != 3) throw ConfigError(ctx + ": frame element must be [i, j, stiffness]");
              f.elements.push_back({static_cast<int>(arr[0]), static_cast<int>(arr[1]), arr[2], 0.0});
            }
          f.driver_m = opt<int>(jf, "driver_m", 0);
          f.driver_d = opt<int>(jf, "driver_d", 1);
          f.init_arrays();
          if (opt<bool>(jf, "fix_y", true))
            for (auto& fd : f.fixed_dof) fd[1] = true;
          if (jf.contains("fixed"))
            for (const auto& jfix : jf.at("fixed")) {
              const auto arr = jfix.get<std::vector<int>>();
              if (arr.size() != 2) throw ConfigError(ctx + ": frame 'fixed' entries are [node, axis]");
              f.fixed_dof[arr[0]][arr[1]] = true;
            }
          body.frame = f;
        }
      } else {
        throw ConfigError(ctx + ".motion: unknown type '" + mtype + "'");
      }
      body.calibrate();
      sc.world.bodies.push_back(std::move(body));
    }

  // Boundary conditions.
  if (j.contains("boundary_conditions")) {
    const auto& jbc = j.at("boundary_conditions");
    sc.world.fix_all_boundary_nodes = opt<bool>(jbc, "fix_all", false);
    sc.world.fix_all_active_nodes = opt<bool>(jbc, "fix_all_active", false);
    if (jbc.contains("rollers"))
      for (const auto& jr : jbc.at("rollers")) {
        if (jr.is_object()) {
          const std::string ax = req<std::string>(jr, "axis", "boundary_conditions.rollers[]");
          const double coord = req<double>(jr, "coord", "boundary_conditions.rollers[]");
          if (ax != "x" && ax != "y" && ax != "z")
            throw ConfigError("boundary_conditions.rollers: axis must be x, y or z");
          sc.world.rollers.push_back({ax == "x" ? 0 : ax == "y" ? 1 : 2, coord});
          continue;
        }
        const std::string plane = jr.get<std::string>();
        const auto& g = sc.world.grid;
        if (plane == "x_min") sc.world.rollers.push_back({0, g.min_corner()[0]});
        else if (plane == "x_max") sc.world.rollers.push_back({0, g.max_corner()[0]});
        else if (plane == "y_min") sc.world.rollers.push_back({1, g.min_corner()[1]});
        else if (plane == "y_max") sc.world.rollers.push_back({1, g.max_corner()[1]});
        else if (plane == "z_min") sc.world.rollers.push_back({2, g.min_corner()[2]});
        else if (plane == "z_max") sc.world.rollers.push_back({2, g.max_corner()[2]});
        else throw ConfigError("boundary_conditions.rollers: unknown plane '" + plane + "'");
      }
    if (jbc.contains("fixed_planes"))
      for (const auto& jf : jbc.at("fixed_planes")) {
        const std::string ax = req<std::string>(jf, "axis", "boundary_conditions.fixed_planes[]");
        const double coord = req<double>(jf, "coord", "boundary_conditions.fixed_planes[]");
        if (ax != "x" && ax != "y" && ax != "z")
          throw ConfigError("boundary_conditions.fixed_planes: axis must be x, y or z");
        sc.world.fixed_planes.push_back({ax == "x" ? 0 : ax == "y" ? 1 : 2, coord});
      }
  }

  if (j.contains("gravity")) sc.world.gravity = req_vec3(j, "gravity", "config");

  // Solver block.
  const auto& js = j.contains("solver") ? j.at("solver")
                                        : throw ConfigError("config: missing field 'solver'");
  sc.newmark.gamma = opt<double>(js, "gamma", 0.5);
  sc.newmark.beta = opt<double>(js, "beta", 0.25);
  sc.newmark.dt = req<double>(js, "dt", "solver");
  sc.newmark.validate();
  sc.n_steps = req<int>(js, "steps", "solver");
  sc.settings.quasi_static = opt<bool>(js, "quasi_static", false);
  sc.settings.tol_rel = opt<double>(js, "newton_tol", 1e-6);
  sc.settings.tol_abs = opt<double>(js, "newton_abs_tol", 1e-9);
  sc.settings.max_iterations = opt<int>(js, "max_iterations", 25);
  sc.settings.halving_cap = opt<int>(js, "halving_cap", 10);
  sc.settings.stab_mass_scale = opt<bool>(js, "stabilise_mass", true) ? 1.0 : 0.0;
  sc.settings.stab_stiff_scale = opt<bool>(js, "stabilise_stiffness", true) ? 1.0 : 0.0;
  sc.settings.gravity_ramp_steps = opt<int>(js, "gravity_ramp_steps", 0);
  sc.settings.init_acceleration = opt<bool>(js, "init_acceleration", true);
  sc.settings.induce_failure_at_step = opt<int>(js, "induce_failure_at_step", -1);

  // Output block.
  if (j.contains("output")) {
    const auto& jo = j.at("output");
    sc.out.directory = opt<std::string>(jo, "directory", sc.out.directory);
    sc.out.cadence = opt<int>(jo, "cadence", 1);
    sc.out.vtk = opt<bool>(jo, "vtk", true);
    sc.out.rigid_stl = opt<bool>(jo, "rigid_stl", true);
    sc.out.contact_csv = opt<bool>(jo, "contact_csv", true);
    sc.out.convergence_csv = opt<bool>(jo, "convergence_csv", true);
    sc.out.history_csv = opt<bool>(jo, "history_csv", true);
    sc.out.checkpoint_cadence = opt<int>(jo, "checkpoint_cadence", 0);
    sc.out.summary = opt<bool>(jo, "summary", true);
  }

  sc.validate();
  return sc;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

inline Scenario::RunSummary Scenario::run(const StepCallback& callback) {
  RunSummary summary;
  summary.output_directory = resolve_output();
  const std::filesystem::path dir = summary.output_directory;

  std::optional<io::CsvWriter> history, contact_log, convergence;
  if (out.history_csv) {
    history.emplace((dir / "history.csv").string());
    std::vector<std::string> head = {"step", "time"};
    for (const auto& b : world.bodies) {
      for (const char* c : {"_x", "_y", "_z"}) head.push_back(b.name + "_driver" + c);
      for (const char* c : {"_fx", "_fy", "_fz"}) head.push_back(b.name + "_contact" + c);
    }
    history->row(head);
  }
  if (out.contact_csv) {
    contact_log.emplace((dir / "contact.csv").string());
    contact_log->row({"step", "point", "corner", "body", "tri", "gap", "p_n", "p_t", "branch"});
  }
  if (out.convergence_csv) {
    convergence.emplace((dir / "convergence.csv").string());
    convergence->row({"step", "halving_depth", "iteration", "residual"});
  }

  std::vector<Vec3> initial_positions;
  initial_positions.reserve(world.points.size());
  for (const auto& p : world.points) initial_positions.push_back(p.x);
  for (const auto& p : world.points) summary.mass_initial += p.mass;

  const auto write_outputs = [&](int step) {
    char tag[16];
    std::snprintf(tag, sizeof(tag), "%06d", step);
    if (out.vtk)
      io::write_vtk_points((dir / ("points_" + std::string(tag) + ".vtk")).string(), world.points,
                           initial_positions);
    if (out.rigid_stl)
      for (const auto& b : world.bodies)
        io::write_stl((dir / (b.name + "_" + std::string(tag) + ".stl")).string(), b.mesh,
                      b.x_surf);
    if (out.checkpoint_cadence > 0 && step > 0 && step % out.checkpoint_cadence == 0)
      io::save_checkpoint(world, (dir / ("checkpoint_" + std::string(tag) + ".json")).string());
  };

  write_outputs(0);

  if (!settings.quasi_static && settings.init_acceleration && world.step_index == 0) {
    StepSolver init(world, settings, newmark);
    init.begin(1.0, false);
    init.initialise_accelerations();
  }

  for (int step = 0; step < n_steps; ++step) {
    TimestepReport rep;
    try {
      rep = run_timestep(world, settings, newmark);
    } catch (const std::exception& e) {
      const std::string dump = (dir / "abort_state.json").string();
      io::save_checkpoint(world, dump);
      throw NumericalError(std::string(e.what()) + " (state dumped to " + dump + ")");
    }

    StepRecord rec;
    rec.time = world.time;
    rec.dt = rep.dt_used;
    rec.halving_depth = rep.halving_depth;
    rec.iterations = rep.newton.iterations;
    rec.body_force = rep.body_contact_force;
    rec.max_penetration = rep.max_penetration;
    rec.active_pairs = rep.active_pairs;
    rec.reset_corrections = rep.reset_corrections;
    rec.reset_stalls = rep.reset_stalls;
    for (const auto& b : world.bodies) rec.driver_position.push_back(b.frame.x[b.frame.driver_m]);
    summary.history.push_back(rec);
    summary.total_halvings += rep.halving_depth > 0 ? 1 : 0;

    if (history) {
      std::vector<double> vals;
      for (std::size_t b = 0; b < world.bodies.size(); ++b) {
        const Vec3& xm = rec.driver_position[b];
        const Vec3& f = rec.body_force[b];
        for (int d = 0; d < 3; ++d) vals.push_back(xm[d]);
        for (int d = 0; d < 3; ++d) vals.push_back(f[d]);
      }
      std::vector<std::string> prefix = {std::to_string(world.step_index),
                                         std::to_string(world.time)};
      history->row_values(vals, prefix);
    }
    if (contact_log)
      for (const auto& d : rep.diagnostics)
        contact_log->row({std::to_string(world.step_index), std::to_string(d.point),
                          std::to_string(d.corner), std::to_string(d.body), std::to_string(d.tri),
                          std::to_string(d.gap), std::to_string(d.p_n), std::to_string(d.p_t_norm),
                          d.slip ? "slip" : "stick"});
    if (convergence)
      for (std::size_t it = 0; it < rep.newton.residual_history.size(); ++it)
        convergence->row({std::to_string(world.step_index), std::to_string(rep.halving_depth),
                          std::to_string(it), std::to_string(rep.newton.residual_history[it])});

    if (callback) callback(world, rep);
    if (out.cadence > 0 && (step + 1) % out.cadence == 0) write_outputs(step + 1);
    summary.steps = step + 1;
  }

  summary.final_time = world.time;
  for (const auto& p : world.points) summary.mass_final += p.mass;

  if (out.summary) {
    nlohmann::json js;
    js["title"] = title;
    js["steps"] = summary.steps;
    js["final_time"] = summary.final_time;
    js["mass_initial"] = summary.mass_initial;
    js["mass_final"] = summary.mass_final;
    js["total_halvings"] = summary.total_halvings;
    auto& jb = js["bodies"] = nlohmann::json::array();
    for (std::size_t b = 0; b < world.bodies.size(); ++b) {
      nlohmann::json e;
      e["name"] = world.bodies[b].name;
      e["driver_m"] = io::to_json(world.bodies[b].frame.x[world.bodies[b].frame.driver_m]);
      if (!summary.history.empty())
        e["final_contact_force"] = io::to_json(summary.history.back().body_force[b]);
      jb.push_back(e);
    }
    std::ofstream outp(dir / "summary.json", std::ios::binary);
    outp << js.dump(1, '\t') << '\n';
  }
  return summary;
}

}  // namespace mpm
