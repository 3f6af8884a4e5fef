#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "mpm/points.hpp"
#include "mpm/rigid.hpp"
#include "mpm/solver.hpp"
#include "mpm/types.hpp"

namespace mpm::io {

// ---------------------------------------------------------------------------
// CSV (RFC 4180: comma separated, CRLF line endings, quotes when needed)
// ---------------------------------------------------------------------------

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw ConfigError("cannot open CSV file for writing: " + path);
    out_ << std::setprecision(17);
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      write_field(fields[i]);
    }
    out_ << "\r\n";
  }

  void row_values(const std::vector<double>& values, const std::vector<std::string>& prefix = {}) {
    std::vector<std::string> fields = prefix;
    for (double v : values) {
      std::ostringstream ss;
      ss << std::setprecision(17) << v;
      fields.push_back(ss.str());
    }
    row(fields);
  }

 private:
  void write_field(const std::string& f) {
    if (f.find_first_of(",\"\r\n") == std::string::npos) {
      out_ << f;
      return;
    }
    out_ << '"';
    for (char c : f) {
      if (c == '"') out_ << '"';
      out_ << c;
    }
    out_ << '"';
  }
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// VTK legacy point-cloud output
// ---------------------------------------------------------------------------

/// Legacy ASCII unstructured grid of vertices with displacement, stress and
/// det(F) at every material point.
inline void write_vtk_points(const std::string& path, const std::vector<MaterialPoint>& points,
                             const std::vector<Vec3>& initial_positions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open VTK file for writing: " + path);
  out << std::setprecision(12);
  const std::size_t n = points.size();
  out << "# vtk DataFile Version 3.0\n";
  out << "material point cloud\n";
  out << "ASCII\n";
  out << "DATASET UNSTRUCTURED_GRID\n";
  out << "POINTS " << n << " double\n";
  for (const auto& p : points) out << p.x[0] << ' ' << p.x[1] << ' ' << p.x[2] << '\n';
  out << "CELLS " << n << ' ' << 2 * n << '\n';
  for (std::size_t i = 0; i < n; ++i) out << "1 " << i << '\n';
  out << "CELL_TYPES " << n << '\n';
  for (std::size_t i = 0; i < n; ++i) out << "1\n";
  out << "POINT_DATA " << n << '\n';
  out << "VECTORS displacement double\n";
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 u = points[i].x - initial_positions[i];
    out << u[0] << ' ' << u[1] << ' ' << u[2] << '\n';
  }
  out << "TENSORS stress double\n";
  for (const auto& p : points) {
    for (int r = 0; r < 3; ++r)
      out << p.sigma(r, 0) << ' ' << p.sigma(r, 1) << ' ' << p.sigma(r, 2) << '\n';
    out << '\n';
  }
  out << "SCALARS det_f double 1\n";
  out << "LOOKUP_TABLE default\n";
  for (const auto& p : points) out << p.F.determinant() << '\n';
}

// ---------------------------------------------------------------------------
// Triangle mesh ingestion: STL (ascii/binary) and OBJ, weld + orientation
// ---------------------------------------------------------------------------

inline void write_stl(const std::string& path, const TriMesh& mesh, const std::vector<Vec3>& x) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open STL file for writing: " + path);
  out << std::setprecision(12);
  out << "solid surface\n";
  for (const auto& t : mesh.triangles) {
    const Vec3 n = (x[t[1]] - x[t[0]]).cross(x[t[2]] - x[t[0]]).normalized();
    out << "facet normal " << n[0] << ' ' << n[1] << ' ' << n[2] << "\n outer loop\n";
    for (int k = 0; k < 3; ++k)
      out << "  vertex " << x[t[k]][0] << ' ' << x[t[k]][1] << ' ' << x[t[k]][2] << '\n';
    out << " endloop\nendfacet\n";
  }
  out << "endsolid surface\n";
}

namespace detail {

inline TriMesh read_stl_binary(std::ifstream& in, std::uint32_t n_tri) {
  TriMesh mesh;
  mesh.vertices.reserve(3 * n_tri);
  mesh.triangles.reserve(n_tri);
  for (std::uint32_t t = 0; t < n_tri; ++t) {
    float buf[12];
    in.read(reinterpret_cast<char*>(buf), sizeof(buf));
    char attr[2];
    in.read(attr, 2);
    if (!in) throw MeshError("truncated binary STL");
    const int base = static_cast<int>(mesh.vertices.size());
    for (int k = 0; k < 3; ++k)
      mesh.vertices.emplace_back(buf[3 + 3 * k], buf[4 + 3 * k], buf[5 + 3 * k]);
    mesh.triangles.emplace_back(base, base + 1, base + 2);
  }
  return mesh;
}

inline TriMesh read_stl_ascii(const std::string& path) {
  std::ifstream in(path);
  TriMesh mesh;
  std::string tok;
  std::vector<Vec3> verts;
  while (in >> tok) {
    if (tok == "vertex") {
      Vec3 v;
      in >> v[0] >> v[1] >> v[2];
      verts.push_back(v);
      if (verts.size() == 3) {
        const int base = static_cast<int>(mesh.vertices.size());
        for (const auto& w : verts) mesh.vertices.push_back(w);
        mesh.triangles.emplace_back(base, base + 1, base + 2);
        verts.clear();
      }
    }
  }
  if (mesh.triangles.empty()) throw MeshError("no triangles found in STL: " + path);
  return mesh;
}

}  // namespace detail

inline TriMesh read_stl(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw ConfigError("cannot open STL file: " + path);
  const auto size = in.tellg();
  if (size >= 84) {
    in.seekg(80);
    std::uint32_t n_tri = 0;
    in.read(reinterpret_cast<char*>(&n_tri), 4);
    if (static_cast<std::uint64_t>(size) == 84ull + 50ull * n_tri && n_tri > 0)
      return detail::read_stl_binary(in, n_tri);
  }
  return detail::read_stl_ascii(path);
}

inline TriMesh read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open OBJ file: " + path);
  TriMesh mesh;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      Vec3 v;
      ss >> v[0] >> v[1] >> v[2];
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> ids;
      std::string f;
      while (ss >> f) ids.push_back(std::stoi(f.substr(0, f.find('/'))) - 1);
      if (ids.size() < 3) throw MeshError("OBJ face with fewer than 3 vertices");
      for (std::size_t k = 2; k < ids.size(); ++k)  // fan-triangulate
        mesh.triangles.emplace_back(ids[0], ids[k - 1], ids[k]);
    }
  }
  if (mesh.triangles.empty()) throw MeshError("no faces found in OBJ: " + path);
  return mesh;
}

/// Merge duplicate vertices within 1e-9 of the bounding-box diagonal and drop
/// degenerate triangles.
inline TriMesh weld_mesh(const TriMesh& in, double rel_tol = 1e-9) {
  const double tol = std::max(mesh_bbox_diagonal(in) * rel_tol, 1e-300);
  std::unordered_map<std::int64_t, std::vector<int>> cells;
  const auto key = [&](const Vec3& v) {
    const std::int64_t ix = static_cast<std::int64_t>(std::floor(v[0] / tol));
    const std::int64_t iy = static_cast<std::int64_t>(std::floor(v[1] / tol));
    const std::int64_t iz = static_cast<std::int64_t>(std::floor(v[2] / tol));
    return (ix * 73856093) ^ (iy * 19349663) ^ (iz * 83492791);
  };
  TriMesh out;
  std::vector<int> remap(in.vertices.size());
  for (std::size_t v = 0; v < in.vertices.size(); ++v) {
    const Vec3& p = in.vertices[v];
    int found = -1;
    for (std::int64_t dx = -1; dx <= 1 && found < 0; ++dx)
      for (std::int64_t dy = -1; dy <= 1 && found < 0; ++dy)
        for (std::int64_t dz = -1; dz <= 1 && found < 0; ++dz) {
          const Vec3 probe = p + tol * Vec3(static_cast<double>(dx), static_cast<double>(dy),
                                            static_cast<double>(dz));
          const auto it = cells.find(key(probe));
          if (it == cells.end()) continue;
          for (int cand : it->second)
            if ((out.vertices[cand] - p).norm() <= tol) {
              found = cand;
              break;
            }
        }
    if (found < 0) {
      found = static_cast<int>(out.vertices.size());
      out.vertices.push_back(p);
      cells[key(p)].push_back(found);
    }
    remap[v] = found;
  }
  for (const auto& t : in.triangles) {
    const Eigen::Vector3i r(remap[t[0]], remap[t[1]], remap[t[2]]);
    if (r[0] == r[1] || r[1] == r[2] || r[0] == r[2]) continue;
    const Vec3 n = (out.vertices[r[1]] - out.vertices[r[0]])
                       .cross(out.vertices[r[2]] - out.vertices[r[0]]);
    if (n.norm() <= tol * tol) continue;
    out.triangles.push_back(r);
  }
  if (out.triangles.empty()) throw MeshError("mesh collapsed during welding");
  return out;
}

/// Verify consistent winding; flip a closed mesh whose volume is negative so
/// normals point outward.
inline void validate_and_orient(TriMesh* mesh) {
  std::map<std::pair<int, int>, int> edge_dir;  // directed edge -> count
  for (const auto& t : mesh->triangles)
    for (int k = 0; k < 3; ++k) {
      const int a = t[k], b = t[(k + 1) % 3];
      edge_dir[{a, b}] += 1;
    }
  bool closed = true;
  for (const auto& [edge, count] : edge_dir) {
    if (count > 1) throw MeshError("inconsistent triangle winding or non-manifold edge");
    const auto rev = edge_dir.find({edge.second, edge.first});
    if (rev == edge_dir.end()) closed = false;
  }
  if (closed) {
    double vol6 = 0.0;
    for (const auto& t : mesh->triangles)
      vol6 += mesh->vertices[t[0]].dot(mesh->vertices[t[1]].cross(mesh->vertices[t[2]]));
    if (vol6 < 0.0)
      for (auto& t : mesh->triangles) std::swap(t[1], t[2]);
  }
}

inline TriMesh load_mesh(const std::string& path) {
  const auto ext = std::filesystem::path(path).extension().string();
  TriMesh mesh;
  if (ext == ".stl" || ext == ".STL")
    mesh = read_stl(path);
  else if (ext == ".obj" || ext == ".OBJ")
    mesh = read_obj(path);
  else
    throw ConfigError("unsupported rigid mesh format: " + path);
  mesh = weld_mesh(mesh);
  validate_and_orient(&mesh);
  return mesh;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const Vec3& v) { return {v[0], v[1], v[2]}; }
inline nlohmann::json to_json(const Mat3& m) {
  nlohmann::json out = nlohmann::json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.push_back(m(i, j));
  return out;
}
inline Vec3 vec3_from(const nlohmann::json& j) {
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}
inline Mat3 mat3_from(const nlohmann::json& j) {
  Mat3 m;
  for (int i = 0; i < 3; ++i)
    for (int j2 = 0; j2 < 3; ++j2) m(i, j2) = j[3 * i + j2];
  return m;
}

inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const World& w, const std::string& path) {
  nlohmann::json j;
  j["version"] = kCheckpointVersion;
  j["time"] = w.time;
  j["step"] = w.step_index;
  auto& pts = j["points"] = nlohmann::json::array();
  for (const auto& p : w.points) {
    nlohmann::json pj;
    pj["x"] = to_json(p.x);
    pj["v"] = to_json(p.v);
    pj["a"] = to_json(p.a);
    pj["half"] = to_json(p.half);
    pj["half0"] = to_json(p.half0);
    pj["mass"] = p.mass;
    pj["V"] = p.V;
    pj["V0"] = p.V0;
    pj["F"] = to_json(p.F);
    pj["Fe"] = to_json(p.Fe);
    pj["sigma"] = to_json(p.sigma);
    pj["material"] = p.material;
    pj["E_p"] = p.E_p;
    auto& cj = pj["corners"] = nlohmann::json::array();
    for (const auto& c : p.corners) {
      nlohmann::json e;
      e["has_prev"] = c.has_prev;
      e["body_prev"] = c.body_prev;
      e["tri_prev"] = c.tri_prev;
      e["xi_prev"] = {c.xi_prev[0], c.xi_prev[1]};
      e["p_t_prev"] = to_json(c.p_t_prev);
      e["had_face_old"] = c.had_face_old;
      e["gap_old"] = c.gap_old;
      cj.push_back(e);
    }
    pts.push_back(pj);
  }
  auto& bodies = j["bodies"] = nlohmann::json::array();
  for (const auto& b : w.bodies) {
    nlohmann::json bj;
    bj["name"] = b.name;
    auto dump = [](const std::vector<Vec3>& vs) {
      nlohmann::json out = nlohmann::json::array();
      for (const auto& v : vs) out.push_back(to_json(v));
      return out;
    };
    bj["frame_x"] = dump(b.frame.x);
    bj["frame_v"] = dump(b.frame.v);
    bj["frame_a"] = dump(b.frame.a);
    bodies.push_back(bj);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
  out << j.dump(1, '\t') << '\n';
}

inline void load_checkpoint(World* w, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw ConfigError("checkpoint version mismatch");
  w->time = j.at("time").get<double>();
  w->step_index = j.at("step").get<int>();
  const auto& pts = j.at("points");
  if (pts.size() != w->points.size())
    throw ConfigError("checkpoint does not match the scenario point count");
  for (std::size_t i = 0; i < w->points.size(); ++i) {
    auto& p = w->points[i];
    const auto& pj = pts[i];
    p.x = vec3_from(pj.at("x"));
    p.v = vec3_from(pj.at("v"));
    p.a = vec3_from(pj.at("a"));
    p.half = vec3_from(pj.at("half"));
    p.half0 = vec3_from(pj.at("half0"));
    p.mass = pj.at("mass").get<double>();
    p.V = pj.at("V").get<double>();
    p.V0 = pj.at("V0").get<double>();
    p.F = mat3_from(pj.at("F"));
    p.Fe = mat3_from(pj.at("Fe"));
    p.sigma = mat3_from(pj.at("sigma"));
    p.material = pj.at("material").get<int>();
    p.E_p = pj.at("E_p").get<double>();
    const auto& cj = pj.at("corners");
    for (int c = 0; c < 8; ++c) {
      auto& cs = p.corners[c];
      cs = ContactState{};
      cs.has_prev = cj[c].at("has_prev").get<bool>();
      cs.body_prev = cj[c].at("body_prev").get<int>();
      cs.tri_prev = cj[c].at("tri_prev").get<int>();
      cs.xi_prev = Vec2(cj[c].at("xi_prev")[0], cj[c].at("xi_prev")[1]);
      cs.p_t_prev = vec3_from(cj[c].at("p_t_prev"));
      cs.had_face_old = cj[c].at("had_face_old").get<bool>();
      cs.gap_old = cj[c].at("gap_old").get<double>();
    }
  }
  const auto& bodies = j.at("bodies");
  if (bodies.size() != w->bodies.size())
    throw ConfigError("checkpoint does not match the scenario body count");
  for (std::size_t b = 0; b < w->bodies.size(); ++b) {
    auto& fr = w->bodies[b].frame;
    const auto load = [&](const char* name, std::vector<Vec3>* out) {
      const auto& arr = bodies[b].at(name);
      if (arr.size() != out->size()) throw ConfigError("checkpoint frame size mismatch");
      for (std::size_t n = 0; n < out->size(); ++n) (*out)[n] = vec3_from(arr[n]);
    };
    load("frame_x", &fr.x);
    load("frame_v", &fr.v);
    load("frame_a", &fr.a);
    w->bodies[b].update_surface();
  }
}

}  // namespace mpm::io
