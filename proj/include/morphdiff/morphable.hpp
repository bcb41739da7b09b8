// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Linear blendshape morphable model: identity and expression coefficients to
// mesh vertices, plus designated keypoint vertices.

#pragma once

#include <map>
#include <optional>
#include <set>

#include "morphdiff/archive.hpp"
#include "morphdiff/geometry.hpp"

namespace morphdiff {

using Face = std::array<std::int32_t, 3>;

/// Raised when a PCK normalizer collapses (coincident eye corners).
class DegenerateNormalizer : public RuntimeFault {
 public:
  using RuntimeFault::RuntimeFault;
};

struct MorphCoeffs {
  Eigen::VectorXd identity;
  Eigen::VectorXd expression;
};

struct MorphableModel {
  Points template_vertices;
  /// (3 * n_v) x I; row 3v + a is the a-th coordinate of vertex v.
  Eigen::MatrixXd identity_basis;
  /// (3 * n_v) x E, same row layout.
  Eigen::MatrixXd expression_basis;
  std::vector<Face> faces;
  std::vector<std::int32_t> keypoint_indices;
  /// Positions within keypoint_indices of the two inner eye corners.
  std::pair<int, int> eye_corner_slots{0, 1};
  /// Positions within keypoint_indices of the mouth keypoints (for a mouth-only PCK).
  std::vector<int> mouth_slots;
  /// Optional appearance model: n_v x 3 base albedo and (3 * n_v) x A basis.
  Points albedo;
  Eigen::MatrixXd albedo_basis;

  Index vertex_count() const { return template_vertices.rows(); }
  Index identity_dim() const { return identity_basis.cols(); }
  Index expression_dim() const { return expression_basis.cols(); }
};

inline void validate(const MorphableModel& m) {
  const Index nv = m.vertex_count();
  if (nv < 3) throw ConfigError("morphable model needs at least 3 vertices");
  if (m.identity_basis.rows() != 3 * nv || m.expression_basis.rows() != 3 * nv) {
    throw ConfigError("basis rows must equal 3 * vertex count");
  }
  if (m.identity_dim() < 1 || m.expression_dim() < 1) throw ConfigError("identity and expression dims must be >= 1");
  if (!m.template_vertices.allFinite() || !m.identity_basis.allFinite() || !m.expression_basis.allFinite()) {
    throw ConfigError("morphable model contains non-finite values");
  }
  if (m.faces.empty()) throw ConfigError("morphable model needs at least one triangle");
  for (const Face& f : m.faces) {
    for (auto v : f) {
      if (v < 0 || v >= nv) throw ConfigError("face index out of range");
    }
  }
  std::set<std::int32_t> seen;
  for (auto k : m.keypoint_indices) {
    if (k < 0 || k >= nv) throw ConfigError("keypoint index out of range");
    if (!seen.insert(k).second) throw ConfigError("keypoint indices must be distinct");
  }
  const int k = static_cast<int>(m.keypoint_indices.size());
  const auto [a, b] = m.eye_corner_slots;
  if (k > 0 && (a == b || a < 0 || b < 0 || a >= k || b >= k)) throw ConfigError("invalid eye corner slots");
  for (int s : m.mouth_slots) {
    if (s < 0 || s >= k) throw ConfigError("invalid mouth slot");
  }
  if (m.albedo.rows() != 0 && m.albedo.rows() != nv) throw ConfigError("albedo must have one row per vertex");
  if (m.albedo_basis.size() != 0 && m.albedo_basis.rows() != 3 * nv) throw ConfigError("albedo basis rows mismatch");
}

/// V = template + identity_basis * beta + expression_basis * theta.
inline Points build_mesh(const MorphableModel& m, const MorphCoeffs& c) {
  if (c.identity.size() != m.identity_dim() || c.expression.size() != m.expression_dim()) {
    throw ConfigError("coefficient dims (" + std::to_string(c.identity.size()) + ", " +
                      std::to_string(c.expression.size()) + ") do not match model (" +
                      std::to_string(m.identity_dim()) + ", " + std::to_string(m.expression_dim()) + ")");
  }
  Points v = m.template_vertices;
  Eigen::Map<Eigen::VectorXd> flat(v.data(), v.size());
  flat.noalias() += m.identity_basis * c.identity;
  flat.noalias() += m.expression_basis * c.expression;
  return v;
}

inline Points mesh_keypoints_3d(const MorphableModel& m, const Points& vertices) {
  Points out(static_cast<Index>(m.keypoint_indices.size()), 3);
  for (std::size_t i = 0; i < m.keypoint_indices.size(); ++i) out.row(static_cast<Index>(i)) = vertices.row(m.keypoint_indices[i]);
  return out;
}

/// keypoints: k x 2 pixel coordinates (extra columns ignored).
inline double intercanthal_distance(const Eigen::MatrixXd& keypoints, std::pair<int, int> slots) {
  const auto [a, b] = slots;
  if (a == b || a < 0 || b < 0 || a >= keypoints.rows() || b >= keypoints.rows()) {
    throw ConfigError("invalid eye corner slots");
  }
  const double d = (keypoints.row(a).head<2>() - keypoints.row(b).head<2>()).norm();
  if (d < 1e-6) throw DegenerateNormalizer("intercanthal distance below 1e-6 pixels; exclude this frame");
  return d;
}

/// Projected 2D keypoints (k x 2) of a mesh in one camera.
inline Eigen::MatrixXd project_keypoints(const MorphableModel& m, const Points& vertices, const CameraParams& cam) {
  const Projection p = project(mesh_keypoints_3d(m, vertices), cam);
  return p.uvz.leftCols<2>();
}

/// Smooth per-vertex normals (area weighted).
inline Points vertex_normals(const Points& vertices, const std::vector<Face>& faces) {
  Points n = Points::Zero(vertices.rows(), 3);
  for (const Face& f : faces) {
    const Vec3 a = vertices.row(f[0]);
    const Vec3 b = vertices.row(f[1]);
    const Vec3 c = vertices.row(f[2]);
    const Vec3 fn = (b - a).cross(c - a);
    for (auto v : f) n.row(v) += fn.transpose();
  }
  for (Index i = 0; i < n.rows(); ++i) {
    const double len = n.row(i).norm();
    if (len > 0) n.row(i) /= len;
  }
  return n;
}

/// Unit icosphere; subdivision s has 10 * 4^s + 2 vertices (s = 3 gives 642).
inline std::pair<Points, std::vector<Face>> icosphere(int subdivisions) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> verts = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                             {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : verts) v.normalize();
  std::vector<Face> faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                             {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      verts.push_back((verts[a] + verts[b]).normalized());
      const int id = static_cast<int>(verts.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<Face> next;
    next.reserve(faces.size() * 4);
    for (const Face& f : faces) {
      const int ab = mid(f[0], f[1]);
      const int bc = mid(f[1], f[2]);
      const int ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }
  Points p(static_cast<Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) p.row(static_cast<Index>(i)) = verts[i].transpose();
  return {p, faces};
}

namespace detail {

inline Tensor<double> matrix_tensor(const Eigen::MatrixXd& m) {
  Tensor<double> t({m.rows(), m.cols()});
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) t[r * m.cols() + c] = m(r, c);
  }
  return t;
}

inline Eigen::MatrixXd tensor_matrix(const Tensor<double>& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) m(r, c) = t[r * m.cols() + c];
  }
  return m;
}

}  // namespace detail

inline void write_model(Archive& ar, const MorphableModel& m, const std::string& prefix = "") {
  auto put_matrix = [&](const std::string& name, const Eigen::MatrixXd& mat) {
    ar.put(prefix + name, detail::matrix_tensor(mat).cast<float>());
  };
  put_matrix("template", m.template_vertices);
  put_matrix("identity_basis", m.identity_basis);
  put_matrix("expression_basis", m.expression_basis);
  if (m.albedo.rows() > 0) put_matrix("albedo", m.albedo);
  if (m.albedo_basis.size() > 0) put_matrix("albedo_basis", m.albedo_basis);
  std::vector<std::int32_t> faces;
  for (const Face& f : m.faces) faces.insert(faces.end(), f.begin(), f.end());
  ar.put<std::int32_t>(prefix + "faces", {static_cast<Index>(m.faces.size()), 3}, faces);
  ar.put<std::int32_t>(prefix + "keypoint_indices", {static_cast<Index>(m.keypoint_indices.size())}, m.keypoint_indices);
  ar.meta[prefix + "morphable"] = {{"vertices", m.vertex_count()},
                                   {"identity_dim", m.identity_dim()},
                                   {"expression_dim", m.expression_dim()},
                                   {"eye_corner_slots", {m.eye_corner_slots.first, m.eye_corner_slots.second}},
                                   {"mouth_slots", m.mouth_slots}};
}

inline MorphableModel read_model(const Archive& ar, const std::string& prefix = "") {
  MorphableModel m;
  auto get_matrix = [&](const std::string& name) { return detail::tensor_matrix(ar.get<double>(prefix + name)); };
  m.template_vertices = get_matrix("template");
  m.identity_basis = get_matrix("identity_basis");
  m.expression_basis = get_matrix("expression_basis");
  if (ar.contains(prefix + "albedo")) m.albedo = get_matrix("albedo");
  if (ar.contains(prefix + "albedo_basis")) m.albedo_basis = get_matrix("albedo_basis");
  const auto faces = ar.get<std::int32_t>(prefix + "faces");
  for (Index i = 0; i < faces.dim(0); ++i) m.faces.push_back({faces[3 * i], faces[3 * i + 1], faces[3 * i + 2]});
  m.keypoint_indices = ar.get<std::int32_t>(prefix + "keypoint_indices").data;
  const auto& meta = ar.meta.at(prefix + "morphable");
  m.eye_corner_slots = {meta.at("eye_corner_slots").at(0).get<int>(), meta.at("eye_corner_slots").at(1).get<int>()};
  m.mouth_slots = meta.value("mouth_slots", std::vector<int>{});
  validate(m);
  return m;
}

/// Per-vertex colors from the appearance model; clamped to [0, 1].
inline Points vertex_colors(const MorphableModel& m, const Eigen::VectorXd& appearance) {
  if (m.albedo.rows() == 0) return Points::Constant(m.vertex_count(), 3, 0.7);
  Points c = m.albedo;
  if (m.albedo_basis.size() > 0) {
    if (appearance.size() != m.albedo_basis.cols()) throw ConfigError("appearance coefficient dim mismatch");
    Eigen::Map<Eigen::VectorXd> flat(c.data(), c.size());
    flat.noalias() += m.albedo_basis * appearance;
  }
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

}  // namespace morphdiff
