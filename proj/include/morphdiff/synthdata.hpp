// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Procedural "blob head" subjects: a morphable head model with localized
// expression blendshapes, a z-buffered Lambertian rasterizer, camera rigs,
// in-memory datasets and the (optionally shuffled) training item sampler.

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "morphdiff/image_io.hpp"
#include "morphdiff/morphable.hpp"
#include "morphdiff/rng.hpp"

namespace morphdiff::synth {

struct HeadModelConfig {
  int subdivisions = 3;
  Vec3 radii{0.27, 0.33, 0.29};
  int identity_dim = 8;
  int expression_dim = 6;
  /// World displacement at unit identity coefficient.
  double identity_scale = 0.012;
  /// World displacement at the center of an expression bump, unit coefficient.
  double expression_scale = 0.08;
  /// Color shift per unit appearance coefficient.
  double appearance_scale = 0.18;
};

inline constexpr int kMaxIdentityDim = 8;
inline constexpr int kMaxExpressionDim = 6;

namespace detail {

inline Vec3 on_sphere(double x, double y) {
  const double z2 = std::max(0.0, 1.0 - x * x - y * y);
  return Vec3(x, y, std::sqrt(z2)).normalized();
}

inline double bump(const Vec3& n, const Vec3& center, double radius) {
  const double w = std::exp(-(n - center).squaredNorm() / (2 * radius * radius));
  return w < 1e-3 ? 0.0 : w;
}

inline double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

inline double round_float(double v) { return static_cast<double>(static_cast<float>(v)); }

template <typename Derived>
void round_to_float(Eigen::MatrixBase<Derived>& m) {
  m = m.unaryExpr([](double v) { return round_float(v); });
}

}  // namespace detail

/// Names of the keypoints in MorphableModel::keypoint_indices order.
inline const std::vector<std::string>& keypoint_names() {
  static const std::vector<std::string> names = {
      "eye_inner_l", "eye_inner_r", "eye_outer_l", "eye_outer_r", "brow_inner_l", "brow_inner_r",
      "brow_outer_l", "brow_outer_r", "nose_tip", "nose_base", "mouth_corner_l", "mouth_corner_r",
      "upper_lip", "lower_lip", "chin", "forehead"};
  return names;
}

inline MorphableModel build_head_model(const HeadModelConfig& cfg) {
  using detail::bump;
  using detail::on_sphere;
  if (cfg.identity_dim < 1 || cfg.identity_dim > kMaxIdentityDim) throw ConfigError("identity_dim must be in [1, 8]");
  if (cfg.expression_dim < 1 || cfg.expression_dim > kMaxExpressionDim) {
    throw ConfigError("expression_dim must be in [1, 6]");
  }
  auto [dirs, faces] = icosphere(cfg.subdivisions);
  const Index nv = dirs.rows();
  MorphableModel m;
  m.faces = faces;
  m.template_vertices = dirs.array().rowwise() * cfg.radii.transpose().array();
  m.identity_basis = Eigen::MatrixXd::Zero(3 * nv, cfg.identity_dim);
  m.expression_basis = Eigen::MatrixXd::Zero(3 * nv, cfg.expression_dim);
  m.albedo.resize(nv, 3);
  m.albedo_basis = Eigen::MatrixXd::Zero(3 * nv, cfg.identity_dim);

  const Vec3 mouth_l = on_sphere(-0.3, -0.38);
  const Vec3 mouth_r = on_sphere(0.3, -0.38);
  for (Index v = 0; v < nv; ++v) {
    const Vec3 n = dirs.row(v);
    const double x = n.x(), y = n.y(), z = n.z();
    // Identity: low-order radial deformations.
    const double fields[kMaxIdentityDim] = {1.0, x, y, z, x * x - y * y, y * y - z * z, x * y, y * z};
    for (int i = 0; i < cfg.identity_dim; ++i) {
      for (int a = 0; a < 3; ++a) m.identity_basis(3 * v + a, i) = cfg.identity_scale * fields[i] * n[a];
    }
    // Expressions: localized displacements on the front (+z) of the head.
    std::array<Vec3, kMaxExpressionDim> disp;
    disp[0] = bump(n, on_sphere(0, -0.62), 0.28) * Vec3(0, -1, -0.25);                                   // jaw open
    disp[1] = bump(n, mouth_l, 0.15) * Vec3(-0.6, 0.8, 0) + bump(n, mouth_r, 0.15) * Vec3(0.6, 0.8, 0);  // smile
    disp[2] = bump(n, on_sphere(0, -0.65), 0.3) * Vec3(1, 0, 0);                                         // jaw lateral
    disp[3] = (bump(n, on_sphere(-0.3, 0.45), 0.15) + bump(n, on_sphere(0.3, 0.45), 0.15)) * Vec3(0, 1, 0);  // brows
    disp[4] = bump(n, on_sphere(0, -0.42), 0.16) * Vec3(-1.5 * x, 0, 0.8);                               // pucker
    disp[5] = (bump(n, on_sphere(-0.5, -0.2), 0.18) + bump(n, on_sphere(0.5, -0.2), 0.18)) * n;          // cheeks
    for (int e = 0; e < cfg.expression_dim; ++e) {
      for (int a = 0; a < 3; ++a) m.expression_basis(3 * v + a, e) = cfg.expression_scale * disp[e][a];
    }
    // Albedo: skin, hair cap, dark eyes and brows, red lips.
    Vec3 color(0.82, 0.62, 0.52);
    const double hair = std::max(detail::smoothstep(-0.05, -0.35, z), detail::smoothstep(0.62, 0.8, y));
    color = (1 - hair) * color + hair * Vec3(0.25, 0.17, 0.1);
    const double eyes = std::min(1.0, bump(n, on_sphere(-0.3, 0.25), 0.09) + bump(n, on_sphere(0.3, 0.25), 0.09));
    color = (1 - eyes) * color + eyes * Vec3(0.1, 0.1, 0.14);
    const double brows = std::min(1.0, bump(n, on_sphere(-0.3, 0.45), 0.08) + bump(n, on_sphere(0.3, 0.45), 0.08));
    color = (1 - brows) * color + brows * Vec3(0.3, 0.2, 0.12);
    const double lips = std::min(1.0, bump(n, on_sphere(-0.14, -0.4), 0.1) + bump(n, on_sphere(0.14, -0.4), 0.1) +
                                          bump(n, on_sphere(0, -0.4), 0.1));
    color = (1 - lips) * color + lips * Vec3(0.75, 0.18, 0.22);
    m.albedo.row(v) = color.transpose();
    const double skin = (1 - hair) * (1 - eyes);
    const Vec3 columns[kMaxIdentityDim] = {Vec3(1, 0, 0),        Vec3(0, 1, 0),         Vec3(0, 0, 1),
                                           Vec3(1, 1, 1) * skin, Vec3(1, 1, 1) * hair,  Vec3(1, 0, 0) * lips,
                                           Vec3(1, 0.5, 0) * x,  Vec3(0, 0.5, 1) * y};
    for (int i = 0; i < cfg.identity_dim; ++i) {
      for (int a = 0; a < 3; ++a) m.albedo_basis(3 * v + a, i) = cfg.appearance_scale * columns[i][a];
    }
  }

  const std::vector<Vec3> targets = {on_sphere(-0.12, 0.25), on_sphere(0.12, 0.25), on_sphere(-0.45, 0.25),
                                     on_sphere(0.45, 0.25),  on_sphere(-0.15, 0.48), on_sphere(0.15, 0.48),
                                     on_sphere(-0.45, 0.46), on_sphere(0.45, 0.46),  on_sphere(0, 0),
                                     on_sphere(0, -0.18),    mouth_l,                mouth_r,
                                     on_sphere(0, -0.3),     on_sphere(0, -0.52),    on_sphere(0, -0.78),
                                     on_sphere(0, 0.7)};
  std::vector<bool> used(static_cast<std::size_t>(nv), false);
  for (const Vec3& t : targets) {
    Index best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index v = 0; v < nv; ++v) {
      const double d = (dirs.row(v).transpose() - t).squaredNorm();
      if (!used[v] && d < best_d) {
        best_d = d;
        best = v;
      }
    }
    used[best] = true;
    m.keypoint_indices.push_back(static_cast<std::int32_t>(best));
  }
  m.eye_corner_slots = {0, 1};
  m.mouth_slots = {10, 11, 12, 13};

  // Keep in-memory models bit-identical to their 32-bit archive form.
  detail::round_to_float(m.template_vertices);
  detail::round_to_float(m.identity_basis);
  detail::round_to_float(m.expression_basis);
  detail::round_to_float(m.albedo);
  detail::round_to_float(m.albedo_basis);
  validate(m);
  return m;
}

struct ExpressionPreset {
  std::string name;
  Eigen::VectorXd coeffs;
};

/// Named expressions; the first `count` of: neutral, jaw_open, smile, jaw_left,
/// jaw_right, brow_raise, pucker, cheek_puff.
inline std::vector<ExpressionPreset> default_expressions(int count, int expression_dim) {
  struct Spec {
    const char* name;
    int basis;
    double value;
  };
  static const Spec specs[] = {{"neutral", -1, 0},   {"jaw_open", 0, 1.0},   {"smile", 1, 1.0},
                               {"jaw_left", 2, -1.0}, {"jaw_right", 2, 1.0}, {"brow_raise", 3, 1.0},
                               {"pucker", 4, 1.0},    {"cheek_puff", 5, 1.0}};
  if (count < 1 || count > 8) throw ConfigError("expression count must be in [1, 8]");
  std::vector<ExpressionPreset> out;
  for (int i = 0; i < count; ++i) {
    ExpressionPreset p{specs[i].name, Eigen::VectorXd::Zero(expression_dim)};
    if (specs[i].basis >= expression_dim) throw ConfigError(std::string("expression '") + specs[i].name +
                                                            "' needs a larger expression basis");
    if (specs[i].basis >= 0) p.coeffs[specs[i].basis] = specs[i].value;
    out.push_back(std::move(p));
  }
  return out;
}

struct Subject {
  MorphCoeffs coeffs;  // identity; expression left at zero
  Eigen::VectorXd appearance;
  Points colors;
};

/// Deterministic subject from a seed: clamped-normal identity and appearance coefficients.
inline Subject generate_subject(std::uint64_t seed, const MorphableModel& m, double coefficient_bound = 3.0) {
  Rng rng(seed);
  Subject s;
  s.coeffs.identity.resize(m.identity_dim());
  s.coeffs.expression = Eigen::VectorXd::Zero(m.expression_dim());
  for (Index i = 0; i < m.identity_dim(); ++i) {
    s.coeffs.identity[i] = detail::round_float(std::clamp(rng.normal(), -coefficient_bound, coefficient_bound));
  }
  const Index a = m.albedo_basis.cols();
  s.appearance.resize(a);
  for (Index i = 0; i < a; ++i) {
    s.appearance[i] = detail::round_float(std::clamp(rng.normal(), -coefficient_bound, coefficient_bound));
  }
  s.colors = vertex_colors(m, s.appearance);
  detail::round_to_float(s.colors);
  return s;
}

struct Scene {
  Index subject_id = 0;
  MorphCoeffs coeffs;
  Points mesh;
  Points vertex_colors;
  Vec3 light_direction = Vec3(0.35, 0.55, 0.75).normalized();
};

struct RenderOptions {
  double ambient = 0.35;
  /// Round output to 8-bit levels so in-memory renders equal their PNG form.
  bool quantize = true;
};

/// Z-buffered triangle rasterization with Lambertian shading on a white
/// background. A pixel is covered when its center lies inside or on all three
/// edges; smooth normals and colors are interpolated perspective-correctly.
inline Tensor<float> render_view(const Scene& scene, const std::vector<Face>& faces, const CameraParams& cam,
                                 const RenderOptions& opt = {}) {
  const Index h = cam.height;
  const Index w = cam.width;
  Tensor<float> image({3, h, w}, 1.0f);
  std::vector<double> zbuf(static_cast<std::size_t>(h * w), std::numeric_limits<double>::infinity());
  const Projection proj = project(scene.mesh, cam);
  const Points normals = vertex_normals(scene.mesh, faces);
  const Vec3 light = scene.light_direction.normalized();
  for (const Face& f : faces) {
    if (!proj.valid[f[0]] || !proj.valid[f[1]] || !proj.valid[f[2]]) continue;
    double px[3], py[3], inv_z[3];
    for (int k = 0; k < 3; ++k) {
      px[k] = proj.uvz(f[k], 0);
      py[k] = proj.uvz(f[k], 1);
      inv_z[k] = 1.0 / proj.uvz(f[k], 2);
    }
    const double area = (px[1] - px[0]) * (py[2] - py[0]) - (py[1] - py[0]) * (px[2] - px[0]);
    if (area == 0.0) continue;
    const double sign = area > 0 ? 1.0 : -1.0;
    const Index i0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min({py[0], py[1], py[2]}) - 0.5)));
    const Index i1 = std::min<Index>(h - 1, static_cast<Index>(std::ceil(std::max({py[0], py[1], py[2]}) - 0.5)));
    const Index j0 = std::max<Index>(0, static_cast<Index>(std::floor(std::min({px[0], px[1], px[2]}) - 0.5)));
    const Index j1 = std::min<Index>(w - 1, static_cast<Index>(std::ceil(std::max({px[0], px[1], px[2]}) - 0.5)));
    for (Index i = i0; i <= i1; ++i) {
      const double cy = static_cast<double>(i) + 0.5;
      for (Index j = j0; j <= j1; ++j) {
        const double cx = static_cast<double>(j) + 0.5;
        double b[3];
        for (int k = 0; k < 3; ++k) {
          const int a1 = (k + 1) % 3;
          const int a2 = (k + 2) % 3;
          b[k] = sign * ((px[a2] - px[a1]) * (cy - py[a1]) - (py[a2] - py[a1]) * (cx - px[a1]));
        }
        if (b[0] < 0 || b[1] < 0 || b[2] < 0) continue;
        const double total = b[0] + b[1] + b[2];
        double wsum = 0;
        double wp[3];
        for (int k = 0; k < 3; ++k) {
          wp[k] = b[k] / total * inv_z[k];
          wsum += wp[k];
        }
        const double depth = 1.0 / wsum;
        const std::size_t pix = static_cast<std::size_t>(i * w + j);
        if (!(depth < zbuf[pix])) continue;
        zbuf[pix] = depth;
        Vec3 n = Vec3::Zero();
        Vec3 c = Vec3::Zero();
        for (int k = 0; k < 3; ++k) {
          n += (wp[k] / wsum) * normals.row(f[k]).transpose();
          c += (wp[k] / wsum) * scene.vertex_colors.row(f[k]).transpose();
        }
        const double nn = n.norm();
        const double lambert = nn > 0 ? std::max(0.0, n.dot(light) / nn) : 0.0;
        const double shade = opt.ambient + (1.0 - opt.ambient) * lambert;
        for (int a = 0; a < 3; ++a) image[(a * h + i) * w + j] = static_cast<float>(std::clamp(c[a] * shade, 0.0, 1.0));
      }
    }
  }
  if (opt.quantize) {
    for (auto& v : image.data) v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
  }
  return image;
}

struct RigSpec {
  Index views = 16;
  double elevation_deg = 30.0;
  double radius = 1.6;
  Index image_size = 32;
  double azimuth_start_deg = 0.0;
  double azimuth_span_deg = 360.0;
  /// Half-width of the visible region at the rig center, world units.
  double half_extent = 0.4;
  /// near/far straddle the origin: radius -/+ frustum_length / 2.
  double frustum_length = std::sqrt(3.0) / 2.0;
};

inline nlohmann::json rig_to_json(const RigSpec& r) {
  return {{"views", r.views},
          {"elevation_deg", r.elevation_deg},
          {"radius", r.radius},
          {"image_size", r.image_size},
          {"azimuth_start_deg", r.azimuth_start_deg},
          {"azimuth_span_deg", r.azimuth_span_deg},
          {"half_extent", r.half_extent},
          {"frustum_length", r.frustum_length}};
}

inline RigSpec rig_from_json(const nlohmann::json& j) {
  RigSpec r;
  r.views = j.value("views", r.views);
  r.elevation_deg = j.value("elevation_deg", r.elevation_deg);
  r.radius = j.value("radius", r.radius);
  r.image_size = j.value("image_size", r.image_size);
  r.azimuth_start_deg = j.value("azimuth_start_deg", r.azimuth_start_deg);
  r.azimuth_span_deg = j.value("azimuth_span_deg", r.azimuth_span_deg);
  r.half_extent = j.value("half_extent", r.half_extent);
  r.frustum_length = j.value("frustum_length", r.frustum_length);
  return r;
}

/// Cameras at equal azimuth steps on a circle of the given radius and
/// elevation, all looking at the origin with shared intrinsics.
inline std::vector<CameraParams> make_camera_rig(const RigSpec& spec) {
  if (spec.views < 1) throw ConfigError("camera rig needs at least one view");
  if (spec.radius <= spec.frustum_length / 2) throw ConfigError("rig radius must exceed half the frustum length");
  const double f = (static_cast<double>(spec.image_size) / 2.0) * spec.radius / spec.half_extent;
  const double c = static_cast<double>(spec.image_size) / 2.0;
  const Mat3 K = (Mat3() << f, 0, c, 0, f, c, 0, 0, 1).finished();
  const double el = spec.elevation_deg * M_PI / 180.0;
  std::vector<CameraParams> rig;
  for (Index i = 0; i < spec.views; ++i) {
    const double az =
        (spec.azimuth_start_deg + spec.azimuth_span_deg * static_cast<double>(i) / static_cast<double>(spec.views)) *
        M_PI / 180.0;
    const Vec3 eye(spec.radius * std::cos(el) * std::sin(az), spec.radius * std::sin(el),
                   spec.radius * std::cos(el) * std::cos(az));
    rig.push_back(look_at(eye, Vec3::Zero(), Vec3::UnitY(), K, spec.image_size, spec.image_size,
                          spec.radius - spec.frustum_length / 2, spec.radius + spec.frustum_length / 2));
  }
  return rig;
}

struct DatasetConfig {
  Index subjects = 64;
  int expressions = 8;
  /// The last `test_subjects` subjects are held out from training.
  Index test_subjects = 8;
  std::uint64_t seed = 0;
  double coefficient_bound = 3.0;
  HeadModelConfig head;
  RigSpec rig{16, 10.0};
  RenderOptions render;
};

inline nlohmann::json dataset_config_to_json(const DatasetConfig& c) {
  return {{"subjects", c.subjects},
          {"expressions", c.expressions},
          {"test_subjects", c.test_subjects},
          {"seed", c.seed},
          {"coefficient_bound", c.coefficient_bound},
          {"head",
           {{"subdivisions", c.head.subdivisions},
            {"radii", {c.head.radii.x(), c.head.radii.y(), c.head.radii.z()}},
            {"identity_dim", c.head.identity_dim},
            {"expression_dim", c.head.expression_dim},
            {"identity_scale", c.head.identity_scale},
            {"expression_scale", c.head.expression_scale},
            {"appearance_scale", c.head.appearance_scale}}},
          {"rig", rig_to_json(c.rig)},
          {"render", {{"ambient", c.render.ambient}, {"quantize", c.render.quantize}}}};
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.subjects = j.value("subjects", c.subjects);
  c.expressions = j.value("expressions", c.expressions);
  c.test_subjects = j.value("test_subjects", c.test_subjects);
  c.seed = j.value("seed", c.seed);
  c.coefficient_bound = j.value("coefficient_bound", c.coefficient_bound);
  if (j.contains("head")) {
    const auto& h = j.at("head");
    c.head.subdivisions = h.value("subdivisions", c.head.subdivisions);
    if (h.contains("radii")) c.head.radii = Vec3(h["radii"][0], h["radii"][1], h["radii"][2]);
    c.head.identity_dim = h.value("identity_dim", c.head.identity_dim);
    c.head.expression_dim = h.value("expression_dim", c.head.expression_dim);
    c.head.identity_scale = h.value("identity_scale", c.head.identity_scale);
    c.head.expression_scale = h.value("expression_scale", c.head.expression_scale);
    c.head.appearance_scale = h.value("appearance_scale", c.head.appearance_scale);
  }
  if (j.contains("rig")) c.rig = rig_from_json(j.at("rig"));
  if (j.contains("render")) {
    c.render.ambient = j["render"].value("ambient", c.render.ambient);
    c.render.quantize = j["render"].value("quantize", c.render.quantize);
  }
  return c;
}

inline std::string rig_hash(const RigSpec& r) { return hash_string(rig_to_json(r).dump()); }

inline std::string config_hash(const DatasetConfig& c) { return hash_string(dataset_config_to_json(c).dump()); }

struct Dataset {
  DatasetConfig config;
  MorphableModel model;
  std::vector<CameraParams> rig;
  std::vector<ExpressionPreset> expressions;
  std::vector<Subject> subjects;
  /// Indexed [subject * expressions + expression].
  std::vector<Points> meshes;
  /// Indexed [(subject * expressions + expression) * views + view], each [3, H, W] in [0, 1].
  std::vector<Tensor<float>> images;

  Index subject_count() const { return static_cast<Index>(subjects.size()); }
  Index expression_count() const { return static_cast<Index>(expressions.size()); }
  Index view_count() const { return static_cast<Index>(rig.size()); }

  const Points& mesh(Index s, Index e) const { return meshes.at(static_cast<std::size_t>(s * expression_count() + e)); }
  const Tensor<float>& image(Index s, Index e, Index v) const {
    return images.at(static_cast<std::size_t>((s * expression_count() + e) * view_count() + v));
  }
  MorphCoeffs coeffs(Index s, Index e) const {
    MorphCoeffs c = subjects.at(static_cast<std::size_t>(s)).coeffs;
    c.expression = expressions.at(static_cast<std::size_t>(e)).coeffs;
    return c;
  }
  Index expression_index(const std::string& name) const {
    for (std::size_t i = 0; i < expressions.size(); ++i) {
      if (expressions[i].name == name) return static_cast<Index>(i);
    }
    throw ConfigError("unknown expression '" + name + "'");
  }
  Index first_test_subject() const { return subject_count() - config.test_subjects; }
};

inline Scene make_scene(const Dataset& d, Index s, Index e) {
  Scene scene;
  scene.subject_id = s;
  scene.coeffs = d.coeffs(s, e);
  scene.mesh = d.mesh(s, e);
  scene.vertex_colors = d.subjects.at(static_cast<std::size_t>(s)).colors;
  return scene;
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.subjects < 1) throw ConfigError("dataset needs at least one subject");
  if (cfg.test_subjects < 0 || cfg.test_subjects >= cfg.subjects) {
    throw ConfigError("test_subjects must leave at least one training subject");
  }
  Dataset d;
  d.config = cfg;
  d.model = build_head_model(cfg.head);
  d.rig = make_camera_rig(cfg.rig);
  d.expressions = default_expressions(cfg.expressions, cfg.head.expression_dim);
  for (Index s = 0; s < cfg.subjects; ++s) {
    d.subjects.push_back(generate_subject(derive_seed(cfg.seed, {static_cast<std::uint64_t>(s)}), d.model,
                                          cfg.coefficient_bound));
  }
  for (Index s = 0; s < cfg.subjects; ++s) {
    for (Index e = 0; e < d.expression_count(); ++e) {
      Points mesh = build_mesh(d.model, d.coeffs(s, e));
      detail::round_to_float(mesh);
      d.meshes.push_back(std::move(mesh));
    }
  }
  for (Index s = 0; s < cfg.subjects; ++s) {
    for (Index e = 0; e < d.expression_count(); ++e) {
      const Scene scene = make_scene(d, s, e);
      for (const auto& cam : d.rig) d.images.push_back(render_view(scene, d.model.faces, cam, cfg.render));
    }
  }
  return d;
}

struct SamplerOptions {
  bool shuffled = true;
  /// Target views per item; the rig is subsampled with stride views / target_views.
  Index target_views = 8;
  std::vector<std::string> excluded_expressions;
  /// Draw subjects from the held-out split instead of the training split.
  bool test_split = false;
};

struct TrainingItem {
  Index subject = 0;
  Index input_expression = 0;
  Index target_expression = 0;
  Index input_view = 0;
  Tensor<float> input_image;  // [3, H, W]
  CameraParams input_camera;
  Tensor<float> target_images;  // [N, 3, H, W]
  std::vector<CameraParams> target_cameras;
  std::vector<Index> target_view_indices;
  Points target_mesh;
  std::vector<Eigen::MatrixXd> keypoints_2d_gt;
};

inline std::vector<Index> target_view_indices(const Dataset& d, Index target_views) {
  if (target_views < 1 || d.view_count() % target_views != 0) {
    throw ConfigError("target view count " + std::to_string(target_views) + " must divide the rig size " +
                      std::to_string(d.view_count()));
  }
  std::vector<Index> idx;
  const Index stride = d.view_count() / target_views;
  for (Index i = 0; i < target_views; ++i) idx.push_back(i * stride);
  return idx;
}

inline std::vector<Index> allowed_expressions(const Dataset& d, const std::vector<std::string>& excluded) {
  std::vector<Index> allowed;
  for (Index e = 0; e < d.expression_count(); ++e) {
    const auto& name = d.expressions[static_cast<std::size_t>(e)].name;
    if (std::find(excluded.begin(), excluded.end(), name) == excluded.end()) allowed.push_back(e);
  }
  for (const auto& name : excluded) d.expression_index(name);  // reject unknown names
  return allowed;
}

/// Assembles an item for explicit (subject, input expression, input view, target expression).
inline TrainingItem make_item(const Dataset& d, Index subject, Index input_expression, Index input_view,
                              Index target_expression, Index target_views) {
  TrainingItem item;
  item.subject = subject;
  item.input_expression = input_expression;
  item.target_expression = target_expression;
  item.input_view = input_view;
  item.input_image = d.image(subject, input_expression, input_view);
  item.input_camera = d.rig.at(static_cast<std::size_t>(input_view));
  item.target_view_indices = target_view_indices(d, target_views);
  const Index size = item.input_image.size();
  item.target_images = Tensor<float>({target_views, item.input_image.dim(0), item.input_image.dim(1), item.input_image.dim(2)});
  item.target_mesh = d.mesh(subject, target_expression);
  for (Index i = 0; i < target_views; ++i) {
    const Index v = item.target_view_indices[static_cast<std::size_t>(i)];
    const auto& img = d.image(subject, target_expression, v);
    std::copy(img.data.begin(), img.data.end(), item.target_images.data.begin() + i * size);
    item.target_cameras.push_back(d.rig[static_cast<std::size_t>(v)]);
    item.keypoints_2d_gt.push_back(project_keypoints(d.model, item.target_mesh, d.rig[static_cast<std::size_t>(v)]));
  }
  return item;
}

/// Random subject, input expression and input view; with `shuffled` the target
/// expression is drawn uniformly from the other allowed expressions.
inline TrainingItem sample_training_item(const Dataset& d, Rng& rng, const SamplerOptions& opt) {
  const auto allowed = allowed_expressions(d, opt.excluded_expressions);
  if (allowed.empty()) throw ConfigError("every expression is excluded");
  if (opt.shuffled && allowed.size() < 2) throw ConfigError("shuffled sampling needs at least two expressions");
  const Index lo = opt.test_split ? d.first_test_subject() : 0;
  const Index hi = opt.test_split ? d.subject_count() - 1 : d.first_test_subject() - 1;
  const Index subject = rng.integer(lo, hi);
  const Index a = rng.integer(0, static_cast<Index>(allowed.size()) - 1);
  const Index input_view = rng.integer(0, d.view_count() - 1);
  Index b = a;
  if (opt.shuffled) {
    b = rng.integer(0, static_cast<Index>(allowed.size()) - 2);
    if (b >= a) ++b;
  }
  return make_item(d, subject, allowed[static_cast<std::size_t>(a)], input_view, allowed[static_cast<std::size_t>(b)],
                   opt.target_views);
}

namespace detail {

inline std::string view_name(const char* stem, Index v, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%02lld.%s", stem, static_cast<long long>(v), ext);
  return buf;
}

inline nlohmann::json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXd json_vector(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Index>(values.size()));
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw RuntimeFault("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace detail

/// Writes `dataset/<subject>/<expression>/{view_XX.png, camera_XX.json,
/// mesh.bin, keypoints.json}` plus manifest.json and model.mdar at the root.
/// Refuses to write into a non-empty directory unless `force` is set.
inline void write_dataset(const Dataset& d, const std::filesystem::path& root, bool force = false) {
  namespace fs = std::filesystem;
  if (fs::exists(root) && !fs::is_empty(root) && !force) {
    throw ConfigError("output directory " + root.string() + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(root);
  Archive model_ar;
  write_model(model_ar, d.model);
  model_ar.save(root / "model.mdar");
  nlohmann::json manifest;
  manifest["format"] = "morphdiff-dataset/1";
  manifest["config"] = dataset_config_to_json(d.config);
  manifest["config_hash"] = config_hash(d.config);
  manifest["keypoint_names"] = keypoint_names();
  manifest["expressions"] = nlohmann::json::array();
  for (const auto& e : d.expressions) manifest["expressions"].push_back({{"name", e.name}, {"coeffs", detail::vector_json(e.coeffs)}});
  manifest["subjects"] = nlohmann::json::array();
  for (Index s = 0; s < d.subject_count(); ++s) {
    const std::string sname = "subject_" + std::to_string(s);
    manifest["subjects"].push_back(sname);
    const Subject& subj = d.subjects[static_cast<std::size_t>(s)];
    for (Index e = 0; e < d.expression_count(); ++e) {
      const fs::path dir = root / sname / d.expressions[static_cast<std::size_t>(e)].name;
      fs::create_directories(dir);
      const Points& mesh = d.mesh(s, e);
      Archive mesh_ar;
      mesh_ar.meta = {{"subject", s},
                      {"expression", d.expressions[static_cast<std::size_t>(e)].name},
                      {"identity", detail::vector_json(subj.coeffs.identity)},
                      {"expression_coeffs", detail::vector_json(d.expressions[static_cast<std::size_t>(e)].coeffs)},
                      {"appearance", detail::vector_json(subj.appearance)}};
      const Eigen::Matrix<float, Eigen::Dynamic, 3, Eigen::RowMajor> verts = mesh.cast<float>();
      const Eigen::Matrix<float, Eigen::Dynamic, 3, Eigen::RowMajor> colors = subj.colors.cast<float>();
      mesh_ar.put<float>("vertices", {mesh.rows(), 3}, std::span<const float>(verts.data(), verts.size()));
      mesh_ar.put<float>("colors", {colors.rows(), 3}, std::span<const float>(colors.data(), colors.size()));
      mesh_ar.save(dir / "mesh.bin");
      nlohmann::json kp = nlohmann::json::object();
      kp["names"] = keypoint_names();
      kp["views"] = nlohmann::json::array();
      for (Index v = 0; v < d.view_count(); ++v) {
        const auto& cam = d.rig[static_cast<std::size_t>(v)];
        write_png(dir / detail::view_name("view", v, "png"), d.image(s, e, v));
        detail::write_json(dir / detail::view_name("camera", v, "json"), camera_to_json(cam));
        const Eigen::MatrixXd k2 = project_keypoints(d.model, mesh, cam);
        nlohmann::json pts = nlohmann::json::array();
        for (Index r = 0; r < k2.rows(); ++r) pts.push_back({k2(r, 0), k2(r, 1)});
        kp["views"].push_back(pts);
      }
      detail::write_json(dir / "keypoints.json", kp);
    }
  }
  detail::write_json(root / "manifest.json", manifest);
}

inline Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const nlohmann::json manifest = detail::read_json(root / "manifest.json");
  Dataset d;
  try {
    d.config = dataset_config_from_json(manifest.at("config"));
    if (manifest.at("config_hash").get<std::string>() != config_hash(d.config)) {
      throw ConfigError("dataset manifest config hash mismatch in " + root.string());
    }
    for (const auto& e : manifest.at("expressions")) {
      d.expressions.push_back({e.at("name").get<std::string>(), detail::json_vector(e.at("coeffs"))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed dataset manifest: " + std::string(e.what()));
  }
  d.model = read_model(Archive::load(root / "model.mdar"));
  const auto subjects = manifest.at("subjects").get<std::vector<std::string>>();
  const Index views = d.config.rig.views;
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    for (std::size_t e = 0; e < d.expressions.size(); ++e) {
      const fs::path dir = root / subjects[s] / d.expressions[e].name;
      const Archive mesh_ar = Archive::load(dir / "mesh.bin");
      const Tensor<double> verts = mesh_ar.get<double>("vertices");
      d.meshes.push_back(Eigen::Map<const Points>(verts.data.data(), verts.dim(0), 3));
      if (e == 0) {
        Subject subj;
        subj.coeffs.identity = detail::json_vector(mesh_ar.meta.at("identity"));
        subj.coeffs.expression = Eigen::VectorXd::Zero(d.model.expression_dim());
        subj.appearance = detail::json_vector(mesh_ar.meta.at("appearance"));
        const Tensor<double> colors = mesh_ar.get<double>("colors");
        subj.colors = Eigen::Map<const Points>(colors.data.data(), colors.dim(0), 3);
        d.subjects.push_back(std::move(subj));
      }
      for (Index v = 0; v < views; ++v) {
        if (s == 0 && e == 0) d.rig.push_back(camera_from_json(detail::read_json(dir / detail::view_name("camera", v, "json"))));
        d.images.push_back(read_png(dir / detail::view_name("view", v, "png")));
      }
    }
  }
  return d;
}

}  // namespace morphdiff::synth
