// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Mesh-anchored conditioning: noisy target views are lifted to feature maps,
// unprojected onto mesh vertices, voxelized, encoded by a sparse 3D
// convolution stack into a dense feature volume, and resampled along every
// target camera's frustum into a multi-level feature pyramid.
//
// Everything that depends only on (cameras, mesh) is precomputed once into a
// ConditioningPlan of constant sparse matrices and rulebooks, so the
// differentiable part is a short chain of ops.

#pragma once

#include <unordered_map>

#include "json.hpp"
#include "morphdiff/geometry.hpp"
#include "morphdiff/nn.hpp"

namespace morphdiff::cond {

using ad::SparseMatrix;
using ad::Var;

struct CondConfig {
  /// Channels of the lifted noise features (d).
  Index feature_dim = 16;
  /// Channels of the encoder stages; the last is the volume width f_V.
  std::array<Index, 3> encoder_channels{16, 32, 64};
  /// Edge length of the dense resampled volume.
  Index grid_size = 32;
  double voxel_size = 0.02;
  /// Frustum samples per ray (d_F); the frustum's height/width follow the image.
  Index frustum_depth = 48;
  /// Pyramid levels (L) and their channel width (d_r).
  Index levels = 3;
  Index pyramid_channels = 64;

  Index volume_channels() const { return encoder_channels[2]; }
};

inline void validate(const CondConfig& c) {
  if (c.feature_dim < 1 || c.grid_size < 2 || c.levels < 1 || c.pyramid_channels < 1 || c.frustum_depth < 2) {
    throw ConfigError("conditioning sizes must be positive (grid_size and frustum_depth >= 2)");
  }
  for (Index ch : c.encoder_channels) {
    if (ch < 1) throw ConfigError("encoder channels must be positive");
  }
  if (!(c.voxel_size > 0)) throw ConfigError("voxel_size must be > 0");
}

inline nlohmann::json to_json(const CondConfig& c) {
  return {{"feature_dim", c.feature_dim},     {"encoder_channels", c.encoder_channels},
          {"grid_size", c.grid_size},         {"voxel_size", c.voxel_size},
          {"frustum_depth", c.frustum_depth}, {"levels", c.levels},
          {"pyramid_channels", c.pyramid_channels}};
}

inline CondConfig cond_config_from_json(const nlohmann::json& j) {
  CondConfig c;
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
  c.grid_size = j.value("grid_size", c.grid_size);
  c.voxel_size = j.value("voxel_size", c.voxel_size);
  c.frustum_depth = j.value("frustum_depth", c.frustum_depth);
  c.levels = j.value("levels", c.levels);
  c.pyramid_channels = j.value("pyramid_channels", c.pyramid_channels);
  return c;
}

inline constexpr std::array<Index, 9> kEncoderStrides{1, 1, 2, 1, 1, 2, 1, 1, 1};

inline std::array<Index, 9> encoder_layer_channels(const CondConfig& c) {
  const auto [a, b, f] = c.encoder_channels;
  return {a, a, b, b, b, f, f, f, f};
}

/// Radius, in input voxels, of the dependency cone of one encoder output site.
inline Index encoder_receptive_radius() {
  Index radius = 0;
  Index scale = 1;
  for (Index s : kEncoderStrides) {
    radius += scale;  // kernel half-width 1 at the current resolution
    scale *= s;
  }
  return radius;
}

template <typename T>
struct CondNet {
  CondConfig config;
  Var<T> lift_w1, lift_b1, lift_w2, lift_b2;
  /// Per layer [27, Cin, Cout]; tap t = (kx * 3 + ky) * 3 + kz.
  std::vector<Var<T>> encoder;
  /// Group normalization of the encoder output over active sites.
  Var<T> encoder_gamma, encoder_beta;
  /// [d_r, f_V] projection of the base frustum grid, then stride-2 convs.
  Var<T> pyramid_in;
  std::vector<Var<T>> pyramid_down;

  static CondNet create(const CondConfig& c, ad::ParamSet<T>& ps, const std::string& prefix, Rng& rng) {
    validate(c);
    CondNet n;
    n.config = c;
    const Index d = c.feature_dim;
    n.lift_w1 = nn::he_param<T>(ps, prefix + "lift.conv1.weight", {d, 3, 3, 3}, 27, rng);
    n.lift_b1 = nn::zero_param<T>(ps, prefix + "lift.conv1.bias", {d});
    n.lift_w2 = nn::he_param<T>(ps, prefix + "lift.conv2.weight", {d, d, 3, 3}, 9 * d, rng);
    n.lift_b2 = nn::zero_param<T>(ps, prefix + "lift.conv2.bias", {d});
    Index cin = d;
    const auto channels = encoder_layer_channels(c);
    for (std::size_t l = 0; l < channels.size(); ++l) {
      n.encoder.push_back(nn::he_param<T>(ps, prefix + "encoder." + std::to_string(l) + ".weight",
                                          {27, cin, channels[l]}, 27 * cin, rng));
      cin = channels[l];
    }
    n.encoder_gamma = ps.add(prefix + "encoder.norm.gamma", Tensor<T>({c.volume_channels()}, T{1}));
    n.encoder_beta = nn::zero_param<T>(ps, prefix + "encoder.norm.beta", {c.volume_channels()});
    const Index dr = c.pyramid_channels;
    n.pyramid_in = nn::he_param<T>(ps, prefix + "pyramid.in.weight", {dr, c.volume_channels()}, c.volume_channels(), rng);
    for (Index l = 1; l < c.levels; ++l) {
      n.pyramid_down.push_back(
          nn::he_param<T>(ps, prefix + "pyramid.down" + std::to_string(l) + ".weight", {dr, dr, 3, 3, 3}, 27 * dr, rng));
    }
    return n;
  }
};

/// 2-layer per-view conv block: [N, 3, H, W] -> [N, d, H, W].
template <typename T>
Var<T> lift_noise_features(const CondNet<T>& net, const Var<T>& images) {
  auto h = ad::silu(ad::conv2d(images, net.lift_w1, net.lift_b1));
  return ad::conv2d(h, net.lift_w2, net.lift_b2);
}

/// Bilinear sampling of N feature maps at each vertex's projection, averaged
/// over the views where the vertex projects inside the image in front of the
/// camera. Rows: vertices; columns: flat (view, row, col) pixels.
/// Feature values sit at pixel centers; taps beyond the border clamp to the edge.
inline SparseMatrix<double> unprojection_matrix(const std::vector<CameraParams>& cameras, const Points& vertices,
                                                Index height, Index width) {
  SparseMatrix<double> m;
  m.cols = static_cast<Index>(cameras.size()) * height * width;
  std::vector<Projection> proj;
  for (const auto& cam : cameras) proj.push_back(project(vertices, cam));
  for (Index v = 0; v < vertices.rows(); ++v) {
    std::vector<std::pair<Index, double>> entries;
    int valid_views = 0;
    for (std::size_t n = 0; n < cameras.size(); ++n) {
      const auto& p = proj[n];
      const double u = p.uvz(v, 0);
      const double w = p.uvz(v, 1);
      if (!p.valid[static_cast<std::size_t>(v)] || !(u >= 0 && u < static_cast<double>(width) && w >= 0 &&
                                                     w < static_cast<double>(height))) {
        continue;
      }
      ++valid_views;
      const double x = u - 0.5;
      const double y = w - 0.5;
      const double x0 = std::floor(x);
      const double y0 = std::floor(y);
      const double fx = x - x0;
      const double fy = y - y0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const double weight = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
          if (weight == 0.0) continue;
          const Index col = std::clamp<Index>(static_cast<Index>(x0) + dx, 0, width - 1);
          const Index row = std::clamp<Index>(static_cast<Index>(y0) + dy, 0, height - 1);
          entries.emplace_back((static_cast<Index>(n) * height + row) * width + col, weight);
        }
      }
    }
    for (auto& e : entries) e.second /= valid_views;
    m.push_row(entries);
  }
  return m;
}

/// features: [N, d, H, W] -> vertex features [n_v, d].
template <typename T>
Var<T> unproject_to_vertices(const Var<T>& features, const SparseMatrix<T>& unprojection) {
  const Index n = features.dim(0), d = features.dim(1), h = features.dim(2), w = features.dim(3);
  auto pixels = ad::reshape(ad::permute(features, {0, 2, 3, 1}), {n * h * w, d});
  return ad::sparse_apply(unprojection, pixels);
}

/// Occupied voxels of a vertex set on a grid anchored at the vertex bounding
/// box minimum. Grid dims are padded up to multiples of 4.
struct SparseVoxels {
  double voxel_size = 0;
  Vec3 origin = Vec3::Zero();
  std::array<Index, 3> dims{};
  /// Occupied voxel coordinates, sorted by flat index.
  std::vector<std::array<Index, 3>> coords;
  /// Averaging matrix: rows = occupied voxels, columns = vertices.
  SparseMatrix<double> assign;

  Index flat(const std::array<Index, 3>& c) const { return (c[0] * dims[1] + c[1]) * dims[2] + c[2]; }
  /// The padded bounding grid as a cell-centered volume.
  VolumeGrid grid() const {
    VolumeGrid g;
    g.dims = dims;
    g.lo = origin;
    g.hi = origin + voxel_size * Vec3(static_cast<double>(dims[0]), static_cast<double>(dims[1]),
                                      static_cast<double>(dims[2]));
    return g;
  }
};

inline Index round_up4(Index v) { return (v + 3) / 4 * 4; }

inline SparseVoxels voxelize_vertices(const Points& vertices, double voxel_size) {
  if (vertices.rows() == 0) throw ConfigError("cannot voxelize an empty vertex set");
  if (!(voxel_size > 0)) throw ConfigError("voxel_size must be > 0");
  if (!vertices.allFinite()) throw ConfigError("vertices must be finite");
  SparseVoxels out;
  out.voxel_size = voxel_size;
  out.origin = vertices.colwise().minCoeff().transpose();
  const Vec3 extent = vertices.colwise().maxCoeff().transpose() - out.origin;
  for (int a = 0; a < 3; ++a) out.dims[a] = round_up4(static_cast<Index>(std::floor(extent[a] / voxel_size)) + 1);
  std::map<Index, std::pair<std::array<Index, 3>, std::vector<Index>>> cells;
  for (Index v = 0; v < vertices.rows(); ++v) {
    std::array<Index, 3> c{};
    for (int a = 0; a < 3; ++a) {
      c[a] = std::min(out.dims[a] - 1, static_cast<Index>(std::floor((vertices(v, a) - out.origin[a]) / voxel_size)));
    }
    auto& cell = cells[out.flat(c)];
    cell.first = c;
    cell.second.push_back(v);
  }
  out.assign.cols = vertices.rows();
  for (const auto& [key, cell] : cells) {
    out.coords.push_back(cell.first);
    std::vector<std::pair<Index, double>> row;
    for (Index v : cell.second) row.emplace_back(v, 1.0 / static_cast<double>(cell.second.size()));
    out.assign.push_row(row);
  }
  return out;
}

/// Rulebooks of the encoder's regular sparse convolutions. An output site is
/// active when any input of its 3x3x3 window is active, so the result equals a
/// dense zero-padded convolution over the bounding grid with zeros elsewhere.
struct EncoderPlan {
  std::vector<std::shared_ptr<const ad::Rulebook>> layers;
  /// Active sites and grid dims of the final (quarter-resolution) stage.
  std::vector<std::array<Index, 3>> out_coords;
  std::array<Index, 3> out_dims{};
};

inline std::pair<std::shared_ptr<const ad::Rulebook>, std::vector<std::array<Index, 3>>> build_rulebook(
    const std::vector<std::array<Index, 3>>& in_coords, const std::array<Index, 3>& in_dims, Index stride,
    std::array<Index, 3>& out_dims) {
  for (int a = 0; a < 3; ++a) out_dims[a] = (in_dims[a] - 1) / stride + 1;
  auto flat = [&](const std::array<Index, 3>& c) { return (c[0] * out_dims[1] + c[1]) * out_dims[2] + c[2]; };
  // Candidate outputs o with o * stride - 1 + k = i for some tap k.
  auto for_each_output = [&](const std::array<Index, 3>& i, auto&& fn) {
    for (Index kx = 0; kx < 3; ++kx) {
      for (Index ky = 0; ky < 3; ++ky) {
        for (Index kz = 0; kz < 3; ++kz) {
          const std::array<Index, 3> k{kx, ky, kz};
          std::array<Index, 3> o{};
          bool ok = true;
          for (int a = 0; a < 3 && ok; ++a) {
            const Index num = i[a] + 1 - k[a];
            if (num < 0 || num % stride != 0) ok = false;
            o[a] = ok ? num / stride : 0;
            if (ok && o[a] >= out_dims[a]) ok = false;
          }
          if (ok) fn(o, (kx * 3 + ky) * 3 + kz);
        }
      }
    }
  };
  std::map<Index, std::array<Index, 3>> active;
  for (const auto& i : in_coords) for_each_output(i, [&](const std::array<Index, 3>& o, Index) { active.emplace(flat(o), o); });
  std::unordered_map<Index, std::int32_t> index;
  std::vector<std::array<Index, 3>> out_coords;
  for (const auto& [key, o] : active) {
    index.emplace(key, static_cast<std::int32_t>(out_coords.size()));
    out_coords.push_back(o);
  }
  auto rb = std::make_shared<ad::Rulebook>();
  rb->in_sites = static_cast<Index>(in_coords.size());
  rb->out_sites = static_cast<Index>(out_coords.size());
  rb->pairs.resize(27);
  for (std::size_t s = 0; s < in_coords.size(); ++s) {
    for_each_output(in_coords[s], [&](const std::array<Index, 3>& o, Index tap) {
      rb->pairs[static_cast<std::size_t>(tap)].emplace_back(static_cast<std::int32_t>(s), index.at(flat(o)));
    });
  }
  return {rb, out_coords};
}

inline EncoderPlan plan_encoder(const SparseVoxels& vox) {
  EncoderPlan plan;
  auto coords = vox.coords;
  auto dims = vox.dims;
  for (Index stride : kEncoderStrides) {
    std::array<Index, 3> out_dims{};
    auto [rb, next] = build_rulebook(coords, dims, stride, out_dims);
    plan.layers.push_back(rb);
    coords = std::move(next);
    dims = out_dims;
  }
  plan.out_coords = std::move(coords);
  plan.out_dims = dims;
  return plan;
}

/// Bias-free 9-layer stack with SiLU between layers: [n_sites, d] -> [n_out, f_V].
template <typename T>
Var<T> sparse_conv_encode(const CondNet<T>& net, const Var<T>& site_features, const EncoderPlan& plan) {
  Var<T> h = site_features;
  for (std::size_t l = 0; l < plan.layers.size(); ++l) {
    h = ad::sparse_conv(h, net.encoder[l], plan.layers[l]);
    if (l + 1 < plan.layers.size()) h = ad::silu(h);
  }
  return h;
}

/// Cell-centered grid of the encoder output: site q sits at the center of input voxel 4q.
inline VolumeGrid encoder_output_grid(const SparseVoxels& vox, const EncoderPlan& plan) {
  VolumeGrid g;
  g.dims = plan.out_dims;
  const double s = vox.voxel_size;
  g.lo = vox.origin - Vec3::Constant(1.5 * s);
  g.hi = g.lo + 4 * s * Vec3(static_cast<double>(g.dims[0]), static_cast<double>(g.dims[1]),
                             static_cast<double>(g.dims[2]));
  return g;
}

/// The fixed-size dense volume spans the padded bounding grid of the mesh.
inline VolumeGrid volume_grid(const SparseVoxels& vox, Index grid_size) {
  VolumeGrid g = vox.grid();
  g.dims = {grid_size, grid_size, grid_size};
  return g;
}

/// Trilinear weights from sparse sites of `from` (inactive cells are zero) to
/// the query points. Rows: points, columns: active sites.
inline SparseMatrix<double> trilinear_matrix(const VolumeGrid& from, const std::vector<std::array<Index, 3>>& active,
                                             const Points& points) {
  std::unordered_map<Index, Index> site;
  for (std::size_t i = 0; i < active.size(); ++i) {
    site.emplace(from.flat(active[i][0], active[i][1], active[i][2]), static_cast<Index>(i));
  }
  SparseMatrix<double> m;
  m.cols = static_cast<Index>(active.size());
  std::vector<std::pair<Index, double>> row;
  for (Index p = 0; p < points.rows(); ++p) {
    row.clear();
    const auto taps = trilinear_taps(from, points.row(p).transpose());
    for (int t = 0; t < taps.count; ++t) {
      auto it = site.find(taps.index[t]);
      if (it != site.end()) row.emplace_back(it->second, taps.weight[t]);
    }
    m.push_row(row);
  }
  return m;
}

inline Points grid_centers(const VolumeGrid& g) {
  Points p(g.count(), 3);
  for (Index x = 0; x < g.dims[0]; ++x)
    for (Index y = 0; y < g.dims[1]; ++y)
      for (Index z = 0; z < g.dims[2]; ++z) p.row(g.flat(x, y, z)) = g.center(x, y, z).transpose();
  return p;
}

/// Constant structure of one conditioning pass for fixed target cameras and mesh.
template <typename T>
struct ConditioningPlan {
  Index views = 0, height = 0, width = 0;
  SparseMatrix<T> unprojection;
  SparseVoxels voxels;
  SparseMatrix<T> voxel_assign;
  EncoderPlan encoder;
  VolumeGrid volume;
  /// Encoder output sites -> dense volume cells.
  SparseMatrix<T> resample;
  /// Dense volume cells -> frustum samples of all views, rows ordered (view, k, i, j).
  SparseMatrix<T> frustum;
  Index frustum_depth = 0;
};

template <typename T>
ConditioningPlan<T> plan_conditioning(const CondConfig& c, const std::vector<CameraParams>& cameras,
                                      const Points& mesh, Index height, Index width) {
  validate(c);
  if (cameras.empty()) throw ConfigError("conditioning needs at least one camera");
  ConditioningPlan<T> p;
  p.views = static_cast<Index>(cameras.size());
  p.height = height;
  p.width = width;
  p.unprojection = unprojection_matrix(cameras, mesh, height, width).template cast<T>();
  p.voxels = voxelize_vertices(mesh, c.voxel_size);
  p.voxel_assign = p.voxels.assign.template cast<T>();
  p.encoder = plan_encoder(p.voxels);
  p.volume = volume_grid(p.voxels, c.grid_size);
  p.resample =
      trilinear_matrix(encoder_output_grid(p.voxels, p.encoder), p.encoder.out_coords, grid_centers(p.volume))
          .template cast<T>();
  p.frustum_depth = c.frustum_depth;
  SparseMatrix<double> frustum;
  frustum.cols = p.volume.count();
  std::vector<std::pair<Index, double>> row;
  for (const auto& cam : cameras) {
    const auto samples = sample_frustum_points(cam, c.frustum_depth, height, width);
    for (Index r = 0; r < samples.points.rows(); ++r) {
      const auto taps = trilinear_taps(p.volume, samples.points.row(r).transpose());
      row.clear();
      for (int t = 0; t < taps.count; ++t) row.emplace_back(taps.index[t], taps.weight[t]);
      frustum.push_row(row);
    }
  }
  p.frustum = frustum.template cast<T>();
  return p;
}

/// Dense volume [grid^3, f_V] from lifted per-view features [N, d, H, W].
/// Encoder outputs are group-normalized over the active sites first.
template <typename T>
Var<T> encode_volume(const CondNet<T>& net, const ConditioningPlan<T>& plan, const Var<T>& lifted) {
  auto vertex = unproject_to_vertices(lifted, plan.unprojection);
  auto sites = ad::sparse_apply(plan.voxel_assign, vertex);
  auto encoded = sparse_conv_encode(net, sites, plan.encoder);
  const Index n = encoded.dim(0), f = encoded.dim(1);
  auto channels_first = ad::reshape(ad::permute(encoded, {1, 0}), {1, f, n});
  auto normed = ad::group_norm(channels_first, net.encoder_gamma, net.encoder_beta, nn::norm_groups(f));
  return ad::sparse_apply(plan.resample, ad::permute(ad::reshape(normed, {f, n}), {1, 0}));
}

/// Base frustum grids of all views, [N, f_V, d_F, H, W].
template <typename T>
Var<T> frustum_base(const ConditioningPlan<T>& plan, const Var<T>& volume) {
  auto samples = ad::sparse_apply(plan.frustum, volume);
  const Index f = volume.dim(1);
  auto grid = ad::reshape(samples, {plan.views, plan.frustum_depth, plan.height, plan.width, f});
  return ad::permute(grid, {0, 4, 1, 2, 3});
}

/// Level j: [N, d_r, ceil(d_F / 2^j), ceil(H / 2^j), ceil(W / 2^j)]; bias-free.
template <typename T>
std::vector<Var<T>> frustum_pyramid(const CondNet<T>& net, const Var<T>& base) {
  std::vector<Var<T>> levels{ad::channel_linear(base, net.pyramid_in)};
  for (const auto& w : net.pyramid_down) levels.push_back(ad::conv3d(ad::silu(levels.back()), w, Var<T>{}, 2, 1));
  return levels;
}

/// Full conditioning pass: noisy target views [N, 3, H, W] -> frustum pyramid levels.
template <typename T>
std::vector<Var<T>> condition(const CondNet<T>& net, const ConditioningPlan<T>& plan, const Var<T>& noisy_views) {
  if (noisy_views.dim(0) != plan.views || noisy_views.dim(2) != plan.height || noisy_views.dim(3) != plan.width) {
    throw ConfigError("noisy views " + shape_str(noisy_views.shape()) + " do not match the conditioning plan");
  }
  auto volume = encode_volume(net, plan, lift_noise_features(net, noisy_views));
  return frustum_pyramid(net, frustum_base(plan, volume));
}

}  // namespace morphdiff::cond
