// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Pinhole cameras, projection, frustum ray sampling and trilinear volume lookup.
//
// Conventions: world-to-camera extrinsics (x_cam = R * x_world + T), camera
// space is x right / y down / z forward, and pixel (row i, col j) covers the
// continuous square [j, j+1) x [i, i+1), so its center is (j + 0.5, i + 0.5).

#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <cmath>
#include <vector>

#include "json.hpp"
#include "morphdiff/tensor.hpp"

namespace morphdiff {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
/// n x 3 point set, one point per row.
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline constexpr double kDepthEpsilon = 1e-6;

struct CameraParams {
  Mat3 K = Mat3::Identity();
  Mat3 R = Mat3::Identity();
  Vec3 T = Vec3::Zero();
  Index height = 1;
  Index width = 1;
  double near = 0.1;
  double far = 1.0;

  Vec3 center() const { return -R.transpose() * T; }
};

inline void validate(const CameraParams& cam) {
  if ((cam.R.transpose() * cam.R - Mat3::Identity()).cwiseAbs().maxCoeff() >= 1e-6 || cam.R.determinant() <= 0) {
    throw ConfigError("camera rotation must be orthonormal with determinant +1");
  }
  if (cam.K(1, 0) != 0 || cam.K(2, 0) != 0 || cam.K(2, 1) != 0 || cam.K(0, 0) <= 0 || cam.K(1, 1) <= 0 ||
      cam.K(2, 2) != 1) {
    throw ConfigError("camera intrinsics must be upper-triangular with positive focal lengths and K[2][2] = 1");
  }
  if (!(cam.near > 0 && cam.near < cam.far)) throw ConfigError("camera needs 0 < near < far");
  if (cam.height < 1 || cam.width < 1) throw ConfigError("camera image size must be positive");
}

/// Camera at `eye` looking at `target`; `up` is the world up direction.
inline CameraParams look_at(const Vec3& eye, const Vec3& target, const Vec3& up, const Mat3& K, Index height,
                            Index width, double near, double far) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-12) right = forward.cross(Vec3::UnitZ());
  right.normalize();
  const Vec3 down = forward.cross(right);
  CameraParams cam;
  cam.R.row(0) = right.transpose();
  cam.R.row(1) = down.transpose();
  cam.R.row(2) = forward.transpose();
  cam.T = -cam.R * eye;
  cam.K = K;
  cam.height = height;
  cam.width = width;
  cam.near = near;
  cam.far = far;
  return cam;
}

/// Azimuth (about +y, 0 = looking from +z) and elevation of the camera center, in degrees.
inline std::pair<double, double> azimuth_elevation_deg(const CameraParams& cam) {
  const Vec3 c = cam.center();
  const double az = std::atan2(c.x(), c.z()) * 180.0 / M_PI;
  const double el = std::asin(std::clamp(c.y() / c.norm(), -1.0, 1.0)) * 180.0 / M_PI;
  return {az, el};
}

struct Projection {
  /// Per point (u, v, z): pixel coordinates and camera-space depth.
  Points uvz;
  /// False where z <= kDepthEpsilon; such rows keep their raw z and undefined (u, v).
  std::vector<bool> valid;
};

inline Projection project(const Points& points, const CameraParams& cam) {
  Projection out;
  out.uvz.resize(points.rows(), 3);
  out.valid.resize(static_cast<std::size_t>(points.rows()));
  for (Index i = 0; i < points.rows(); ++i) {
    const Vec3 pc = cam.R * points.row(i).transpose() + cam.T;
    const Vec3 h = cam.K * pc;
    const bool ok = pc.z() > kDepthEpsilon;
    out.valid[static_cast<std::size_t>(i)] = ok;
    out.uvz(i, 0) = ok ? h.x() / h.z() : 0.0;
    out.uvz(i, 1) = ok ? h.y() / h.z() : 0.0;
    out.uvz(i, 2) = pc.z();
  }
  return out;
}

struct FrustumSamples {
  Index depth = 0;
  Index height = 0;
  Index width = 0;
  /// depth x height x width world points, row-major over (k, i, j).
  Points points;
  std::vector<double> depths;
};

inline std::vector<double> uniform_depths(double near, double far, Index count) {
  std::vector<double> z(static_cast<std::size_t>(count));
  for (Index k = 0; k < count; ++k) z[k] = near + static_cast<double>(k) * (far - near) / static_cast<double>(count - 1);
  z.back() = far;
  return z;
}

/// Points along the rays through the cell centers of a height x width
/// downsampling of the image plane, at depth-uniform samples in [near, far].
inline FrustumSamples sample_frustum_points(const CameraParams& cam, Index depth, Index height, Index width) {
  if (depth < 2 || height < 2 || width < 2) throw ConfigError("frustum sample counts must be >= 2");
  FrustumSamples out;
  out.depth = depth;
  out.height = height;
  out.width = width;
  out.depths = uniform_depths(cam.near, cam.far, depth);
  out.points.resize(depth * height * width, 3);
  const Mat3 k_inv = cam.K.inverse();
  const Mat3 r_t = cam.R.transpose();
  const double cell_u = static_cast<double>(cam.width) / static_cast<double>(width);
  const double cell_v = static_cast<double>(cam.height) / static_cast<double>(height);
  for (Index i = 0; i < height; ++i) {
    for (Index j = 0; j < width; ++j) {
      const Vec3 pixel((static_cast<double>(j) + 0.5) * cell_u, (static_cast<double>(i) + 0.5) * cell_v, 1.0);
      const Vec3 ray = k_inv * pixel;  // camera-space point at z = 1
      for (Index k = 0; k < depth; ++k) {
        const Vec3 pc = ray * (out.depths[k] / ray.z());
        out.points.row((k * height + i) * width + j) = (r_t * (pc - cam.T)).transpose();
      }
    }
  }
  return out;
}

/// Axis-aligned grid of dims[0] x dims[1] x dims[2] voxels filling [lo, hi];
/// features live at voxel centers.
struct VolumeGrid {
  std::array<Index, 3> dims{1, 1, 1};
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Ones();

  Index count() const { return dims[0] * dims[1] * dims[2]; }
  Vec3 spacing() const {
    return {(hi.x() - lo.x()) / static_cast<double>(dims[0]), (hi.y() - lo.y()) / static_cast<double>(dims[1]),
            (hi.z() - lo.z()) / static_cast<double>(dims[2])};
  }
  Vec3 center(Index ix, Index iy, Index iz) const {
    const Vec3 s = spacing();
    return lo + Vec3((static_cast<double>(ix) + 0.5) * s.x(), (static_cast<double>(iy) + 0.5) * s.y(),
                     (static_cast<double>(iz) + 0.5) * s.z());
  }
  Index flat(Index ix, Index iy, Index iz) const { return (ix * dims[1] + iy) * dims[2] + iz; }
};

struct TrilinearTaps {
  std::array<Index, 8> index{};
  std::array<double, 8> weight{};
  int count = 0;
};

/// Interpolation taps of a world point. Points outside [lo, hi] get no taps;
/// neighbours beyond the outermost centers contribute zero.
inline TrilinearTaps trilinear_taps(const VolumeGrid& grid, const Vec3& p) {
  TrilinearTaps taps;
  for (int a = 0; a < 3; ++a) {
    if (!(p[a] >= grid.lo[a] && p[a] <= grid.hi[a])) return taps;
  }
  const Vec3 s = grid.spacing();
  std::array<Index, 3> base{};
  std::array<double, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    const double f = (p[a] - grid.lo[a]) / s[a] - 0.5;
    const double fl = std::floor(f);
    base[a] = static_cast<Index>(fl);
    frac[a] = f - fl;
  }
  for (int corner = 0; corner < 8; ++corner) {
    std::array<Index, 3> idx{};
    double w = 1.0;
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const int bit = (corner >> (2 - a)) & 1;
      idx[a] = base[a] + bit;
      w *= bit ? frac[a] : 1.0 - frac[a];
      if (idx[a] < 0 || idx[a] >= grid.dims[a]) inside = false;
    }
    if (!inside || w == 0.0) continue;
    taps.index[taps.count] = grid.flat(idx[0], idx[1], idx[2]);
    taps.weight[taps.count] = w;
    ++taps.count;
  }
  return taps;
}

/// volume: [dims[0] * dims[1] * dims[2], C] rows in VolumeGrid::flat order. Returns [n, C].
template <typename T>
Tensor<T> trilinear_interpolate(const Tensor<T>& volume, const VolumeGrid& grid, const Points& queries) {
  if (volume.rank() != 2 || volume.dim(0) != grid.count() || grid.count() == 0) {
    throw ConfigError("trilinear_interpolate: volume " + shape_str(volume.shape) + " does not match grid");
  }
  for (int a = 0; a < 3; ++a) {
    if (!(grid.hi[a] > grid.lo[a])) throw ConfigError("trilinear_interpolate: degenerate bounding box");
  }
  const Index channels = volume.dim(1);
  Tensor<T> out({queries.rows(), channels});
  for (Index q = 0; q < queries.rows(); ++q) {
    const auto taps = trilinear_taps(grid, queries.row(q).transpose());
    for (int t = 0; t < taps.count; ++t) {
      const T w = static_cast<T>(taps.weight[t]);
      for (Index c = 0; c < channels; ++c) out[q * channels + c] += w * volume[taps.index[t] * channels + c];
    }
  }
  return out;
}

inline nlohmann::json camera_to_json(const CameraParams& cam) {
  auto mat = [](const Mat3& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
    return rows;
  };
  return {{"K", mat(cam.K)},
          {"R", mat(cam.R)},
          {"T", {cam.T.x(), cam.T.y(), cam.T.z()}},
          {"size", {cam.height, cam.width}},
          {"near", cam.near},
          {"far", cam.far}};
}

inline CameraParams camera_from_json(const nlohmann::json& j) {
  CameraParams cam;
  try {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        cam.K(r, c) = j.at("K").at(r).at(c).get<double>();
        cam.R(r, c) = j.at("R").at(r).at(c).get<double>();
      }
      cam.T[r] = j.at("T").at(r).get<double>();
    }
    cam.height = j.at("size").at(0).get<Index>();
    cam.width = j.at("size").at(1).get<Index>();
    cam.near = j.at("near").get<double>();
    cam.far = j.at("far").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed camera JSON: ") + e.what());
  }
  validate(cam);
  return cam;
}

}  // namespace morphdiff
