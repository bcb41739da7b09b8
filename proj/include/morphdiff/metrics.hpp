// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Image, keypoint and shape metrics. Images are [3, H, W] with values in [0, 1].

#pragma once

#include "json.hpp"
#include "morphdiff/morphable.hpp"

namespace morphdiff::metrics {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kPckThreshold = 0.2;

namespace detail {

inline void require_same_image_shape(const Tensor<float>& a, const Tensor<float>& b, const char* what) {
  if (a.shape != b.shape || a.rank() != 3) {
    throw ConfigError(std::string(what) + ": images must share a [C, H, W] shape, got " + shape_str(a.shape) +
                      " and " + shape_str(b.shape));
  }
}

/// Normalized 11-tap Gaussian, sigma 1.5.
inline std::array<double, 11> gaussian_window() {
  std::array<double, 11> w{};
  double sum = 0;
  for (int i = 0; i < 11; ++i) {
    w[static_cast<std::size_t>(i)] = std::exp(-0.5 * std::pow((i - 5) / 1.5, 2));
    sum += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

/// Separable valid-mode Gaussian filter of an H x W plane.
inline std::vector<double> filter_valid(const std::vector<double>& plane, Index h, Index w) {
  static const auto g = gaussian_window();
  const Index ow = w - 10, oh = h - 10;
  std::vector<double> rows(static_cast<std::size_t>(h * ow));
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < ow; ++j) {
      double acc = 0;
      for (Index k = 0; k < 11; ++k) acc += g[static_cast<std::size_t>(k)] * plane[static_cast<std::size_t>(i * w + j + k)];
      rows[static_cast<std::size_t>(i * ow + j)] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (Index i = 0; i < oh; ++i)
    for (Index j = 0; j < ow; ++j) {
      double acc = 0;
      for (Index k = 0; k < 11; ++k) acc += g[static_cast<std::size_t>(k)] * rows[static_cast<std::size_t>((i + k) * ow + j)];
      out[static_cast<std::size_t>(i * ow + j)] = acc;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5), averaged over channels.
inline double ssim(const Tensor<float>& a, const Tensor<float>& b) {
  detail::require_same_image_shape(a, b, "ssim");
  const Index ch = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (h < 11 || w < 11) throw ConfigError("ssim needs images of at least 11 x 11 pixels");
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  double total = 0;
  const auto n = static_cast<std::size_t>(h * w);
  for (Index c = 0; c < ch; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a[c * h * w + static_cast<Index>(i)];
      y[i] = b[c * h * w + static_cast<Index>(i)];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter_valid(x, h, w);
    const auto my = detail::filter_valid(y, h, w);
    const auto sxx = detail::filter_valid(xx, h, w);
    const auto syy = detail::filter_valid(yy, h, w);
    const auto sxy = detail::filter_valid(xy, h, w);
    double acc = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(ch);
}

inline double mse(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape != b.shape) throw ConfigError("mse: shape mismatch");
  double acc = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// 10 log10(1 / MSE) on unit range, capped at 99 dB.
inline double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  const double m = mse(a, b);
  if (m <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

struct PckCount {
  Index correct = 0;
  Index total = 0;

  double percent() const { return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total); }
  PckCount& operator+=(const PckCount& o) {
    correct += o.correct;
    total += o.total;
    return *this;
  }
};

/// Keypoints whose distance to the ground truth, divided by the normalizer, is strictly below the threshold.
inline PckCount pck_count(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, double normalizer,
                          double threshold = kPckThreshold) {
  if (pred.rows() != gt.rows() || pred.cols() < 2 || gt.cols() < 2) throw ConfigError("pck: keypoint sets differ in size");
  if (!(normalizer > 0)) throw DegenerateNormalizer("pck normalizer must be > 0");
  PckCount c;
  c.total = pred.rows();
  for (Index k = 0; k < pred.rows(); ++k) {
    if ((pred.row(k).head<2>() - gt.row(k).head<2>()).norm() / normalizer < threshold) ++c.correct;
  }
  return c;
}

inline double pck(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, double normalizer,
                  double threshold = kPckThreshold) {
  return pck_count(pred, gt, normalizer, threshold).percent();
}

/// Symmetric mean nearest-neighbor distance: (mean_a min_b |a - b| + mean_b min_a |b - a|) / 2.
inline double chamfer(const Points& a, const Points& b) {
  if (a.rows() == 0 || b.rows() == 0) throw ConfigError("chamfer: point sets must be non-empty");
  auto one_way = [](const Points& from, const Points& to) {
    double sum = 0;
    for (Index i = 0; i < from.rows(); ++i) sum += std::sqrt((to.rowwise() - from.row(i)).rowwise().squaredNorm().minCoeff());
    return sum / static_cast<double>(from.rows());
  };
  return 0.5 * one_way(a, b) + 0.5 * one_way(b, a);
}

struct TriangleMesh {
  Points vertices;
  std::vector<Face> faces;
};

namespace detail {

/// Tie rule for points exactly on an edge: of the two directions of an edge,
/// exactly one owns it, so a point on a shared edge counts once.
inline bool owns_edge(double du, double dv) { return dv > 0 || (dv == 0 && du < 0); }

/// Sorted x coordinates where the line {y = yc, z = zc} crosses the mesh.
inline std::vector<double> crossings(const TriangleMesh& m, double yc, double zc) {
  std::vector<double> xs;
  for (const auto& f : m.faces) {
    Vec3 p[3] = {m.vertices.row(f[0]).transpose(), m.vertices.row(f[1]).transpose(), m.vertices.row(f[2]).transpose()};
    double area = (p[1].y() - p[0].y()) * (p[2].z() - p[0].z()) - (p[2].y() - p[0].y()) * (p[1].z() - p[0].z());
    if (area == 0) continue;
    if (area < 0) {
      std::swap(p[1], p[2]);
      area = -area;
    }
    double wsum[3];
    bool inside = true;
    for (int e = 0; e < 3 && inside; ++e) {
      const Vec3& a = p[(e + 1) % 3];
      const Vec3& b = p[(e + 2) % 3];
      const double du = b.y() - a.y(), dv = b.z() - a.z();
      const double ef = du * (zc - a.z()) - dv * (yc - a.y());
      if (ef < 0 || (ef == 0 && !owns_edge(du, dv))) inside = false;
      wsum[e] = ef;
    }
    if (!inside) continue;
    xs.push_back((wsum[0] * p[0].x() + wsum[1] * p[1].x() + wsum[2] * p[2].x()) / area);
  }
  std::sort(xs.begin(), xs.end());
  return xs;
}

/// Occupancy of the cell centers of a res^3 grid over [lo, hi] by ray parity along +x.
inline std::vector<char> occupancy(const TriangleMesh& m, const Vec3& lo, const Vec3& hi, Index res) {
  std::vector<char> occ(static_cast<std::size_t>(res * res * res), 0);
  const Vec3 step = (hi - lo) / static_cast<double>(res);
  for (Index iy = 0; iy < res; ++iy) {
    for (Index iz = 0; iz < res; ++iz) {
      const double yc = lo.y() + (static_cast<double>(iy) + 0.5) * step.y();
      const double zc = lo.z() + (static_cast<double>(iz) + 0.5) * step.z();
      const auto xs = crossings(m, yc, zc);
      std::size_t next = 0;
      for (Index ix = 0; ix < res; ++ix) {
        const double xc = lo.x() + (static_cast<double>(ix) + 0.5) * step.x();
        while (next < xs.size() && xs[next] < xc) ++next;
        occ[static_cast<std::size_t>((ix * res + iy) * res + iz)] = static_cast<char>(next % 2);
      }
    }
  }
  return occ;
}

}  // namespace detail

/// IoU of the interiors of two closed meshes, voxelized by ray parity at cell
/// centers of a shared res^3 grid over the union of their bounding boxes.
inline double volume_iou(const TriangleMesh& a, const TriangleMesh& b, Index resolution = 64) {
  if (resolution < 1) throw ConfigError("volume_iou: resolution must be >= 1");
  if (a.vertices.rows() == 0 || b.vertices.rows() == 0) throw ConfigError("volume_iou: empty mesh");
  const Vec3 lo = a.vertices.colwise().minCoeff().transpose().cwiseMin(b.vertices.colwise().minCoeff().transpose());
  const Vec3 hi = a.vertices.colwise().maxCoeff().transpose().cwiseMax(b.vertices.colwise().maxCoeff().transpose());
  const auto oa = detail::occupancy(a, lo, hi, resolution);
  const auto ob = detail::occupancy(b, lo, hi, resolution);
  Index inter = 0, uni = 0;
  for (std::size_t i = 0; i < oa.size(); ++i) {
    inter += oa[i] && ob[i];
    uni += oa[i] || ob[i];
  }
  if (uni == 0) throw ConfigError("volume_iou: both meshes enclose no voxel centers");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Restricts evaluation to near-frontal cameras: |azimuth| and |elevation| at most the limits (degrees).
struct CameraFilter {
  double max_azimuth_deg = 180.0;
  double max_elevation_deg = 90.0;

  bool accepts(const CameraParams& cam) const {
    const auto [az, el] = azimuth_elevation_deg(cam);
    return std::abs(az) <= max_azimuth_deg + 1e-9 && std::abs(el) <= max_elevation_deg + 1e-9;
  }
  nlohmann::json to_json() const { return {{"max_azimuth_deg", max_azimuth_deg}, {"max_elevation_deg", max_elevation_deg}}; }
};

/// Metrics for one target view index, averaged over the evaluated items.
struct ViewMetrics {
  Index view = 0;
  double azimuth_deg = 0;
  double elevation_deg = 0;
  Index images = 0;
  double ssim = 0;
  double psnr = 0;
  bool pck_evaluated = false;  // false when the camera filter rejects the view
  PckCount pck;
  PckCount pck_mouth;
};

struct AggregateMetrics {
  Index images = 0;
  double ssim = 0;
  double psnr = 0;
  PckCount pck;                // pooled over all keypoints of accepted views
  double pck_per_image = 0;    // mean of per-image percentages
  PckCount pck_mouth;
  std::optional<double> chamfer;
  std::optional<double> volume_iou;
};

struct EvalReport {
  std::string dataset_hash;
  std::string checkpoint_hash;
  CameraFilter camera_filter;
  double pck_threshold = kPckThreshold;
  std::vector<ViewMetrics> per_view;
  AggregateMetrics aggregate;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  /// Range checks on every reported value; throws ConfigError naming the first violation.
  void check_invariants() const {
    auto in = [](double v, double lo, double hi, const std::string& what) {
      if (!(v >= lo - 1e-12 && v <= hi + 1e-12)) throw ConfigError("eval report: " + what + " out of range: " + std::to_string(v));
    };
    for (const auto& v : per_view) {
      in(v.ssim, -1, 1, "ssim");
      in(v.pck.percent(), 0, 100, "pck");
    }
    in(aggregate.ssim, -1, 1, "ssim");
    in(aggregate.pck.percent(), 0, 100, "pck");
    in(aggregate.pck_per_image, 0, 100, "pck_per_image");
    if (aggregate.chamfer) in(*aggregate.chamfer, 0, std::numeric_limits<double>::infinity(), "chamfer");
    if (aggregate.volume_iou) in(*aggregate.volume_iou, 0, 1, "volume_iou");
  }

  nlohmann::ordered_json to_json() const {
    using J = nlohmann::ordered_json;
    auto pck_json = [](const PckCount& c) {
      return J{{"percent", c.percent()}, {"correct", c.correct}, {"total", c.total}};
    };
    J views = J::array();
    for (const auto& v : per_view) {
      J j{{"view", v.view},         {"azimuth_deg", v.azimuth_deg}, {"elevation_deg", v.elevation_deg},
          {"images", v.images},     {"ssim", v.ssim},               {"psnr", v.psnr}};
      if (v.pck_evaluated) {
        j["pck_at_threshold"] = pck_json(v.pck);
        j["pck_mouth"] = pck_json(v.pck_mouth);
      }
      views.push_back(std::move(j));
    }
    J agg{{"images", aggregate.images},
          {"ssim", aggregate.ssim},
          {"psnr", aggregate.psnr},
          {"pck_at_threshold", pck_json(aggregate.pck)},
          {"pck_per_image", aggregate.pck_per_image},
          {"pck_mouth", pck_json(aggregate.pck_mouth)}};
    agg["chamfer"] = aggregate.chamfer ? J(*aggregate.chamfer) : J(nullptr);
    agg["volume_iou"] = aggregate.volume_iou ? J(*aggregate.volume_iou) : J(nullptr);
    J camera{{"max_azimuth_deg", camera_filter.max_azimuth_deg},
             {"max_elevation_deg", camera_filter.max_elevation_deg}};
    return J{{"metadata",
              {{"dataset_hash", dataset_hash},
               {"checkpoint_hash", checkpoint_hash},
               {"camera_filter", camera},
               {"pck_threshold", pck_threshold}}},
             {"aggregate", agg},
             {"per_view", views},
             {"extra", extra}};
  }

  /// Fixed-width table for terminals.
  std::string table() const {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof line, "%-6s %8s %8s %8s %8s %8s\n", "view", "az", "el", "ssim", "psnr", "pck");
    out += line;
    for (const auto& v : per_view) {
      if (v.pck_evaluated) {
        std::snprintf(line, sizeof line, "%-6lld %8.1f %8.1f %8.4f %8.2f %8.2f\n", static_cast<long long>(v.view),
                      v.azimuth_deg, v.elevation_deg, v.ssim, v.psnr, v.pck.percent());
      } else {
        std::snprintf(line, sizeof line, "%-6lld %8.1f %8.1f %8.4f %8.2f %8s\n", static_cast<long long>(v.view),
                      v.azimuth_deg, v.elevation_deg, v.ssim, v.psnr, "-");
      }
      out += line;
    }
    std::snprintf(line, sizeof line, "%-6s %8s %8s %8.4f %8.2f %8.2f\n", "all", "", "", aggregate.ssim, aggregate.psnr,
                  aggregate.pck.percent());
    out += line;
    if (aggregate.chamfer) {
      std::snprintf(line, sizeof line, "chamfer %.6f  volume_iou %.4f\n", *aggregate.chamfer,
                    aggregate.volume_iou.value_or(0.0));
      out += line;
    }
    return out;
  }
};

}  // namespace morphdiff::metrics
