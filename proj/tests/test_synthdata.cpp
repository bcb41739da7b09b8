// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <filesystem>

#include "morphdiff/synthdata.hpp"

namespace morphdiff::synth {
namespace {

synth::DatasetConfig small_config() {
  DatasetConfig cfg;
  cfg.subjects = 4;
  cfg.test_subjects = 1;
  cfg.rig.image_size = 16;
  cfg.seed = 11;
  return cfg;
}

const Dataset& small_dataset() {
  static const Dataset d = generate_dataset(small_config());
  return d;
}

CameraParams pixel_camera(Index size) {
  CameraParams cam;
  cam.K << 10, 0, 8, 0, 10, 8, 0, 0, 1;
  cam.height = size;
  cam.width = size;
  cam.near = 0.5;
  cam.far = 5;
  return cam;
}

/// Triangle at depth 2 whose projection has the given pixel-space corners.
Scene flat_triangle(const CameraParams& cam, const std::array<Eigen::Vector2d, 3>& px, double depth, double gray) {
  Scene s;
  s.mesh.resize(3, 3);
  for (int k = 0; k < 3; ++k) {
    s.mesh.row(k) << (px[k].x() - cam.K(0, 2)) / cam.K(0, 0) * depth, (px[k].y() - cam.K(1, 2)) / cam.K(1, 1) * depth,
        depth;
  }
  s.vertex_colors = Points::Constant(3, 3, gray);
  s.light_direction = Vec3(0, 0, -1);
  return s;
}

bool inside_oracle(const std::array<Eigen::Vector2d, 3>& t, const Eigen::Vector2d& p) {
  auto cross = [](const Eigen::Vector2d& a, const Eigen::Vector2d& b) { return a.x() * b.y() - a.y() * b.x(); };
  const double area = cross(t[1] - t[0], t[2] - t[0]);
  for (int k = 0; k < 3; ++k) {
    const auto& a = t[k];
    const auto& b = t[(k + 1) % 3];
    if (cross(b - a, p - a) * area < 0) return false;
  }
  return true;
}

bool is_white(const Tensor<float>& img, Index i, Index j) {
  const Index h = img.dim(1), w = img.dim(2);
  return img[(0 * h + i) * w + j] == 1.0f && img[(1 * h + i) * w + j] == 1.0f && img[(2 * h + i) * w + j] == 1.0f;
}

TEST(GenerateSubject, DeterministicPerSeed) {
  const auto m = build_head_model({});
  const auto a = generate_subject(42, m);
  const auto b = generate_subject(42, m);
  const auto c = generate_subject(43, m);
  EXPECT_EQ(a.coeffs.identity, b.coeffs.identity);
  EXPECT_EQ(a.appearance, b.appearance);
  EXPECT_EQ(a.colors, b.colors);
  EXPECT_NE(a.coeffs.identity, c.coeffs.identity);
}

TEST(GenerateSubject, CoefficientsWithinBound) {
  const auto m = build_head_model({});
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto s = generate_subject(seed, m, 3.0);
    ASSERT_LE(s.coeffs.identity.cwiseAbs().maxCoeff(), 3.0);
    ASSERT_LE(s.appearance.cwiseAbs().maxCoeff(), 3.0);
    ASSERT_GE(s.colors.minCoeff(), 0.0);
    ASSERT_LE(s.colors.maxCoeff(), 1.0);
  }
}

TEST(RenderView, CameraLookingAwayIsWhite) {
  const auto& d = small_dataset();
  const auto cam = look_at(Vec3(0, 0, 1.6), Vec3(0, 0, 5), Vec3::UnitY(), d.rig[0].K, 16, 16, 0.2, 2.0);
  const auto img = render_view(make_scene(d, 0, 0), d.model.faces, cam);
  for (float v : img.data) ASSERT_EQ(v, 1.0f);
}

TEST(RenderView, TriangleCoverageMatchesHalfPlaneOracle) {
  const auto cam = pixel_camera(16);
  const std::vector<std::array<Eigen::Vector2d, 3>> triangles = {
      {Eigen::Vector2d(2.3, 1.7), Eigen::Vector2d(13.6, 1.7), Eigen::Vector2d(2.3, 12.2)},  // axis-aligned legs
      {Eigen::Vector2d(2.3, 1.7), Eigen::Vector2d(5.6, 14.4), Eigen::Vector2d(13.1, 4.2)},
      {Eigen::Vector2d(-3.2, 7.7), Eigen::Vector2d(20.1, 9.9), Eigen::Vector2d(7.3, 15.2)}};  // clipped by the border
  for (const auto& t : triangles) {
    const auto img = render_view(flat_triangle(cam, t, 2.0, 0.2), {{0, 1, 2}}, cam);
    Index covered = 0;
    for (Index i = 0; i < 16; ++i) {
      for (Index j = 0; j < 16; ++j) {
        const bool expect = inside_oracle(t, Eigen::Vector2d(j + 0.5, i + 0.5));
        EXPECT_EQ(!is_white(img, i, j), expect) << "pixel " << i << "," << j;
        covered += expect;
      }
    }
    EXPECT_GT(covered, 10);
  }
}

TEST(RenderView, DepthTestKeepsNearestSurface) {
  const auto cam = pixel_camera(16);
  const std::array<Eigen::Vector2d, 3> t{Eigen::Vector2d(1, 1), Eigen::Vector2d(15, 1), Eigen::Vector2d(1, 15)};
  const Scene near = flat_triangle(cam, t, 2.0, 0.2);
  const Scene far = flat_triangle(cam, t, 3.0, 0.8);
  for (bool near_first : {true, false}) {
    Scene s;
    s.mesh.resize(6, 3);
    s.vertex_colors.resize(6, 3);
    const Scene& a = near_first ? near : far;
    const Scene& b = near_first ? far : near;
    s.mesh << a.mesh, b.mesh;
    s.vertex_colors << a.vertex_colors, b.vertex_colors;
    s.light_direction = Vec3(0, 0, -1);
    const auto img = render_view(s, {{0, 1, 2}, {3, 4, 5}}, cam, {.ambient = 1.0, .quantize = false});
    EXPECT_FLOAT_EQ(img[(0 * 16 + 3) * 16 + 3], 0.2f);
  }
}

TEST(RenderView, BitwiseDeterministic) {
  const auto& d = small_dataset();
  const auto scene = make_scene(d, 1, 2);
  const auto a = render_view(scene, d.model.faces, d.rig[3]);
  const auto b = render_view(scene, d.model.faces, d.rig[3]);
  EXPECT_EQ(a.data, b.data);
  Index covered = 0;
  for (Index i = 0; i < 16; ++i)
    for (Index j = 0; j < 16; ++j) covered += !is_white(a, i, j);
  EXPECT_GT(covered, 40);
}

TEST(CameraRig, SixteenViewsAtEqualAzimuthSteps) {
  const auto rig = make_camera_rig({.views = 16, .elevation_deg = 30.0});
  ASSERT_EQ(rig.size(), 16u);
  for (std::size_t i = 0; i < rig.size(); ++i) {
    const auto [az, el] = azimuth_elevation_deg(rig[i]);
    EXPECT_NEAR(el, 30.0, 1e-9);
    const double expect = std::remainder(22.5 * static_cast<double>(i), 360.0);
    EXPECT_NEAR(std::remainder(az - expect, 360.0), 0.0, 1e-9);
    EXPECT_EQ(rig[i].K, rig[0].K);
  }
}

TEST(CameraRig, SingleViewIsFrontal) {
  const auto rig = make_camera_rig({.views = 1, .elevation_deg = 0.0});
  ASSERT_EQ(rig.size(), 1u);
  EXPECT_NEAR(azimuth_elevation_deg(rig[0]).first, 0.0, 1e-12);
  EXPECT_GT(rig[0].center().z(), 0.0);
}

TEST(CameraRig, OpticalAxesPassThroughOrigin) {
  for (double el : {-20.0, 0.0, 30.0, 60.0}) {
    for (const auto& cam : make_camera_rig({.views = 7, .elevation_deg = el, .radius = 2.3})) {
      const Vec3 c = cam.center();
      const Vec3 axis = cam.R.row(2).transpose();
      EXPECT_LT((c - c.dot(axis) * axis).norm(), 1e-9);
      EXPECT_LT(c.dot(axis), 0.0);
      EXPECT_NEAR(c.norm(), 2.3, 1e-12);
    }
  }
}

TEST(Sampler, UnshuffledKeepsExpression) {
  const auto& d = small_dataset();
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const auto item = sample_training_item(d, rng, {.shuffled = false});
    ASSERT_EQ(item.input_expression, item.target_expression);
    ASSERT_LT(item.subject, d.first_test_subject());
  }
}

TEST(Sampler, ShuffledTargetsUniformOverOtherExpressions) {
  const auto& d = small_dataset();
  const Index e = d.expression_count();
  Rng rng(6);
  std::vector<double> counts(static_cast<std::size_t>(e - 1), 0.0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto item = sample_training_item(d, rng, {.shuffled = true, .target_views = 1});
    ASSERT_NE(item.input_expression, item.target_expression);
    const Index rank = item.target_expression < item.input_expression ? item.target_expression : item.target_expression - 1;
    counts[static_cast<std::size_t>(rank)] += 1;
  }
  double chi2 = 0;
  const double expect = static_cast<double>(draws) / static_cast<double>(e - 1);
  for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
  const boost::math::chi_squared dist(static_cast<double>(e - 2));
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01);
}

TEST(Sampler, ShuffledWithOneExpressionIsConfigError) {
  auto cfg = small_config();
  cfg.expressions = 1;
  cfg.subjects = 2;
  const auto d = generate_dataset(cfg);
  Rng rng(1);
  EXPECT_THROW(sample_training_item(d, rng, {.shuffled = true}), ConfigError);
  EXPECT_NO_THROW(sample_training_item(d, rng, {.shuffled = false}));
}

TEST(Sampler, ExclusionListIsHonored) {
  const auto& d = small_dataset();
  const Index held = d.expression_index("jaw_right");
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    const auto item = sample_training_item(d, rng, {.shuffled = true, .target_views = 2, .excluded_expressions = {"jaw_right"}});
    ASSERT_NE(item.input_expression, held);
    ASSERT_NE(item.target_expression, held);
  }
  EXPECT_THROW(sample_training_item(d, rng, {.excluded_expressions = {"yawn"}}), ConfigError);
}

TEST(Sampler, ItemContents) {
  const auto& d = small_dataset();
  Rng rng(8);
  const auto item = sample_training_item(d, rng, {.shuffled = true, .target_views = 8});
  ASSERT_EQ(item.target_images.shape, (Shape{8, 3, 16, 16}));
  ASSERT_EQ(item.target_cameras.size(), 8u);
  EXPECT_EQ(item.input_image.data, d.image(item.subject, item.input_expression, item.input_view).data);
  EXPECT_EQ(item.target_mesh, d.mesh(item.subject, item.target_expression));
  for (Index i = 0; i < 8; ++i) {
    EXPECT_EQ(item.target_view_indices[static_cast<std::size_t>(i)], 2 * i);
    const auto& img = d.image(item.subject, item.target_expression, 2 * i);
    EXPECT_TRUE(std::equal(img.data.begin(), img.data.end(), item.target_images.data.begin() + i * img.size()));
    const Projection p = project(mesh_keypoints_3d(d.model, item.target_mesh), item.target_cameras[static_cast<std::size_t>(i)]);
    EXPECT_EQ(item.keypoints_2d_gt[static_cast<std::size_t>(i)], Eigen::MatrixXd(p.uvz.leftCols<2>()));
  }
  EXPECT_THROW(sample_training_item(d, rng, {.target_views = 5}), ConfigError);
}

TEST(Dataset, PureFunctionOfConfig) {
  const auto a = generate_dataset(small_config());
  const auto& b = small_dataset();
  ASSERT_EQ(a.images.size(), b.images.size());
  for (std::size_t i = 0; i < a.images.size(); ++i) ASSERT_EQ(a.images[i].data, b.images[i].data);
  auto other = small_config();
  other.seed = 12;
  EXPECT_NE(generate_dataset(other).images[0].data, b.images[0].data);
  EXPECT_NE(config_hash(other), config_hash(small_config()));
}

TEST(Dataset, DiskRoundTripIsExact) {
  auto cfg = small_config();
  cfg.subjects = 2;
  cfg.expressions = 3;
  cfg.rig.views = 4;
  const auto d = generate_dataset(cfg);
  const auto root = std::filesystem::temp_directory_path() / "morphdiff_dataset_roundtrip";
  std::filesystem::remove_all(root);
  write_dataset(d, root);
  EXPECT_TRUE(std::filesystem::exists(root / "subject_1" / "smile" / "view_03.png"));
  EXPECT_TRUE(std::filesystem::exists(root / "subject_0" / "jaw_open" / "camera_02.json"));
  EXPECT_TRUE(std::filesystem::exists(root / "subject_0" / "neutral" / "keypoints.json"));
  EXPECT_THROW(write_dataset(d, root), ConfigError);
  const auto back = load_dataset(root);
  std::filesystem::remove_all(root);
  ASSERT_EQ(back.images.size(), d.images.size());
  for (std::size_t i = 0; i < d.images.size(); ++i) ASSERT_EQ(back.images[i].data, d.images[i].data);
  for (std::size_t i = 0; i < d.meshes.size(); ++i) ASSERT_EQ(back.meshes[i], d.meshes[i]);
  for (std::size_t i = 0; i < d.subjects.size(); ++i) {
    EXPECT_EQ(back.subjects[i].coeffs.identity, d.subjects[i].coeffs.identity);
    EXPECT_EQ(back.subjects[i].colors, d.subjects[i].colors);
  }
  for (std::size_t v = 0; v < d.rig.size(); ++v) {
    EXPECT_EQ(back.rig[v].R, d.rig[v].R);
    EXPECT_EQ(back.rig[v].T, d.rig[v].T);
    EXPECT_EQ(back.rig[v].K, d.rig[v].K);
  }
  EXPECT_EQ(back.model.expression_basis, d.model.expression_basis);
}

}  // namespace
}  // namespace morphdiff::synth
