// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "gradcheck.hpp"
#include "morphdiff/condvolume.hpp"
#include "morphdiff/synthdata.hpp"

namespace morphdiff::cond {
namespace {

using ad::Var;
using testing::random_tensor;

CameraParams square_camera(const Vec3& eye, const Vec3& target, Index size, double focal) {
  Mat3 k;
  k << focal, 0, size / 2.0, 0, focal, size / 2.0, 0, 0, 1;
  return look_at(eye, target, Vec3::UnitY(), k, size, size, 0.5, 2.5);
}

Points random_points(std::mt19937_64& rng, Index n, double extent) {
  std::uniform_real_distribution<double> u(-extent, extent);
  return Points::NullaryExpr(n, 3, [&] { return u(rng); });
}

/// Scalar-loop bilinear sample of channel c of map n at continuous pixel (u, v), clamp-to-edge.
double bilinear_oracle(const Tensor<double>& maps, Index n, Index c, double u, double v) {
  const Index d = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  const double x = u - 0.5, y = v - 0.5;
  const Index x0 = static_cast<Index>(std::floor(x)), y0 = static_cast<Index>(std::floor(y));
  double acc = 0;
  for (Index yy = y0; yy <= y0 + 1; ++yy) {
    for (Index xx = x0; xx <= x0 + 1; ++xx) {
      const double wgt = (1 - std::abs(x - static_cast<double>(xx))) * (1 - std::abs(y - static_cast<double>(yy)));
      const Index cx = std::clamp<Index>(xx, 0, w - 1), cy = std::clamp<Index>(yy, 0, h - 1);
      acc += wgt * maps[((n * d + c) * h + cy) * w + cx];
    }
  }
  return acc;
}

TEST(Lift, ShapeContract) {
  ad::ParamSet<float> ps;
  Rng rng(1);
  const auto net = CondNet<float>::create({}, ps, "cond.", rng);
  auto x = Var<float>::constant(Tensor<float>({16, 3, 32, 32}, 0.25f));
  EXPECT_EQ(lift_noise_features(net, x).shape(), (Shape{16, 16, 32, 32}));
}

TEST(Lift, ZeroInitializedBlockGivesZeros) {
  ad::ParamSet<double> ps;
  Rng rng(2);
  auto net = CondNet<double>::create({.feature_dim = 4}, ps, "", rng);
  for (auto& [name, v] : ps.entries()) std::fill(v.mutable_value().data.begin(), v.mutable_value().data.end(), 0.0);
  std::mt19937_64 g(3);
  const auto out = lift_noise_features(net, Var<double>::constant(random_tensor({2, 3, 8, 8}, g)));
  for (double v : out.value().data) ASSERT_EQ(v, 0.0);
}

TEST(Lift, ViewsAreProcessedIndependently) {
  ad::ParamSet<double> ps;
  Rng rng(4);
  const auto net = CondNet<double>::create({.feature_dim = 5}, ps, "", rng);
  std::mt19937_64 g(5);
  const auto x = random_tensor({3, 3, 6, 7}, g);
  const Index per = 3 * 6 * 7;
  Tensor<double> swapped = x;
  std::copy_n(x.data.begin(), per, swapped.data.begin() + 2 * per);
  std::copy_n(x.data.begin() + 2 * per, per, swapped.data.begin());
  const auto a = lift_noise_features(net, Var<double>::constant(x)).value();
  const auto b = lift_noise_features(net, Var<double>::constant(swapped)).value();
  const Index out_per = 5 * 6 * 7;
  for (Index i = 0; i < out_per; ++i) {
    EXPECT_EQ(a[i], b[2 * out_per + i]);
    EXPECT_EQ(a[out_per + i], b[out_per + i]);
    EXPECT_EQ(a[2 * out_per + i], b[i]);
  }
}

class Unprojection : public ::testing::Test {
 protected:
  std::mt19937_64 rng{11};
  std::vector<CameraParams> cameras{square_camera({0, 0, 1.5}, {0, 0, 0}, 12, 20),
                                    square_camera({1.2, 0.3, 0.8}, {0, 0, 0}, 12, 20),
                                    square_camera({-0.9, -0.4, 1.1}, {0.05, 0, 0}, 12, 20)};
};

TEST_F(Unprojection, ConstantMapsGiveConstantFeatures) {
  const Points verts = random_points(rng, 40, 0.15);
  Tensor<double> maps({3, 4, 12, 12});
  for (Index n = 0; n < 3; ++n)
    for (Index c = 0; c < 4; ++c)
      for (Index i = 0; i < 144; ++i) maps[(n * 4 + c) * 144 + i] = 0.5 + static_cast<double>(c);
  const auto m = unprojection_matrix(cameras, verts, 12, 12);
  const auto out = unproject_to_vertices(Var<double>::constant(maps), m).value();
  for (Index v = 0; v < 40; ++v)
    for (Index c = 0; c < 4; ++c) EXPECT_NEAR(out[v * 4 + c], 0.5 + static_cast<double>(c), 1e-12);
}

TEST_F(Unprojection, MatchesScalarLoopOracle) {
  Points verts = random_points(rng, 60, 0.4);
  verts.row(0) << 0, 0, 5;  // behind the first camera... and far outside the others
  const auto maps = random_tensor({3, 5, 12, 12}, rng);
  const auto out = unproject_to_vertices(Var<double>::constant(maps), unprojection_matrix(cameras, verts, 12, 12)).value();
  for (Index v = 0; v < verts.rows(); ++v) {
    std::vector<double> acc(5, 0.0);
    int valid = 0;
    for (Index n = 0; n < 3; ++n) {
      const auto& cam = cameras[static_cast<std::size_t>(n)];
      const Vec3 pc = cam.R * verts.row(v).transpose() + cam.T;
      if (pc.z() <= kDepthEpsilon) continue;
      const double u = cam.K(0, 0) * pc.x() / pc.z() + cam.K(0, 1) * pc.y() / pc.z() + cam.K(0, 2);
      const double w = cam.K(1, 1) * pc.y() / pc.z() + cam.K(1, 2);
      if (u < 0 || u >= 12 || w < 0 || w >= 12) continue;
      ++valid;
      for (Index c = 0; c < 5; ++c) acc[c] += bilinear_oracle(maps, n, c, u, w);
    }
    for (Index c = 0; c < 5; ++c) EXPECT_NEAR(out[v * 5 + c], valid ? acc[c] / valid : 0.0, 1e-6);
  }
}

TEST_F(Unprojection, SingleViewIsPlainBilinearSample) {
  const Points verts = random_points(rng, 20, 0.2);
  const auto maps = random_tensor({1, 2, 12, 12}, rng);
  const auto out =
      unproject_to_vertices(Var<double>::constant(maps), unprojection_matrix({cameras[1]}, verts, 12, 12)).value();
  const auto p = project(verts, cameras[1]);
  for (Index v = 0; v < 20; ++v) {
    ASSERT_TRUE(p.valid[v]);
    for (Index c = 0; c < 2; ++c) EXPECT_NEAR(out[v * 2 + c], bilinear_oracle(maps, 0, c, p.uvz(v, 0), p.uvz(v, 1)), 1e-12);
  }
}

TEST_F(Unprojection, InvariantToViewOrder) {
  const Points verts = random_points(rng, 50, 0.3);
  const auto maps = random_tensor({3, 3, 12, 12}, rng);
  const auto base = unproject_to_vertices(Var<double>::constant(maps), unprojection_matrix(cameras, verts, 12, 12)).value();
  const std::vector<int> perm{2, 0, 1};
  Tensor<double> pmaps(maps.shape);
  std::vector<CameraParams> pcams;
  const Index per = 3 * 144;
  for (int i = 0; i < 3; ++i) {
    std::copy_n(maps.data.begin() + perm[i] * per, per, pmaps.data.begin() + i * per);
    pcams.push_back(cameras[static_cast<std::size_t>(perm[i])]);
  }
  const auto other = unproject_to_vertices(Var<double>::constant(pmaps), unprojection_matrix(pcams, verts, 12, 12)).value();
  for (Index i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], other[i], 1e-6);
}

TEST(Voxelize, SharedVoxelAveragesFeatures) {
  Points verts(3, 3);
  verts << 0.01, 0.01, 0.01, 0.02, 0.03, 0.015, 0.35, 0.2, 0.1;
  const auto vox = voxelize_vertices(verts, 0.1);
  ASSERT_EQ(vox.coords.size(), 2u);
  EXPECT_EQ(vox.dims, (std::array<Index, 3>{4, 4, 4}));
  Tensor<double> feats({3, 2}, std::vector<double>{1, 2, 3, 6, 10, 20});
  const auto out = ad::sparse_apply(vox.assign, Var<double>::constant(feats)).value();
  EXPECT_DOUBLE_EQ(out[0], 2.0);
  EXPECT_DOUBLE_EQ(out[1], 4.0);
  EXPECT_DOUBLE_EQ(out[2], 10.0);
  EXPECT_DOUBLE_EQ(out[3], 20.0);
}

TEST(Voxelize, HugeVoxelHoldsMeanOfAll) {
  std::mt19937_64 rng(12);
  const Points verts = random_points(rng, 25, 1.0);
  const auto vox = voxelize_vertices(verts, 10.0);
  ASSERT_EQ(vox.coords.size(), 1u);
  const auto feats = random_tensor({25, 3}, rng);
  const auto out = ad::sparse_apply(vox.assign, Var<double>::constant(feats)).value();
  for (Index c = 0; c < 3; ++c) {
    double mean = 0;
    for (Index v = 0; v < 25; ++v) mean += feats[v * 3 + c] / 25.0;
    EXPECT_NEAR(out[c], mean, 1e-12);
  }
}

TEST(Voxelize, OccupancyMatchesFloorDivision) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0, 1);
  const Points verts = Points::NullaryExpr(3000, 3, [&] { return u(rng); });
  const auto vox = voxelize_vertices(verts, 0.005);
  const Vec3 lo = verts.colwise().minCoeff().transpose();
  std::set<std::array<Index, 3>> oracle;
  for (Index v = 0; v < verts.rows(); ++v) {
    std::array<Index, 3> c{};
    for (int a = 0; a < 3; ++a) c[a] = static_cast<Index>(std::floor((verts(v, a) - lo[a]) / 0.005));
    oracle.insert(c);
  }
  const std::set<std::array<Index, 3>> got(vox.coords.begin(), vox.coords.end());
  EXPECT_EQ(got, oracle);
  for (Index d : vox.dims) {
    EXPECT_EQ(d % 4, 0);
    EXPECT_GE(d, 200);
  }
  EXPECT_THROW(voxelize_vertices(Points(0, 3), 0.1), ConfigError);
  EXPECT_THROW(voxelize_vertices(verts, 0.0), ConfigError);
}

/// Dense zero-padded convolution chain over the full bounding grid.
Tensor<double> dense_encoder_reference(const CondNet<double>& net, const SparseVoxels& vox, const Tensor<double>& sites) {
  const Index c0 = sites.dim(1);
  Tensor<double> dense({1, c0, vox.dims[0], vox.dims[1], vox.dims[2]});
  const Index cells = vox.dims[0] * vox.dims[1] * vox.dims[2];
  for (std::size_t s = 0; s < vox.coords.size(); ++s) {
    for (Index c = 0; c < c0; ++c) dense[c * cells + vox.flat(vox.coords[s])] = sites[static_cast<Index>(s) * c0 + c];
  }
  Var<double> h = Var<double>::constant(dense);
  for (std::size_t l = 0; l < net.encoder.size(); ++l) {
    const auto& ws = net.encoder[l].value();
    const Index cin = ws.dim(1), cout = ws.dim(2);
    Tensor<double> wd({cout, cin, 3, 3, 3});
    for (Index t = 0; t < 27; ++t)
      for (Index i = 0; i < cin; ++i)
        for (Index o = 0; o < cout; ++o) wd[(o * cin + i) * 27 + t] = ws[(t * cin + i) * cout + o];
    h = ad::conv3d(h, Var<double>::constant(wd), Var<double>{}, kEncoderStrides[l], 1);
    if (l + 1 < net.encoder.size()) h = ad::silu(h);
  }
  return h.value();
}

TEST(SparseEncoder, MatchesDenseConvolutionEverywhere) {
  std::mt19937_64 rng(14);
  Rng prng(15);
  ad::ParamSet<double> ps;
  const auto net = CondNet<double>::create({.feature_dim = 3, .encoder_channels = {4, 5, 6}}, ps, "", prng);
  Points verts = random_points(rng, 30, 0.25);
  const auto vox = voxelize_vertices(verts, 0.04);
  const auto plan = plan_encoder(vox);
  const auto sites = random_tensor({static_cast<Index>(vox.coords.size()), 3}, rng);
  const auto sparse = sparse_conv_encode(net, Var<double>::constant(sites), plan).value();
  const auto dense = dense_encoder_reference(net, vox, sites);
  ASSERT_EQ(dense.shape, (Shape{1, 6, plan.out_dims[0], plan.out_dims[1], plan.out_dims[2]}));
  const Index cells = plan.out_dims[0] * plan.out_dims[1] * plan.out_dims[2];
  std::vector<Index> active(static_cast<std::size_t>(cells), -1);
  for (std::size_t s = 0; s < plan.out_coords.size(); ++s) {
    const auto& q = plan.out_coords[s];
    active[static_cast<std::size_t>((q[0] * plan.out_dims[1] + q[1]) * plan.out_dims[2] + q[2])] = static_cast<Index>(s);
  }
  for (Index cell = 0; cell < cells; ++cell) {
    for (Index c = 0; c < 6; ++c) {
      const double d = dense[c * cells + cell];
      const Index s = active[static_cast<std::size_t>(cell)];
      if (s < 0) {
        ASSERT_EQ(d, 0.0);
      } else {
        ASSERT_NEAR(sparse[s * 6 + c], d, 1e-9);
      }
    }
  }
}

TEST(SparseEncoder, ReceptiveFieldOfSingleVoxel) {
  EXPECT_EQ(encoder_receptive_radius(), 21);
  Rng prng(16);
  ad::ParamSet<double> ps;
  const auto net = CondNet<double>::create({.feature_dim = 2, .encoder_channels = {2, 2, 3}}, ps, "", prng);
  // A 2-vertex mesh spanning a large box; only one voxel carries features.
  Points verts(2, 3);
  verts << 0, 0, 0, 2.0, 2.0, 2.0;
  const auto vox = voxelize_vertices(verts, 0.025);
  const auto plan = plan_encoder(vox);
  Tensor<double> sites({2, 2});
  const std::size_t hot = vox.coords[0] == std::array<Index, 3>{0, 0, 0} ? 1 : 0;
  sites[static_cast<Index>(hot) * 2] = 1.0;
  sites[static_cast<Index>(hot) * 2 + 1] = -0.5;
  const auto src = vox.coords[hot];
  const auto out = sparse_conv_encode(net, Var<double>::constant(sites), plan).value();
  const Index r = encoder_receptive_radius();
  Index nonzero = 0;
  for (std::size_t s = 0; s < plan.out_coords.size(); ++s) {
    bool any = false;
    for (Index c = 0; c < 3; ++c) any |= out[static_cast<Index>(s) * 3 + c] != 0.0;
    if (!any) continue;
    ++nonzero;
    for (int a = 0; a < 3; ++a) ASSERT_LE(std::abs(4 * plan.out_coords[s][a] - src[a]), r);
  }
  EXPECT_GT(nonzero, 100);
}

TEST(SparseEncoder, VolumeShapeAndZeroInput) {
  const auto model = synth::build_head_model({});
  const Points mesh = build_mesh(model, {Eigen::VectorXd::Zero(8), Eigen::VectorXd::Zero(6)});
  Rng prng(17);
  ad::ParamSet<float> ps;
  const CondConfig cfg{};
  const auto net = CondNet<float>::create(cfg, ps, "", prng);
  const auto rig = synth::make_camera_rig({.views = 2, .elevation_deg = 10, .image_size = 32});
  const auto plan = plan_conditioning<float>(cfg, rig, mesh, 32, 32);
  auto lifted = Var<float>::constant(Tensor<float>({2, 16, 32, 32}));
  const auto volume = encode_volume(net, plan, lifted);
  EXPECT_EQ(volume.shape(), (Shape{32 * 32 * 32, 64}));
  for (float v : volume.value().data) ASSERT_EQ(v, 0.0f);
  const auto base = frustum_base(plan, volume);
  EXPECT_EQ(base.shape(), (Shape{2, 64, 48, 32, 32}));
  const auto levels = frustum_pyramid(net, base);
  ASSERT_EQ(levels.size(), 3u);
  EXPECT_EQ(levels[0].shape(), (Shape{2, 64, 48, 32, 32}));
  EXPECT_EQ(levels[1].shape(), (Shape{2, 64, 24, 16, 16}));
  EXPECT_EQ(levels[2].shape(), (Shape{2, 64, 12, 8, 8}));
  for (const auto& l : levels)
    for (float v : l.value().data) ASSERT_EQ(v, 0.0f);
}

TEST(Frustum, SharedPointsAgreeAcrossViews) {
  std::mt19937_64 rng(18);
  const auto cam_a = square_camera({0.2, 0.1, 1.4}, {0, 0, 0}, 8, 14);
  CameraParams cam_b = cam_a;  // rolled by 180 degrees: rays coincide with flipped pixel order
  const Mat3 flip = Eigen::Vector3d(-1, -1, 1).asDiagonal();
  cam_b.R = flip * cam_a.R;
  cam_b.T = flip * cam_a.T;
  Points verts = random_points(rng, 30, 0.3);
  const CondConfig cfg{.feature_dim = 2, .encoder_channels = {2, 2, 3}, .grid_size = 6, .voxel_size = 0.05, .frustum_depth = 5};
  auto plan = plan_conditioning<double>(cfg, {cam_a, cam_b}, verts, 8, 8);
  const auto volume = random_tensor({216, 3}, rng);
  const auto base = frustum_base(plan, Var<double>::constant(volume)).value();
  const auto samples = sample_frustum_points(cam_a, 5, 8, 8);
  const auto direct = trilinear_interpolate(volume, plan.volume, samples.points);
  Index nonzero = 0;
  for (Index c = 0; c < 3; ++c) {
    for (Index k = 0; k < 5; ++k) {
      for (Index i = 0; i < 8; ++i) {
        for (Index j = 0; j < 8; ++j) {
          const double a = base[(((0 * 3 + c) * 5 + k) * 8 + i) * 8 + j];
          const double b = base[(((1 * 3 + c) * 5 + k) * 8 + (7 - i)) * 8 + (7 - j)];
          EXPECT_EQ(a, b);
          EXPECT_NEAR(a, direct[((k * 8 + i) * 8 + j) * 3 + c], 1e-12);
          nonzero += a != 0.0;
        }
      }
    }
  }
  EXPECT_GT(nonzero, 50);
}

struct MicroSetup {
  std::vector<CameraParams> cameras;
  Points mesh;
  CondConfig cfg{.feature_dim = 2,
                 .encoder_channels = {2, 2, 2},
                 .grid_size = 4,
                 .voxel_size = 0.08,
                 .frustum_depth = 4,
                 .levels = 2,
                 .pyramid_channels = 2};
  MicroSetup() {
    std::mt19937_64 rng(19);
    mesh = random_points(rng, 10, 0.15);
    cameras = {square_camera({0.1, 0.2, 1.2}, {0, 0, 0}, 6, 9), square_camera({1.0, -0.1, 0.7}, {0, 0, 0}, 6, 9)};
  }
};

TEST(Conditioning, EndToEndGradientsMatchFiniteDifferences) {
  MicroSetup s;
  Rng prng(20);
  ad::ParamSet<double> ps;
  auto net = CondNet<double>::create(s.cfg, ps, "", prng);
  const auto plan = plan_conditioning<double>(s.cfg, s.cameras, s.mesh, 6, 6);
  std::mt19937_64 rng(21);
  auto images = Var<double>::parameter(random_tensor({2, 3, 6, 6}, rng));
  const auto probe = condition(net, plan, images);
  std::vector<Tensor<double>> weights;
  for (const auto& l : probe) weights.push_back(random_tensor(l.shape(), rng));
  std::vector<Var<double>> leaves{images};
  for (auto& [name, v] : ps.entries()) leaves.push_back(v);
  const double err = testing::max_relative_grad_error(leaves, [&] {
    const auto levels = condition(net, plan, images);
    Var<double> loss = ad::weighted_sum(levels[0], weights[0]);
    for (std::size_t l = 1; l < levels.size(); ++l) loss = ad::add(loss, ad::weighted_sum(levels[l], weights[l]));
    return loss;
  }, 6, 1e-6);
  EXPECT_LT(err, 1e-4);
  Index nonzero = 0;
  for (double v : probe[0].value().data) nonzero += v != 0.0;
  EXPECT_GT(nonzero, 10);
}

TEST(Conditioning, DeterministicAcrossRuns) {
  MicroSetup s;
  auto run = [&] {
    Rng prng(22);
    ad::ParamSet<double> ps;
    auto net = CondNet<double>::create(s.cfg, ps, "", prng);
    const auto plan = plan_conditioning<double>(s.cfg, s.cameras, s.mesh, 6, 6);
    std::mt19937_64 rng(23);
    auto levels = condition(net, plan, Var<double>::constant(random_tensor({2, 3, 6, 6}, rng)));
    std::vector<double> flat;
    for (auto& l : levels) flat.insert(flat.end(), l.value().data.begin(), l.value().data.end());
    return flat;
  };
  EXPECT_EQ(run(), run());
}

TEST(Conditioning, RunsAtBothHeadDensities) {
  const std::vector<CameraParams> cameras{square_camera({0, 0.1, 1.3}, {0, 0, 0}, 8, 12),
                                          square_camera({0.9, 0.1, 0.9}, {0, 0, 0}, 8, 12)};
  CondConfig cfg{.feature_dim = 2, .encoder_channels = {2, 2, 4}, .grid_size = 8, .frustum_depth = 4, .levels = 2,
                 .pyramid_channels = 2};
  std::size_t sites[2]{};
  for (int sub : {2, 3}) {
    synth::HeadModelConfig hc;
    hc.subdivisions = sub;
    const auto head = synth::build_head_model(hc);
    ASSERT_EQ(head.vertex_count(), sub == 2 ? 162 : 642);
    Rng prng(26);
    ad::ParamSet<double> ps;
    auto net = CondNet<double>::create(cfg, ps, "", prng);
    const auto plan = plan_conditioning<double>(cfg, cameras, head.template_vertices, 8, 8);
    EXPECT_EQ(plan.voxels.assign.cols, head.vertex_count());
    sites[sub - 2] = plan.voxels.coords.size();
    std::mt19937_64 rng(27);
    const auto levels = condition(net, plan, Var<double>::constant(random_tensor({2, 3, 8, 8}, rng)));
    ASSERT_EQ(levels.size(), 2u);
    EXPECT_EQ(levels[0].shape(), (Shape{2, 2, 4, 8, 8}));
    Index nonzero = 0;
    for (double v : levels[0].value().data) nonzero += v != 0.0;
    EXPECT_GT(nonzero, 0);
  }
  EXPECT_GT(sites[1], sites[0]);
}

TEST(Conditioning, MeshOutsideEveryViewGivesZeros) {
  MicroSetup s;
  s.mesh.col(2).array() += 10.0;  // behind/beyond every camera
  Rng prng(24);
  ad::ParamSet<double> ps;
  auto net = CondNet<double>::create(s.cfg, ps, "", prng);
  for (auto& [name, v] : ps.entries()) {
    if (name.find("bias") != std::string::npos) std::fill(v.mutable_value().data.begin(), v.mutable_value().data.end(), 0.3);
  }
  const auto plan = plan_conditioning<double>(s.cfg, s.cameras, s.mesh, 6, 6);
  std::mt19937_64 rng(25);
  const auto images = Var<double>::constant(random_tensor({2, 3, 6, 6}, rng));
  const auto volume = encode_volume(net, plan, lift_noise_features(net, images));
  for (double v : volume.value().data) ASSERT_EQ(v, 0.0);
  for (const auto& l : condition(net, plan, images))
    for (double v : l.value().data) ASSERT_EQ(v, 0.0);
}

}  // namespace
}  // namespace morphdiff::cond
