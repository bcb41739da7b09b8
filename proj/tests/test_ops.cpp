// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "morphdiff/ops.hpp"

namespace morphdiff {
namespace {

using ad::Var;
using testing::max_relative_grad_error;
using testing::random_tensor;

Tensor<double> probe_weights(const Shape& shape, std::mt19937_64& rng) { return random_tensor(shape, rng); }

TEST(Ops, ElementwiseGradients) {
  std::mt19937_64 rng(1);
  auto a = Var<double>::parameter(random_tensor({2, 3, 4}, rng));
  auto b = Var<double>::parameter(random_tensor({2, 3, 4}, rng));
  auto bias = Var<double>::parameter(random_tensor({3}, rng));
  const auto w = probe_weights({2, 3, 4}, rng);
  auto loss = [&] {
    auto y = ad::silu(ad::add_channel_bias(ad::mul(ad::add(a, ad::scale(b, 0.5)), ad::sub(a, b)), bias));
    return ad::weighted_sum(y, w);
  };
  EXPECT_LT(max_relative_grad_error({a, b, bias}, loss, 24), 1e-6);
}

TEST(Ops, PermuteConcatReshapeMatchManualIndexing) {
  Tensor<double> t({2, 3, 4});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  auto x = Var<double>::constant(t);
  auto p = ad::permute(x, {2, 0, 1});
  ASSERT_EQ(p.shape(), (Shape{4, 2, 3}));
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j)
      for (Index k = 0; k < 4; ++k) EXPECT_EQ(p.value()[(k * 2 + i) * 3 + j], t[(i * 3 + j) * 4 + k]);
  auto c = ad::concat_channels(x, x);
  EXPECT_EQ(c.shape(), (Shape{2, 6, 4}));
  EXPECT_EQ(c.value()[(1 * 6 + 4) * 4 + 2], t[(1 * 3 + 1) * 4 + 2]);

  std::mt19937_64 rng(2);
  auto y = Var<double>::parameter(random_tensor({2, 3, 4}, rng));
  auto z = Var<double>::parameter(random_tensor({2, 1, 4}, rng));
  const auto w = probe_weights({4, 2, 4}, rng);
  auto loss = [&] { return ad::weighted_sum(ad::permute(ad::concat_channels(y, z), {1, 0, 2}), w); };
  EXPECT_LT(max_relative_grad_error({y, z}, loss, 32), 1e-6);
}

TEST(Ops, LinearAndChannelLinearGradients) {
  std::mt19937_64 rng(3);
  auto x = Var<double>::parameter(random_tensor({5, 4}, rng));
  auto w = Var<double>::parameter(random_tensor({3, 4}, rng));
  auto b = Var<double>::parameter(random_tensor({3}, rng));
  const auto pw = probe_weights({5, 3}, rng);
  EXPECT_LT(max_relative_grad_error({x, w, b}, [&] { return ad::weighted_sum(ad::linear(x, w, b), pw); }), 1e-6);

  auto xc = Var<double>::parameter(random_tensor({2, 4, 3, 2}, rng));
  const auto pc = probe_weights({2, 3, 3, 2}, rng);
  EXPECT_LT(max_relative_grad_error({xc, w, b}, [&] { return ad::weighted_sum(ad::channel_linear(xc, w, b), pc); }),
            1e-6);
}

TEST(Ops, Conv2dMatchesDirectLoop) {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({2, 3, 5, 6}, rng);
  const auto w = random_tensor({4, 3, 3, 3}, rng);
  const auto b = random_tensor({4}, rng);
  for (Index stride : {1, 2}) {
    auto y = ad::conv2d(Var<double>::constant(x), Var<double>::constant(w), Var<double>::constant(b), stride, 1);
    const Index ho = (5 + 2 - 3) / stride + 1;
    const Index wo = (6 + 2 - 3) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{2, 4, ho, wo}));
    for (Index n = 0; n < 2; ++n)
      for (Index co = 0; co < 4; ++co)
        for (Index i = 0; i < ho; ++i)
          for (Index j = 0; j < wo; ++j) {
            double acc = b[co];
            for (Index ci = 0; ci < 3; ++ci)
              for (Index ki = 0; ki < 3; ++ki)
                for (Index kj = 0; kj < 3; ++kj) {
                  const Index ii = i * stride - 1 + ki;
                  const Index jj = j * stride - 1 + kj;
                  if (ii < 0 || ii >= 5 || jj < 0 || jj >= 6) continue;
                  acc += w[((co * 3 + ci) * 3 + ki) * 3 + kj] * x[((n * 3 + ci) * 5 + ii) * 6 + jj];
                }
            EXPECT_NEAR(y.value()[((n * 4 + co) * ho + i) * wo + j], acc, 1e-12);
          }
  }
}

TEST(Ops, ConvGradients) {
  std::mt19937_64 rng(5);
  auto x2 = Var<double>::parameter(random_tensor({2, 2, 4, 5}, rng));
  auto w2 = Var<double>::parameter(random_tensor({3, 2, 3, 3}, rng));
  auto b2 = Var<double>::parameter(random_tensor({3}, rng));
  const auto p2 = probe_weights({2, 3, 2, 3}, rng);
  EXPECT_LT(max_relative_grad_error({x2, w2, b2}, [&] { return ad::weighted_sum(ad::conv2d(x2, w2, b2, 2, 1), p2); }),
            1e-6);

  auto x3 = Var<double>::parameter(random_tensor({1, 2, 3, 4, 4}, rng));
  auto w3 = Var<double>::parameter(random_tensor({2, 2, 3, 3, 3}, rng));
  const auto p3 = probe_weights({1, 2, 3, 4, 4}, rng);
  EXPECT_LT(max_relative_grad_error({x3, w3}, [&] { return ad::weighted_sum(ad::conv3d(x3, w3), p3); }), 1e-6);
}

TEST(Ops, PoolingAndUpsampleGradients) {
  std::mt19937_64 rng(6);
  auto x = Var<double>::parameter(random_tensor({2, 2, 3, 3}, rng));
  const auto pu = probe_weights({2, 2, 6, 6}, rng);
  const auto pm = probe_weights({2, 2}, rng);
  EXPECT_LT(max_relative_grad_error({x}, [&] { return ad::weighted_sum(ad::upsample2x(x), pu); }), 1e-6);
  EXPECT_LT(max_relative_grad_error({x}, [&] { return ad::weighted_sum(ad::mean_spatial(x), pm); }), 1e-6);
}

TEST(Ops, GroupNormMatchesDirectStatisticsAndGradients) {
  std::mt19937_64 rng(12);
  auto x = Var<double>::parameter(random_tensor({2, 6, 3, 2}, rng, 2.0));
  auto g = Var<double>::parameter(random_tensor({6}, rng));
  auto b = Var<double>::parameter(random_tensor({6}, rng));
  const auto y = ad::group_norm(x, g, b, 3, 0.0).value();
  // Each (sample, group) slice: two channels of six positions.
  for (Index s = 0; s < 2; ++s) {
    for (Index grp = 0; grp < 3; ++grp) {
      double mean = 0, sq = 0;
      for (Index i = 0; i < 12; ++i) mean += x.value()[(s * 6 + grp * 2) * 6 + i] / 12;
      for (Index i = 0; i < 12; ++i) sq += std::pow(x.value()[(s * 6 + grp * 2) * 6 + i] - mean, 2) / 12;
      for (Index i = 0; i < 12; ++i) {
        const Index c = grp * 2 + i / 6;
        const Index k = (s * 6 + grp * 2) * 6 + i;
        EXPECT_NEAR(y[k], g.value()[c] * (x.value()[k] - mean) / std::sqrt(sq) + b.value()[c], 1e-12);
      }
    }
  }
  const auto p = probe_weights({2, 6, 3, 2}, rng);
  EXPECT_LT(max_relative_grad_error({x, g, b}, [&] { return ad::weighted_sum(ad::group_norm(x, g, b, 3), p); }), 1e-6);
  EXPECT_THROW(ad::group_norm(x, g, b, 4), ConfigError);
}

TEST(Ops, SparseApplyAndSparseConvGradients) {
  std::mt19937_64 rng(7);
  ad::SparseMatrix<double> m;
  m.cols = 4;
  m.push_row({{0, 0.5}, {3, -1.0}});
  m.push_row({});
  m.push_row({{1, 2.0}, {2, 0.25}, {3, 1.0}});
  auto x = Var<double>::parameter(random_tensor({4, 3}, rng));
  const auto ps = probe_weights({3, 3}, rng);
  auto y = ad::sparse_apply(m, x);
  EXPECT_NEAR(y.value()[0], 0.5 * x.value()[0] - x.value()[9], 1e-15);
  EXPECT_EQ(y.value()[3], 0.0);
  EXPECT_LT(max_relative_grad_error({x}, [&] { return ad::weighted_sum(ad::sparse_apply(m, x), ps); }), 1e-6);

  auto rules = std::make_shared<ad::Rulebook>();
  rules->in_sites = 4;
  rules->out_sites = 2;
  rules->pairs = {{{0, 0}, {1, 1}}, {{2, 0}}, {{3, 1}, {1, 0}}};
  auto w = Var<double>::parameter(random_tensor({3, 3, 2}, rng));
  const auto pc = probe_weights({2, 2}, rng);
  EXPECT_LT(max_relative_grad_error({x, w}, [&] { return ad::weighted_sum(ad::sparse_conv(x, w, rules), pc); }), 1e-6);
}

TEST(Ops, DepthAttentionGradientsAndMse) {
  std::mt19937_64 rng(8);
  auto q = Var<double>::parameter(random_tensor({2, 3, 5}, rng));
  auto k = Var<double>::parameter(random_tensor({2, 3, 4, 5}, rng));
  auto v = Var<double>::parameter(random_tensor({2, 2, 4, 5}, rng));
  const auto p = probe_weights({2, 2, 5}, rng);
  EXPECT_LT(max_relative_grad_error({q, k, v}, [&] { return ad::weighted_sum(ad::depth_attention(q, k, v, 0.7), p); },
                                    24),
            1e-5);
  auto t = Var<double>::constant(random_tensor({2, 2, 5}, rng));
  EXPECT_LT(max_relative_grad_error({v}, [&] { return ad::mse(ad::depth_attention(q, k, v, 0.7), t); }), 1e-6);
}

TEST(Ops, BackwardRejectsNonScalarRootWithoutSeed) {
  auto x = Var<double>::parameter(Tensor<double>({2}, 1.0));
  auto y = ad::scale(x, 2.0);
  EXPECT_THROW(ad::backward(y), ConfigError);
}

}  // namespace
}  // namespace morphdiff
