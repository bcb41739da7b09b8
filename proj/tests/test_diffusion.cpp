// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "morphdiff/diffusion.hpp"

namespace morphdiff::diffusion {
namespace {

double mean_of(const Tensor<double>& t) {
  double m = 0;
  for (double v : t.data) m += v;
  return m / static_cast<double>(t.size());
}

double std_of(const Tensor<double>& t) {
  const double m = mean_of(t);
  double v = 0;
  for (double x : t.data) v += (x - m) * (x - m);
  return std::sqrt(v / static_cast<double>(t.size() - 1));
}

TEST(Schedule, SingleStep) {
  const auto s = make_noise_schedule(1, 0.5, 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(1), 0.5);
  EXPECT_DOUBLE_EQ(s.sigma_at(1), std::sqrt(0.5));
}

TEST(Schedule, TwoStepProduct) {
  const auto s = make_noise_schedule(2, 0.1, 0.2);
  EXPECT_DOUBLE_EQ(s.beta_at(1), 0.1);
  EXPECT_DOUBLE_EQ(s.beta_at(2), 0.2);
  EXPECT_NEAR(s.alpha_bar_at(1), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar_at(2), 0.72, 1e-15);
}

TEST(Schedule, DefaultInvariants) {
  const auto s = make_noise_schedule();
  ASSERT_EQ(s.steps, 1000);
  double prod = 1;
  for (Index t = 1; t <= s.steps; ++t) {
    prod *= 1 - s.beta_at(t);
    EXPECT_GT(s.beta_at(t), 0);
    EXPECT_LT(s.beta_at(t), 1);
    EXPECT_NEAR(s.sigma_at(t) * s.sigma_at(t), s.beta_at(t), 1e-15);
    if (t > 1) EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
  }
  EXPECT_NEAR(s.alpha_bar_at(1000), prod, 1e-15);
  EXPECT_LT(s.alpha_bar_at(1000), 5e-5);
  EXPECT_DOUBLE_EQ(s.beta_at(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta_at(1000), 0.02);
}

TEST(Schedule, RejectsInvalidParameters) {
  EXPECT_THROW(make_noise_schedule(0), ConfigError);
  EXPECT_THROW(make_noise_schedule(10, 0.0, 0.1), ConfigError);
  EXPECT_THROW(make_noise_schedule(10, 0.2, 0.1), ConfigError);
  EXPECT_THROW(make_noise_schedule(10, 0.1, 1.0), ConfigError);
}

TEST(ForwardDiffuse, LimitsAndLinearity) {
  Rng rng(1);
  const Shape shape{2, 3, 4, 4};
  const auto x0 = standard_normal<double>(shape, rng);
  const auto eps = standard_normal<double>(shape, rng);
  const auto tiny = make_noise_schedule(5, 1e-14, 1e-14);
  const auto same = forward_diffuse(x0, 5, eps, tiny);
  for (Index i = 0; i < x0.size(); ++i) EXPECT_NEAR(same[i], x0[i], 1e-6);
  const auto s = make_noise_schedule();
  const auto no_noise = forward_diffuse(x0, 300, Tensor<double>(shape), s);
  for (Index i = 0; i < x0.size(); ++i) EXPECT_DOUBLE_EQ(no_noise[i], std::sqrt(s.alpha_bar_at(300)) * x0[i]);
  const auto x1 = standard_normal<double>(shape, rng);
  const auto e1 = standard_normal<double>(shape, rng);
  Tensor<double> xs(shape), es(shape);
  for (Index i = 0; i < x0.size(); ++i) {
    xs[i] = 2 * x0[i] - x1[i];
    es[i] = 2 * eps[i] - e1[i];
  }
  const auto a = forward_diffuse(x0, 77, eps, s);
  const auto b = forward_diffuse(x1, 77, e1, s);
  const auto c = forward_diffuse(xs, 77, es, s);
  EXPECT_EQ(c.shape, shape);
  for (Index i = 0; i < x0.size(); ++i) EXPECT_NEAR(c[i], 2 * a[i] - b[i], 1e-12);
  EXPECT_THROW(forward_diffuse(x0, 77, Tensor<double>({2, 3, 4}), s), ConfigError);
}

TEST(ForwardDiffuse, ViewsAreIndependent) {
  Rng rng(2);
  const Shape shape{2, 3, 4, 4};
  const auto s = make_noise_schedule();
  auto x0 = standard_normal<double>(shape, rng);
  auto eps = standard_normal<double>(shape, rng);
  const auto before = forward_diffuse(x0, 500, eps, s);
  for (Index i = 48; i < 96; ++i) {
    x0[i] += 1.0;
    eps[i] -= 2.0;
  }
  const auto after = forward_diffuse(x0, 500, eps, s);
  for (Index i = 0; i < 48; ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(ForwardDiffuse, StepCompositionMatchesMarginal) {
  const auto s = make_noise_schedule(100, 1e-3, 0.05);
  const Index n = 100000;
  const Index t = 20;
  Rng rng(3);
  Tensor<double> x({n}, 3.0);
  for (Index k = 1; k <= t; ++k) x = forward_step(x, k, standard_normal<double>({n}, rng), s);
  const double mean = std::sqrt(s.alpha_bar_at(t)) * 3.0;
  const double var = 1.0 - s.alpha_bar_at(t);
  EXPECT_NEAR(mean_of(x) / mean, 1.0, 0.01);
  EXPECT_NEAR(std_of(x) * std_of(x) / var, 1.0, 0.02);
}

TEST(ReverseStep, ExactNoiseRecoversDataInOneStep) {
  const auto s = make_noise_schedule(1, 0.3, 0.3);
  Rng rng(4);
  const auto x0 = standard_normal<double>({2, 3, 4, 4}, rng);
  const auto eps = standard_normal<double>({2, 3, 4, 4}, rng);
  const auto x1 = forward_diffuse(x0, 1, eps, s);
  const auto back = reverse_step(x1, eps, 1, s, rng);
  for (Index i = 0; i < x0.size(); ++i) EXPECT_NEAR(back[i], x0[i], 1e-12);
}

TEST(ReverseStep, ScalarMean) { EXPECT_NEAR(ddpm_mean(1.0, 0.0, 0.19, 0.5), 1.0 / 0.9, 1e-15); }

TEST(ReverseStep, DeterministicWithoutNoise) {
  const auto s = make_noise_schedule();
  Rng a(5), b(6);
  Tensor<double> x({4}, std::vector<double>{0.1, -0.2, 0.3, 1.5});
  Tensor<double> e({4}, std::vector<double>{0.5, 0.5, -1, 0});
  EXPECT_EQ(reverse_step(x, e, 1, s, a).data, reverse_step(x, e, 1, s, b).data);
}

TEST(ReverseStep, OraclePredictorConcentratesAtDataPoint) {
  const auto s = make_noise_schedule();
  const double target = 0.3;
  NoisePredictor<double> oracle = [&](const Tensor<double>& x, Index t) {
    Tensor<double> eps(x.shape);
    const double ab = s.alpha_bar_at(t);
    for (Index i = 0; i < x.size(); ++i) eps[i] = (x[i] - std::sqrt(ab) * target) / std::sqrt(1 - ab);
    return eps;
  };
  Rng rng(7);
  const auto samples = ancestral_sample(oracle, s, {1000}, rng);
  EXPECT_LT(std_of(samples), 0.05);
  EXPECT_NEAR(mean_of(samples), target, 0.01);
}

TEST(TrainingLoss, OracleAndZeroPredictors) {
  const auto s = make_noise_schedule();
  Rng data_rng(8);
  const auto x0 = standard_normal<double>({2, 3, 32, 32}, data_rng);
  Rng rng(9);
  Index seen_t = 0;
  const DifferentiablePredictor<double> oracle = [&](const ad::Var<double>& x_t, Index t) {
    seen_t = t;
    Tensor<double> eps(x0.shape);
    const double ab = s.alpha_bar_at(t);
    for (Index i = 0; i < x0.size(); ++i) eps[i] = (x_t.value()[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1 - ab);
    return ad::Var<double>::constant(eps);
  };
  const auto exact = training_loss(x0, s, rng, oracle);
  EXPECT_EQ(exact.t, seen_t);
  EXPECT_LT(exact.loss.value()[0], 1e-20);
  const DifferentiablePredictor<double> zero = [&](const ad::Var<double>&, Index) {
    return ad::Var<double>::constant(Tensor<double>(x0.shape));
  };
  double total = 0;
  for (int i = 0; i < 20; ++i) total += training_loss(x0, s, rng, zero).loss.value()[0];
  EXPECT_NEAR(total / 20, 1.0, 0.02);
}

TEST(TrainingLoss, NonFiniteLossIsTrainingFault) {
  const auto s = make_noise_schedule();
  Rng rng(10);
  const Tensor<double> x0({1, 3, 2, 2}, 0.5);
  const DifferentiablePredictor<double> broken = [&](const ad::Var<double>&, Index) {
    return ad::Var<double>::constant(Tensor<double>(x0.shape, std::numeric_limits<double>::quiet_NaN()));
  };
  EXPECT_THROW(training_loss(x0, s, rng, broken), TrainingFault);
}

TEST(Ddim, TimestepSubsequence) {
  const auto ts = ddim_timesteps(1000, kDefaultDdimSteps);
  ASSERT_EQ(ts.size(), 50u);
  EXPECT_EQ(ts.front(), 1);
  EXPECT_EQ(ts.back(), 981);
  for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_EQ(ts[i] - ts[i - 1], 20);
  const auto all = ddim_timesteps(7, 7);
  for (Index i = 0; i < 7; ++i) EXPECT_EQ(all[static_cast<std::size_t>(i)], i + 1);
  EXPECT_THROW(ddim_timesteps(10, 0), ConfigError);
  EXPECT_THROW(ddim_timesteps(10, 11), ConfigError);
}

TEST(Ddim, OracleTelescopesToTarget) {
  const auto s = make_noise_schedule();
  Rng trng(11);
  const auto target = standard_normal<double>({2, 3, 4, 4}, trng);
  NoisePredictor<double> oracle = [&](const Tensor<double>& x, Index t) {
    Tensor<double> eps(x.shape);
    const double ab = s.alpha_bar_at(t);
    for (Index i = 0; i < x.size(); ++i) eps[i] = (x[i] - std::sqrt(ab) * target[i]) / std::sqrt(1 - ab);
    return eps;
  };
  for (Index steps : {1, 7, 50, 1000}) {
    Rng rng(12);
    const auto out = ddim_sample(oracle, s, steps, target.shape, rng);
    for (Index i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], target[i], 1e-3) << "steps " << steps;
  }
}

TEST(Ddim, BoundedEstimatesClampOutOfRangeTarget) {
  const auto s = make_noise_schedule();
  Tensor<double> target({4}, std::vector<double>{2.0, -3.0, 0.25, -0.5});
  NoisePredictor<double> oracle = [&](const Tensor<double>& x, Index t) {
    Tensor<double> eps(x.shape);
    const double ab = s.alpha_bar_at(t);
    for (Index i = 0; i < x.size(); ++i) eps[i] = (x[i] - std::sqrt(ab) * target[i]) / std::sqrt(1 - ab);
    return eps;
  };
  Rng a(13), b(13);
  const auto free = ddim_sample(oracle, s, 50, target.shape, a);
  const auto bounded = ddim_sample(oracle, s, 50, target.shape, b, 0.0, 1.0);
  for (Index i = 0; i < 4; ++i) {
    EXPECT_NEAR(free[i], target[i], 1e-3);
    EXPECT_NEAR(bounded[i], std::clamp(target[i], -1.0, 1.0), 1e-9);
  }
}

TEST(Ddim, FullStepsWithEtaOneMatchesAncestral) {
  const auto s = make_noise_schedule();
  // Gaussian data N(mu, sd^2) has the closed-form optimal noise predictor.
  const double mu = 0.5, sd = 0.4;
  NoisePredictor<double> optimal = [&](const Tensor<double>& x, Index t) {
    Tensor<double> eps(x.shape);
    const double ab = s.alpha_bar_at(t);
    for (Index i = 0; i < x.size(); ++i) {
      eps[i] = std::sqrt(1 - ab) * (x[i] - std::sqrt(ab) * mu) / (ab * sd * sd + 1 - ab);
    }
    return eps;
  };
  Rng ra(13), rb(13);
  const auto ancestral = ancestral_sample(optimal, s, {1000}, ra);
  const auto ddim = ddim_sample(optimal, s, 1000, {1000}, rb, 1.0);
  EXPECT_NEAR(mean_of(ddim) / mean_of(ancestral), 1.0, 0.03);
  EXPECT_NEAR(std_of(ddim) / std_of(ancestral), 1.0, 0.03);
  EXPECT_NEAR(mean_of(ancestral), mu, 0.05);
  EXPECT_NEAR(std_of(ancestral), sd, 0.05);
}

TEST(Ddim, ReproducibleWithSeed) {
  const auto s = make_noise_schedule();
  NoisePredictor<double> pred = [](const Tensor<double>& x, Index) {
    Tensor<double> e = x;
    for (auto& v : e.data) v *= 0.5;
    return e;
  };
  Rng a(14), b(14);
  EXPECT_EQ(ddim_sample(pred, s, 20, {3, 2}, a, 0.5).data, ddim_sample(pred, s, 20, {3, 2}, b, 0.5).data);
}

}  // namespace
}  // namespace morphdiff::diffusion
