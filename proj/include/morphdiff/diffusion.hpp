// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Denoising diffusion over a stack of N views: linear-beta schedule, closed-form
// forward noising, the ancestral reverse step, the noise-prediction loss and
// strided DDIM sampling. Timesteps are 1-based (t = 1..T).

#pragma once

#include <functional>
#include <optional>

#include "json.hpp"
#include "morphdiff/ops.hpp"
#include "morphdiff/rng.hpp"

namespace morphdiff::diffusion {

inline constexpr Index kDefaultDdimSteps = 50;

/// Raised when a training step produces a non-finite loss.
class TrainingFault : public RuntimeFault {
 public:
  using RuntimeFault::RuntimeFault;
};

struct NoiseSchedule {
  Index steps = 0;
  double beta_start = 0;
  double beta_end = 0;
  /// Entry t - 1 holds the value for timestep t.
  std::vector<double> beta, alpha, alpha_bar, sigma;

  double beta_at(Index t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
  double alpha_at(Index t) const { return alpha.at(static_cast<std::size_t>(t - 1)); }
  /// alpha_bar(0) = 1 by convention.
  double alpha_bar_at(Index t) const { return t == 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t - 1)); }
  double sigma_at(Index t) const { return sigma.at(static_cast<std::size_t>(t - 1)); }

  nlohmann::json to_json() const { return {{"T", steps}, {"beta_start", beta_start}, {"beta_end", beta_end}}; }
  std::string hash() const { return hash_string(to_json().dump()); }
};

/// Linear beta from beta_start (t = 1) to beta_end (t = T); sigma_t^2 = beta_t.
inline NoiseSchedule make_noise_schedule(Index steps = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
  if (steps < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  double prod = 1.0;
  for (Index t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - b;
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    s.alpha_bar.push_back(prod);
    s.sigma.push_back(std::sqrt(b));
  }
  return s;
}

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  return make_noise_schedule(j.at("T").get<Index>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

template <typename T>
Tensor<T> standard_normal(const Shape& shape, Rng& rng) {
  Tensor<T> t(shape);
  for (auto& v : t.data) v = static_cast<T>(rng.normal());
  return t;
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, elementwise (so independently per view).
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, Index t, const Tensor<T>& noise, const NoiseSchedule& s) {
  if (x0.shape != noise.shape) throw ConfigError("forward_diffuse: noise shape " + shape_str(noise.shape) +
                                                 " does not match " + shape_str(x0.shape));
  if (t < 1 || t > s.steps) throw ConfigError("forward_diffuse: timestep out of range");
  const T a = static_cast<T>(std::sqrt(s.alpha_bar_at(t)));
  const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar_at(t)));
  Tensor<T> out(x0.shape);
  for (Index i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * noise[i];
  return out;
}

/// One forward transition q(x_t | x_{t-1}) = N(sqrt(alpha_t) x_{t-1}, beta_t I).
template <typename T>
Tensor<T> forward_step(const Tensor<T>& prev, Index t, const Tensor<T>& noise, const NoiseSchedule& s) {
  const T a = static_cast<T>(std::sqrt(s.alpha_at(t)));
  const T b = static_cast<T>(std::sqrt(s.beta_at(t)));
  Tensor<T> out(prev.shape);
  for (Index i = 0; i < prev.size(); ++i) out[i] = a * prev[i] + b * noise[i];
  return out;
}

/// Posterior mean (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(1 - beta_t).
inline double ddpm_mean(double x_t, double eps, double beta, double alpha_bar) {
  return (x_t - beta / std::sqrt(1.0 - alpha_bar) * eps) / std::sqrt(1.0 - beta);
}

/// x_{t-1} = mean + sigma_t z, with z = 0 at t = 1.
template <typename T>
Tensor<T> reverse_step(const Tensor<T>& x_t, const Tensor<T>& eps_pred, Index t, const NoiseSchedule& s, Rng& rng) {
  if (t < 1 || t > s.steps) throw ConfigError("reverse_step: timestep out of range");
  if (x_t.shape != eps_pred.shape) throw ConfigError("reverse_step: prediction shape mismatch");
  Tensor<T> out(x_t.shape);
  const double beta = s.beta_at(t);
  const double abar = s.alpha_bar_at(t);
  for (Index i = 0; i < x_t.size(); ++i) out[i] = static_cast<T>(ddpm_mean(x_t[i], eps_pred[i], beta, abar));
  if (t > 1) {
    const double sigma = s.sigma_at(t);
    for (auto& v : out.data) v += static_cast<T>(sigma * rng.normal());
  }
  return out;
}

/// Predicts the noise in x_t at timestep t.
template <typename T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>& x_t, Index t)>;

template <typename T>
using DifferentiablePredictor = std::function<ad::Var<T>(const ad::Var<T>& x_t, Index t)>;

template <typename T>
struct LossSample {
  ad::Var<T> loss;
  Index t = 0;
};

/// Draws t ~ U{1..T} and eps ~ N(0, I) once for all views, noises x0 and returns
/// the mean squared error between eps and the prediction.
template <typename T>
LossSample<T> training_loss(const Tensor<T>& x0, const NoiseSchedule& s, Rng& rng,
                            const DifferentiablePredictor<T>& predictor) {
  const Index t = rng.integer(1, s.steps);
  const auto eps = standard_normal<T>(x0.shape, rng);
  const auto x_t = ad::Var<T>::constant(forward_diffuse(x0, t, eps, s));
  auto pred = predictor(x_t, t);
  auto loss = ad::mse(pred, ad::Var<T>::constant(eps));
  if (!std::isfinite(static_cast<double>(loss.value()[0]))) {
    double norm = 0;
    for (T v : x0.data) norm += static_cast<double>(v) * static_cast<double>(v);
    throw TrainingFault("non-finite loss at t=" + std::to_string(t) + " (|x0|=" + std::to_string(std::sqrt(norm)) + ")");
  }
  return {loss, t};
}

/// Evenly strided timestep subsequence tau_1 < ... < tau_S starting at 1.
inline std::vector<Index> ddim_timesteps(Index total, Index steps) {
  if (steps < 1 || steps > total) throw ConfigError("DDIM steps must be in [1, T]");
  std::vector<Index> ts;
  for (Index i = 0; i < steps; ++i) ts.push_back(i * total / steps + 1);
  return ts;
}

/// DDIM sampling from x ~ N(0, I) of the given shape. eta = 0 is deterministic
/// after the initial draw; eta = 1 with steps = T is ancestral-like with the
/// posterior variance. With `x0_bound`, each x0 estimate is clamped to
/// [-bound, bound] and the noise direction is recomputed from the clamped value.
template <typename T>
Tensor<T> ddim_sample(const NoisePredictor<T>& predict, const NoiseSchedule& s, Index steps, const Shape& shape,
                      Rng& rng, double eta = 0.0, std::optional<double> x0_bound = std::nullopt) {
  const auto ts = ddim_timesteps(s.steps, steps);
  Tensor<T> x = standard_normal<T>(shape, rng);
  for (std::size_t k = ts.size(); k-- > 0;) {
    const Index t = ts[k];
    const Index prev = k == 0 ? 0 : ts[k - 1];
    const double ab = s.alpha_bar_at(t);
    const double ab_prev = s.alpha_bar_at(prev);
    const Tensor<T> eps = predict(x, t);
    const double sigma = eta * std::sqrt((1 - ab_prev) / (1 - ab)) * std::sqrt(1 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1 - ab_prev - sigma * sigma));
    for (Index i = 0; i < x.size(); ++i) {
      const double xi = static_cast<double>(x[i]);
      double e = static_cast<double>(eps[i]);
      double x0 = (xi - std::sqrt(1 - ab) * e) / std::sqrt(ab);
      if (x0_bound && std::abs(x0) > *x0_bound) {
        x0 = std::clamp(x0, -*x0_bound, *x0_bound);
        e = (xi - std::sqrt(ab) * x0) / std::sqrt(1 - ab);
      }
      x[i] = static_cast<T>(std::sqrt(ab_prev) * x0 + dir * e);
    }
    if (sigma > 0) {
      for (auto& v : x.data) v += static_cast<T>(sigma * rng.normal());
    }
  }
  return x;
}

/// Full T-step ancestral sampling with reverse_step.
template <typename T>
Tensor<T> ancestral_sample(const NoisePredictor<T>& predict, const NoiseSchedule& s, const Shape& shape, Rng& rng) {
  Tensor<T> x = standard_normal<T>(shape, rng);
  for (Index t = s.steps; t >= 1; --t) x = reverse_step(x, predict(x, t), t, s, rng);
  return x;
}

}  // namespace morphdiff::diffusion
