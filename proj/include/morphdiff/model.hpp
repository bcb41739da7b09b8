// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// The full multi-view noise predictor: conditioning network, input-image
// encoder and denoiser UNet over one parameter set, plus the noise schedule.
// Images live in [0, 1] on disk and in [-1, 1] inside the model.

#pragma once

#include <memory>

#include "morphdiff/archive.hpp"
#include "morphdiff/condvolume.hpp"
#include "morphdiff/denoiser.hpp"
#include "morphdiff/diffusion.hpp"

namespace morphdiff {

/// Parameter-name prefix of the denoiser UNet (main learning rate group).
inline const std::string kUnetPrefix = "unet.";

struct ModelConfig {
  cond::CondConfig cond;
  unet::DenoiserConfig denoiser;
  Index diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

inline void validate(const ModelConfig& c) {
  cond::validate(c.cond);
  unet::validate(c.denoiser);
  if (c.cond.levels != c.denoiser.levels) throw ConfigError("conditioning and denoiser level counts differ");
  if (c.cond.pyramid_channels != c.denoiser.kv_dim) {
    throw ConfigError("frustum width " + std::to_string(c.cond.pyramid_channels) + " differs from denoiser kv_dim " +
                      std::to_string(c.denoiser.kv_dim));
  }
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"cond", cond::to_json(c.cond)},
          {"denoiser", unet::to_json(c.denoiser)},
          {"diffusion", {{"T", c.diffusion_steps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("cond")) c.cond = cond::cond_config_from_json(j.at("cond"));
  if (j.contains("denoiser")) c.denoiser = unet::denoiser_config_from_json(j.at("denoiser"));
  if (j.contains("diffusion")) {
    const auto& d = j.at("diffusion");
    c.diffusion_steps = d.value("T", c.diffusion_steps);
    c.beta_start = d.value("beta_start", c.beta_start);
    c.beta_end = d.value("beta_end", c.beta_end);
  }
  validate(c);
  return c;
}

template <typename T>
Tensor<T> to_model_space(const Tensor<float>& image) {
  Tensor<T> out(image.shape);
  for (Index i = 0; i < image.size(); ++i) out[i] = static_cast<T>(2 * image[i] - 1);
  return out;
}

template <typename T>
Tensor<float> from_model_space(const Tensor<T>& x) {
  Tensor<float> out(x.shape);
  for (Index i = 0; i < x.size(); ++i) out[i] = std::clamp(static_cast<float>((x[i] + 1) / 2), 0.0f, 1.0f);
  return out;
}

template <typename T>
struct Model {
  ModelConfig config;
  diffusion::NoiseSchedule schedule;
  ad::ParamSet<T> params;
  cond::CondNet<T> cond;
  unet::ImageEncoder<T> image_encoder;
  unet::Denoiser<T> unet;

  /// Parameters are registered in a fixed order from one seeded stream.
  static std::unique_ptr<Model> create(const ModelConfig& c, std::uint64_t seed) {
    validate(c);
    auto m = std::make_unique<Model>();
    m->config = c;
    m->schedule = diffusion::make_noise_schedule(c.diffusion_steps, c.beta_start, c.beta_end);
    Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
    m->cond = cond::CondNet<T>::create(c.cond, m->params, "cond.", rng);
    m->image_encoder = unet::ImageEncoder<T>::create(m->params, "image_encoder.", c.denoiser, rng);
    m->unet = unet::Denoiser<T>::create(c.denoiser, m->params, kUnetPrefix, rng);
    return m;
  }

  /// Predicted noise [N, 3, H, W] for noisy target views x_t, given the input
  /// image [1, 3, H, W] (model space) and the conditioning plan of the target
  /// cameras and mesh.
  ad::Var<T> predict(const cond::ConditioningPlan<T>& plan, const ad::Var<T>& input_image, const ad::Var<T>& x_t,
                     Index t) const {
    const auto pyramid = cond::condition(cond, plan, x_t);
    const auto embedding = image_encoder(input_image);
    return unet(x_t, t, embedding, pyramid);
  }

  cond::ConditioningPlan<T> plan(const std::vector<CameraParams>& cameras, const Points& mesh) const {
    return cond::plan_conditioning<T>(config.cond, cameras, mesh, config.denoiser.image_size,
                                      config.denoiser.image_size);
  }

  void save(Archive& ar) const {
    ar.meta["model_config"] = to_json(config);
    ar.meta["schedule_hash"] = schedule.hash();
    for (const auto& [name, v] : params.entries()) ar.put<T>("param/" + name, v.value());
  }

  struct LoadReport {
    std::vector<std::string> missing, extra;
  };

  /// Loads parameters written by save(), matching by name. Parameters absent
  /// from the archive keep their current values and are reported as missing.
  LoadReport load(const Archive& ar) {
    if (ar.meta.value("schedule_hash", std::string{}) != schedule.hash()) {
      throw ConfigError("checkpoint noise schedule differs from the model's");
    }
    LoadReport report;
    for (auto& [name, v] : params.entries()) {
      const std::string key = "param/" + name;
      if (!ar.contains(key)) {
        report.missing.push_back(name);
        continue;
      }
      auto t = ar.get<T>(key);
      if (t.shape != v.shape()) throw ConfigError("checkpoint parameter " + name + " has shape " + shape_str(t.shape));
      v.mutable_value() = std::move(t);
    }
    for (const auto& key : ar.names()) {
      if (key.rfind("param/", 0) == 0 && !params.find(key.substr(6))) report.extra.push_back(key.substr(6));
    }
    return report;
  }

  static std::unique_ptr<Model> from_archive(const Archive& ar) {
    auto m = create(model_config_from_json(ar.meta.at("model_config")), 0);
    m->load(ar);
    return m;
  }
};

/// Samples N target views (values in [0, 1]) with DDIM; x0 estimates are kept
/// inside the model-space image range.
template <typename T>
Tensor<float> sample_views(const Model<T>& model, const cond::ConditioningPlan<T>& plan, const Tensor<float>& input_image,
                           Rng& rng, Index steps = diffusion::kDefaultDdimSteps, double eta = 0.0) {
  const Index h = input_image.dim(1), w = input_image.dim(2);
  auto input = to_model_space<T>(input_image);
  input.shape = {1, 3, h, w};
  const auto input_var = ad::Var<T>::constant(input);
  const diffusion::NoisePredictor<T> predict = [&](const Tensor<T>& x, Index t) {
    const auto eps = model.predict(plan, input_var, ad::Var<T>::constant(x), t);
    return eps.value();
  };
  return from_model_space(diffusion::ddim_sample(predict, model.schedule, steps, {plan.views, 3, h, w}, rng, eta, 1.0));
}

}  // namespace morphdiff
