// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Training loop: per-step item sampling, the noise-prediction loss, global
// norm clipping, decoupled-weight-decay Adam with a warm-up on the denoiser
// learning rate, checkpoints and an append-only CSV log. Every step draws
// from its own seed derived from (seed, step), so a resumed run replays the
// uninterrupted one exactly.

#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "morphdiff/model.hpp"
#include "morphdiff/synthdata.hpp"

namespace morphdiff::train {

struct TrainConfig {
  Index total_steps = 6000;
  /// Training items per step; each contributes 1 input and N target images.
  Index batch_items = 2;
  Index lr_warmup_steps = 100;
  double lr_start = 1e-6;
  double lr_peak = 5e-5;
  /// Learning rate of everything outside the denoiser UNet.
  double lr_aux = 5e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  std::vector<std::string> expression_exclusions;
  bool shuffled = true;
  Index target_views = 8;
  /// 0 disables intermediate checkpoints; the final one is always written.
  Index checkpoint_every = 500;
};

inline void validate(const TrainConfig& c) {
  if (c.total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (c.batch_items < 1) throw ConfigError("batch_items must be >= 1");
  // A zero-step run only writes the initial checkpoint, whatever the warm-up length.
  if (c.lr_warmup_steps < 0 || (c.total_steps > 0 && c.lr_warmup_steps > c.total_steps)) {
    throw ConfigError("lr_warmup_steps must lie in [0, total_steps]");
  }
  if (!(c.lr_start >= 0 && c.lr_start <= c.lr_peak)) throw ConfigError("need 0 <= lr_start <= lr_peak");
  if (!(c.lr_aux >= 0) || !(c.weight_decay >= 0)) throw ConfigError("learning rates and weight decay must be >= 0");
  if (!(c.beta1 >= 0 && c.beta1 < 1 && c.beta2 >= 0 && c.beta2 < 1 && c.adam_eps > 0)) {
    throw ConfigError("Adam moments need betas in [0, 1) and eps > 0");
  }
  if (!(c.grad_clip > 0)) throw ConfigError("grad_clip must be > 0");
  if (c.checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"total_steps", c.total_steps},
          {"batch_items", c.batch_items},
          {"lr_warmup_steps", c.lr_warmup_steps},
          {"lr_start", c.lr_start},
          {"lr_peak", c.lr_peak},
          {"lr_aux", c.lr_aux},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"expression_exclusions", c.expression_exclusions},
          {"shuffled", c.shuffled},
          {"target_views", c.target_views},
          {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.total_steps = j.value("total_steps", c.total_steps);
  c.batch_items = j.value("batch_items", c.batch_items);
  c.lr_warmup_steps = j.value("lr_warmup_steps", c.lr_warmup_steps);
  c.lr_start = j.value("lr_start", c.lr_start);
  c.lr_peak = j.value("lr_peak", c.lr_peak);
  c.lr_aux = j.value("lr_aux", c.lr_aux);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.expression_exclusions = j.value("expression_exclusions", c.expression_exclusions);
  c.shuffled = j.value("shuffled", c.shuffled);
  c.target_views = j.value("target_views", c.target_views);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  validate(c);
  return c;
}

struct LearningRates {
  double main = 0;
  double aux = 0;
};

/// Linear warm-up of the denoiser rate from lr_start to lr_peak, then constant.
inline LearningRates lr_at(Index step, const TrainConfig& c) {
  if (step < 0) throw ConfigError("lr_at: step must be >= 0");
  if (c.lr_warmup_steps == 0 || step >= c.lr_warmup_steps) return {c.lr_peak, c.lr_aux};
  const double f = static_cast<double>(step) / static_cast<double>(c.lr_warmup_steps);
  return {c.lr_start + (c.lr_peak - c.lr_start) * f, c.lr_aux};
}

/// Adam moments with decoupled weight decay, one learning rate per group.
template <typename T>
struct AdamW {
  std::vector<Tensor<T>> m, v;
  Index steps = 0;

  explicit AdamW(const ad::ParamSet<T>& ps = {}) { reset(ps); }

  void reset(const ad::ParamSet<T>& ps) {
    m.clear();
    v.clear();
    for (const auto& [name, p] : ps.entries()) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
    }
    steps = 0;
  }

  /// Applies one update from the accumulated gradients; `is_main[i]` picks the group of parameter i.
  void update(ad::ParamSet<T>& ps, const std::vector<bool>& is_main, const LearningRates& lr, const TrainConfig& c) {
    ++steps;
    const double bc1 = 1 - std::pow(c.beta1, static_cast<double>(steps));
    const double bc2 = 1 - std::pow(c.beta2, static_cast<double>(steps));
    auto& entries = ps.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& p = entries[i].second;
      const double rate = is_main[i] ? lr.main : lr.aux;
      const auto g = p.grad();
      auto& val = p.mutable_value();
      auto& mi = m[i];
      auto& vi = v[i];
      for (Index k = 0; k < val.size(); ++k) {
        const double gk = g.empty() ? 0.0 : static_cast<double>(g[static_cast<std::size_t>(k)]);
        const double mk = c.beta1 * static_cast<double>(mi[k]) + (1 - c.beta1) * gk;
        const double vk = c.beta2 * static_cast<double>(vi[k]) + (1 - c.beta2) * gk * gk;
        mi[k] = static_cast<T>(mk);
        vi[k] = static_cast<T>(vk);
        double w = static_cast<double>(val[k]);
        w -= rate * c.weight_decay * w;
        w -= rate * (mk / bc1) / (std::sqrt(vk / bc2) + c.adam_eps);
        val[k] = static_cast<T>(w);
      }
    }
  }
};

/// Scales all gradients so their global L2 norm is at most max_norm; returns the norm before clipping.
template <typename T>
double clip_grad_norm(ad::ParamSet<T>& ps, double max_norm) {
  double sq = 0;
  for (const auto& [name, p] : ps.entries()) {
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [name, p] : ps.entries()) {
      if (p.grad().empty()) continue;
      T* g = p.node()->grad_data();
      for (Index k = 0; k < p.size(); ++k) g[k] *= s;
    }
  }
  return norm;
}

struct StepRecord {
  Index step = 0;
  double loss = 0;
  LearningRates lr;
  double grad_norm = 0;
  double wall_ms = 0;
};

inline const char* kLogHeader = "step,loss,lr_main,lr_aux,wall_ms";

template <typename T>
class Trainer {
 public:
  Trainer(const synth::Dataset& data, Model<T>& model, TrainConfig config)
      : data_(data), model_(model), config_(std::move(config)), optimizer_(model.params) {
    validate(config_);
    if (model_.config.denoiser.image_size != data_.config.rig.image_size) {
      throw ConfigError("model image size " + std::to_string(model_.config.denoiser.image_size) +
                        " differs from the dataset's " + std::to_string(data_.config.rig.image_size));
    }
    if (model_.config.denoiser.views != config_.target_views) {
      throw ConfigError("model view count differs from target_views");
    }
    for (const auto& [name, p] : model_.params.entries()) is_main_.push_back(name.rfind(kUnetPrefix, 0) == 0);
    sampler_.shuffled = config_.shuffled;
    sampler_.target_views = config_.target_views;
    sampler_.excluded_expressions = config_.expression_exclusions;
    synth::allowed_expressions(data_, sampler_.excluded_expressions);
  }

  Index step() const { return step_; }
  const TrainConfig& config() const { return config_; }
  const AdamW<T>& optimizer() const { return optimizer_; }

  /// Items of the given step, in batch order (the draw the step itself makes).
  std::vector<synth::TrainingItem> items_for_step(Index step) const {
    Rng rng(derive_seed(config_.seed, {static_cast<std::uint64_t>(step)}));
    std::vector<synth::TrainingItem> items;
    for (Index b = 0; b < config_.batch_items; ++b) items.push_back(synth::sample_training_item(data_, rng, sampler_));
    return items;
  }

  /// Mean loss of the batch without updating parameters (gradients accumulate into the params).
  double accumulate_gradients(Index step) {
    Rng rng(derive_seed(config_.seed, {static_cast<std::uint64_t>(step)}));
    double total = 0;
    const T inv_batch = static_cast<T>(1.0 / static_cast<double>(config_.batch_items));
    for (Index b = 0; b < config_.batch_items; ++b) {
      const auto item = synth::sample_training_item(data_, rng, sampler_);
      const auto plan = model_.plan(item.target_cameras, item.target_mesh);
      auto input = to_model_space<T>(item.input_image);
      input.shape = {1, 3, input.dim(1), input.dim(2)};
      const auto input_var = ad::Var<T>::constant(std::move(input));
      const auto x0 = to_model_space<T>(item.target_images);
      try {
        const auto sample = diffusion::training_loss<T>(x0, model_.schedule, rng, [&](const ad::Var<T>& x_t, Index t) {
          return model_.predict(plan, input_var, x_t, t);
        });
        total += static_cast<double>(sample.loss.value()[0]);
        ad::backward(ad::scale(sample.loss, inv_batch));
      } catch (const diffusion::TrainingFault& e) {
        throw diffusion::TrainingFault(fault_message(step, item, e.what()));
      }
    }
    return total / static_cast<double>(config_.batch_items);
  }

  /// One optimization step at the current step index.
  StepRecord train_step() {
    const auto start = std::chrono::steady_clock::now();
    StepRecord rec;
    rec.step = step_;
    rec.lr = lr_at(step_, config_);
    model_.params.zero_grad();
    rec.loss = accumulate_gradients(step_);
    rec.grad_norm = clip_grad_norm(model_.params, config_.grad_clip);
    if (!std::isfinite(rec.grad_norm)) {
      throw diffusion::TrainingFault("non-finite gradient norm at step " + std::to_string(step_) + "; " +
                                     grad_norm_summary());
    }
    optimizer_.update(model_.params, is_main_, rec.lr, config_);
    model_.params.zero_grad();
    ++step_;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return rec;
  }

  void save(Archive& ar) const {
    model_.save(ar);
    ar.meta["step"] = step_;
    ar.meta["optimizer_steps"] = optimizer_.steps;
    ar.meta["train_config"] = to_json(config_);
    ar.meta["dataset_hash"] = synth::config_hash(data_.config);
    ar.meta["rig_hash"] = synth::rig_hash(data_.config.rig);
    const auto& entries = model_.params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      ar.put<T>("adam_m/" + entries[i].first, optimizer_.m[i]);
      ar.put<T>("adam_v/" + entries[i].first, optimizer_.v[i]);
    }
  }

  /// Restores parameters, optimizer moments and the step counter.
  void load(const Archive& ar) {
    const auto report = model_.load(ar);
    if (!report.missing.empty()) throw ConfigError("checkpoint lacks parameter " + report.missing.front());
    step_ = ar.meta.at("step").get<Index>();
    optimizer_.steps = ar.meta.at("optimizer_steps").get<Index>();
    const auto& entries = model_.params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      optimizer_.m[i] = ar.get<T>("adam_m/" + entries[i].first);
      optimizer_.v[i] = ar.get<T>("adam_v/" + entries[i].first);
    }
  }

 private:
  std::string grad_norm_summary() const {
    std::string out = "grad norms:";
    for (const auto& [name, p] : model_.params.entries()) {
      double sq = 0;
      for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
      if (!std::isfinite(sq) || sq > 1e6) out += " " + name + "=" + std::to_string(std::sqrt(sq));
    }
    return out;
  }

  std::string fault_message(Index step, const synth::TrainingItem& item, const std::string& what) const {
    return "step " + std::to_string(step) + ", subject " + std::to_string(item.subject) + ", input expression " +
           std::to_string(item.input_expression) + ", target expression " + std::to_string(item.target_expression) +
           ", input view " + std::to_string(item.input_view) + ": " + what + "; " + grad_norm_summary();
  }

  const synth::Dataset& data_;
  Model<T>& model_;
  TrainConfig config_;
  AdamW<T> optimizer_;
  std::vector<bool> is_main_;
  synth::SamplerOptions sampler_;
  Index step_ = 0;
};

inline std::string checkpoint_name(Index step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06lld.mdar", static_cast<long long>(step));
  return buf;
}

/// Runs training up to config.total_steps in `out_dir`, writing checkpoints
/// (including the initial one at step 0 of a fresh run) and appending to log.csv.
/// With `resume`, training continues from that checkpoint.
template <typename T>
std::vector<StepRecord> run_training(const synth::Dataset& data, Model<T>& model, const TrainConfig& config,
                                     const std::filesystem::path& out_dir,
                                     const std::optional<std::filesystem::path>& resume = std::nullopt,
                                     const std::function<void(const StepRecord&)>& on_step = {}) {
  Trainer<T> trainer(data, model, config);
  std::filesystem::create_directories(out_dir);
  const auto log_path = out_dir / "log.csv";
  if (resume) {
    trainer.load(Archive::load(*resume));
  } else {
    std::ofstream(log_path, std::ios::trunc) << kLogHeader << "\n";
    Archive ar;
    trainer.save(ar);
    ar.save(out_dir / checkpoint_name(0));
  }
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw RuntimeFault("cannot append to " + log_path.string());
  std::vector<StepRecord> records;
  while (trainer.step() < config.total_steps) {
    const auto rec = trainer.train_step();
    char line[160];
    std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g,%.3f\n", static_cast<long long>(rec.step), rec.loss,
                  rec.lr.main, rec.lr.aux, rec.wall_ms);
    log << line << std::flush;
    records.push_back(rec);
    if (on_step) on_step(rec);
    const bool last = trainer.step() == config.total_steps;
    if (last || (config.checkpoint_every > 0 && trainer.step() % config.checkpoint_every == 0)) {
      Archive ar;
      trainer.save(ar);
      ar.save(out_dir / checkpoint_name(trainer.step()));
    }
  }
  return records;
}

}  // namespace morphdiff::train
