// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Evaluation protocol: builds held-out items, obtains generated views, and
// scores them with the metric kernels.
//
// Predicted keypoints come from the generated views themselves: the subject's
// identity and colors are known, so the expression coefficients are fitted by
// rendering and comparing against the generated views, and the keypoints of
// the fitted mesh are projected. The fitted mesh also feeds Chamfer and IoU.

#pragma once

#include <functional>

#include "morphdiff/metrics.hpp"
#include "morphdiff/model.hpp"
#include "morphdiff/synthdata.hpp"

namespace morphdiff::eval {

struct EvalOptions {
  /// Target views per item; must divide the rig size.
  Index target_views = 8;
  /// Target expressions to evaluate (empty: all).
  std::vector<std::string> target_expressions;
  /// Expression of the input image. Empty: same as the target (novel-view mode).
  std::string input_expression;
  Index input_view = 0;
  /// Evaluate only the first `max_subjects` held-out subjects (negative: all).
  Index max_subjects = -1;
  metrics::CameraFilter camera_filter;
  /// Fit expressions for keypoints and geometry metrics.
  bool fit_geometry = true;
  Index iou_resolution = 64;
  Index ddim_steps = diffusion::kDefaultDdimSteps;
  double eta = 0.0;
  std::uint64_t seed = 0;
};

inline nlohmann::ordered_json to_json(const EvalOptions& o) {
  return {{"target_views", o.target_views},   {"target_expressions", o.target_expressions},
          {"input_expression", o.input_expression}, {"input_view", o.input_view},
          {"max_subjects", o.max_subjects},   {"camera_filter", o.camera_filter.to_json()},
          {"fit_geometry", o.fit_geometry},   {"iou_resolution", o.iou_resolution},
          {"ddim_steps", o.ddim_steps},       {"eta", o.eta},
          {"seed", o.seed}};
}

/// Held-out items in a fixed order: subject-major, then target expression.
inline std::vector<synth::TrainingItem> test_items(const synth::Dataset& d, const EvalOptions& opt) {
  std::vector<Index> targets;
  if (opt.target_expressions.empty()) {
    for (Index e = 0; e < d.expression_count(); ++e) targets.push_back(e);
  } else {
    for (const auto& name : opt.target_expressions) targets.push_back(d.expression_index(name));
  }
  const Index input = opt.input_expression.empty() ? -1 : d.expression_index(opt.input_expression);
  if (opt.input_view < 0 || opt.input_view >= d.view_count()) throw ConfigError("input view outside the rig");
  Index last = d.subject_count();
  if (opt.max_subjects >= 0) last = std::min(last, d.first_test_subject() + opt.max_subjects);
  std::vector<synth::TrainingItem> items;
  for (Index s = d.first_test_subject(); s < last; ++s) {
    for (Index b : targets) {
      const Index a = input < 0 ? b : input;
      if (input >= 0 && a == b) continue;  // animation mode needs a different target
      items.push_back(synth::make_item(d, s, a, opt.input_view, b, opt.target_views));
    }
  }
  if (items.empty()) throw ConfigError("evaluation selected no items");
  return items;
}

struct ExpressionFit {
  Eigen::VectorXd coeffs;
  Points mesh;
  double residual = 0;  // mean squared pixel error over the views
};

struct FitOptions {
  double bound = 1.5;
  double initial_step = 0.5;
  int refinements = 6;
  int sweeps = 4;
};

/// Fits expression coefficients of a known subject to N views [N, 3, H, W] by
/// coordinate pattern search on the rendering error, starting from neutral.
inline ExpressionFit fit_expression(const synth::Dataset& d, Index subject, const Tensor<float>& views,
                                    const std::vector<CameraParams>& cameras, const FitOptions& fo = {}) {
  const Index n = static_cast<Index>(cameras.size());
  if (views.rank() != 4 || views.dim(0) != n) throw ConfigError("fit_expression: views and cameras disagree");
  const Index per = views.size() / n;
  synth::Scene scene;
  scene.subject_id = subject;
  scene.coeffs = d.subjects.at(static_cast<std::size_t>(subject)).coeffs;
  scene.vertex_colors = d.subjects.at(static_cast<std::size_t>(subject)).colors;
  synth::RenderOptions ro = d.config.render;
  ro.quantize = false;

  auto error_of = [&](const Eigen::VectorXd& e) {
    scene.coeffs.expression = e;
    scene.mesh = build_mesh(d.model, scene.coeffs);
    double sq = 0;
    for (Index v = 0; v < n; ++v) {
      const auto img = synth::render_view(scene, d.model.faces, cameras[static_cast<std::size_t>(v)], ro);
      for (Index i = 0; i < per; ++i) {
        const double diff = static_cast<double>(img[i]) - views[v * per + i];
        sq += diff * diff;
      }
    }
    return sq / static_cast<double>(views.size());
  };

  Eigen::VectorXd best = Eigen::VectorXd::Zero(d.model.expression_dim());
  double best_err = error_of(best);
  double step = fo.initial_step;
  for (int r = 0; r < fo.refinements; ++r, step /= 2) {
    for (int sweep = 0; sweep < fo.sweeps; ++sweep) {
      bool improved = false;
      for (Index k = 0; k < best.size(); ++k) {
        for (double dir : {1.0, -1.0}) {
          Eigen::VectorXd trial = best;
          trial[k] = std::clamp(trial[k] + dir * step, -fo.bound, fo.bound);
          if (trial[k] == best[k]) continue;
          const double err = error_of(trial);
          if (err < best_err) {
            best_err = err;
            best = trial;
            improved = true;
            break;
          }
        }
      }
      if (!improved) break;
    }
  }
  ExpressionFit fit;
  fit.coeffs = best;
  scene.coeffs.expression = best;
  fit.mesh = build_mesh(d.model, scene.coeffs);
  synth::detail::round_to_float(fit.mesh);  // same precision as dataset meshes
  fit.residual = best_err;
  return fit;
}

/// Generated views [N, 3, H, W] in [0, 1] for one item.
using ViewGenerator = std::function<Tensor<float>(const synth::TrainingItem&, Index item_index)>;

struct EvalResult {
  metrics::EvalReport report;
  /// PCK of the same predictions against the input expression's keypoints.
  metrics::PckCount pck_vs_input;
  std::vector<ExpressionFit> fits;
};

/// Scores generated views for every item; per-view entries follow the target view order.
inline EvalResult evaluate(const synth::Dataset& d, const std::vector<synth::TrainingItem>& items,
                           const ViewGenerator& generate, const EvalOptions& opt) {
  if (items.empty()) throw ConfigError("evaluate: no items");
  const Index n = static_cast<Index>(items.front().target_cameras.size());
  EvalResult out;
  auto& rep = out.report;
  rep.dataset_hash = synth::config_hash(d.config);
  rep.camera_filter = opt.camera_filter;
  rep.per_view.resize(static_cast<std::size_t>(n));
  for (Index v = 0; v < n; ++v) {
    auto& pv = rep.per_view[static_cast<std::size_t>(v)];
    pv.view = items.front().target_view_indices[static_cast<std::size_t>(v)];
    std::tie(pv.azimuth_deg, pv.elevation_deg) = azimuth_elevation_deg(items.front().target_cameras[static_cast<std::size_t>(v)]);
    pv.azimuth_deg += 0.0;  // no "-0" in reports
    pv.pck_evaluated = opt.fit_geometry && opt.camera_filter.accepts(items.front().target_cameras[static_cast<std::size_t>(v)]);
  }
  double pck_image_sum = 0, chamfer_sum = 0, iou_sum = 0;
  Index pck_images = 0;
  for (std::size_t it = 0; it < items.size(); ++it) {
    const auto& item = items[it];
    const Tensor<float> views = generate(item, static_cast<Index>(it));
    if (views.rank() != 4 || views.dim(0) != n || views.size() != item.target_images.size()) {
      throw ConfigError("generated views have shape " + shape_str(views.shape) + ", expected " +
                        shape_str(item.target_images.shape));
    }
    const Index per = views.size() / n;
    auto view_of = [&](const Tensor<float>& all, Index v) {
      Tensor<float> t({all.dim(1), all.dim(2), all.dim(3)});
      std::copy(all.data.begin() + v * per, all.data.begin() + (v + 1) * per, t.data.begin());
      return t;
    };
    std::optional<ExpressionFit> fit;
    if (opt.fit_geometry) fit = fit_expression(d, item.subject, views, item.target_cameras);
    const Points input_mesh = d.mesh(item.subject, item.input_expression);
    for (Index v = 0; v < n; ++v) {
      auto& pv = rep.per_view[static_cast<std::size_t>(v)];
      const auto gen = view_of(views, v), gt = view_of(item.target_images, v);
      const double s = metrics::ssim(gen, gt), p = metrics::psnr(gen, gt);
      pv.ssim += s;
      pv.psnr += p;
      ++pv.images;
      rep.aggregate.ssim += s;
      rep.aggregate.psnr += p;
      ++rep.aggregate.images;
      if (!pv.pck_evaluated) continue;
      const auto& cam = item.target_cameras[static_cast<std::size_t>(v)];
      const Eigen::MatrixXd& gt_kp = item.keypoints_2d_gt[static_cast<std::size_t>(v)];
      const Eigen::MatrixXd pred_kp = project_keypoints(d.model, fit->mesh, cam);
      const double norm = intercanthal_distance(gt_kp, d.model.eye_corner_slots);
      const auto c = metrics::pck_count(pred_kp, gt_kp, norm);
      pv.pck += c;
      rep.aggregate.pck += c;
      pck_image_sum += c.percent();
      ++pck_images;
      Eigen::MatrixXd pred_mouth(static_cast<Index>(d.model.mouth_slots.size()), 2);
      Eigen::MatrixXd gt_mouth(pred_mouth.rows(), 2);
      for (std::size_t k = 0; k < d.model.mouth_slots.size(); ++k) {
        pred_mouth.row(static_cast<Index>(k)) = pred_kp.row(d.model.mouth_slots[k]);
        gt_mouth.row(static_cast<Index>(k)) = gt_kp.row(d.model.mouth_slots[k]);
      }
      const auto cm = metrics::pck_count(pred_mouth, gt_mouth, norm);
      pv.pck_mouth += cm;
      rep.aggregate.pck_mouth += cm;
      const Eigen::MatrixXd input_kp = project_keypoints(d.model, input_mesh, cam);
      out.pck_vs_input += metrics::pck_count(pred_kp, input_kp, intercanthal_distance(input_kp, d.model.eye_corner_slots));
    }
    if (fit) {
      chamfer_sum += metrics::chamfer(fit->mesh, item.target_mesh);
      iou_sum += metrics::volume_iou({fit->mesh, d.model.faces}, {item.target_mesh, d.model.faces}, opt.iou_resolution);
      out.fits.push_back(std::move(*fit));
    }
  }
  for (auto& pv : rep.per_view) {
    pv.ssim /= static_cast<double>(pv.images);
    pv.psnr /= static_cast<double>(pv.images);
  }
  rep.aggregate.ssim /= static_cast<double>(rep.aggregate.images);
  rep.aggregate.psnr /= static_cast<double>(rep.aggregate.images);
  if (pck_images > 0) rep.aggregate.pck_per_image = pck_image_sum / static_cast<double>(pck_images);
  if (opt.fit_geometry) {
    rep.aggregate.chamfer = chamfer_sum / static_cast<double>(items.size());
    rep.aggregate.volume_iou = iou_sum / static_cast<double>(items.size());
  }
  rep.pck_threshold = metrics::kPckThreshold;
  rep.extra["items"] = items.size();
  rep.extra["pck_vs_input_expression"] = {{"percent", out.pck_vs_input.percent()},
                                          {"correct", out.pck_vs_input.correct},
                                          {"total", out.pck_vs_input.total}};
  rep.check_invariants();
  return out;
}

/// Samples each item once with DDIM; the noise stream of item i is derive_seed(seed, {i}).
template <typename T>
ViewGenerator model_generator(const Model<T>& model, const EvalOptions& opt) {
  return [&model, opt](const synth::TrainingItem& item, Index index) {
    if (static_cast<Index>(item.target_cameras.size()) != model.config.denoiser.views ||
        item.input_image.dim(1) != model.config.denoiser.image_size) {
      throw ConfigError("checkpoint expects " + std::to_string(model.config.denoiser.views) + " views of " +
                        std::to_string(model.config.denoiser.image_size) + " px");
    }
    const auto plan = model.plan(item.target_cameras, item.target_mesh);
    Rng rng(derive_seed(opt.seed, {static_cast<std::uint64_t>(index)}));
    return sample_views(model, plan, item.input_image, rng, opt.ddim_steps, opt.eta);
  };
}

/// Returns the ground-truth views: a sanity reference that scores perfectly.
inline ViewGenerator ground_truth_generator() {
  return [](const synth::TrainingItem& item, Index) { return item.target_images; };
}

/// Pixelwise mean of every training image (training subjects, all expressions and views).
inline Tensor<float> dataset_mean_image(const synth::Dataset& d) {
  const auto& first = d.image(0, 0, 0);
  std::vector<double> acc(static_cast<std::size_t>(first.size()), 0.0);
  Index count = 0;
  for (Index s = 0; s < d.first_test_subject(); ++s)
    for (Index e = 0; e < d.expression_count(); ++e)
      for (Index v = 0; v < d.view_count(); ++v) {
        const auto& img = d.image(s, e, v);
        for (Index i = 0; i < img.size(); ++i) acc[static_cast<std::size_t>(i)] += img[i];
        ++count;
      }
  Tensor<float> mean(first.shape);
  for (Index i = 0; i < mean.size(); ++i) mean[i] = static_cast<float>(acc[static_cast<std::size_t>(i)] / static_cast<double>(count));
  return mean;
}

/// Same mean, but per rig view index.
inline std::vector<Tensor<float>> dataset_mean_per_view(const synth::Dataset& d) {
  std::vector<Tensor<float>> out;
  for (Index v = 0; v < d.view_count(); ++v) {
    const auto& first = d.image(0, 0, v);
    std::vector<double> acc(static_cast<std::size_t>(first.size()), 0.0);
    Index count = 0;
    for (Index s = 0; s < d.first_test_subject(); ++s)
      for (Index e = 0; e < d.expression_count(); ++e) {
        const auto& img = d.image(s, e, v);
        for (Index i = 0; i < img.size(); ++i) acc[static_cast<std::size_t>(i)] += img[i];
        ++count;
      }
    Tensor<float> mean(first.shape);
    for (Index i = 0; i < mean.size(); ++i) mean[i] = static_cast<float>(acc[static_cast<std::size_t>(i)] / static_cast<double>(count));
    out.push_back(std::move(mean));
  }
  return out;
}

/// Every target view replaced by the given per-rig-view images.
inline ViewGenerator constant_generator(std::vector<Tensor<float>> per_rig_view) {
  return [imgs = std::move(per_rig_view)](const synth::TrainingItem& item, Index) {
    Tensor<float> out(item.target_images.shape);
    const Index per = out.size() / out.dim(0);
    for (std::size_t i = 0; i < item.target_view_indices.size(); ++i) {
      const auto& src = imgs.size() == 1 ? imgs[0] : imgs.at(static_cast<std::size_t>(item.target_view_indices[i]));
      std::copy(src.data.begin(), src.data.end(), out.data.begin() + static_cast<Index>(i) * per);
    }
    return out;
  };
}

}  // namespace morphdiff::eval
