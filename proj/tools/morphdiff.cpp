// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Command-line entry point: gen-data, train, sample, eval.
// Exit codes: 0 success, 2 configuration error, 3 runtime fault.

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "morphdiff/evaluate.hpp"
#include "morphdiff/image_io.hpp"
#include "morphdiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace morphdiff;

namespace {

nlohmann::json read_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
}

nlohmann::json section(const nlohmann::json& cfg, const char* name) {
  return cfg.contains(name) ? cfg.at(name) : nlohmann::json::object();
}

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  Fnv1a h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return hex64(h.digest());
}

/// Hash over every file below `root`, in sorted relative-path order.
std::string tree_hash(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  }
  std::sort(files.begin(), files.end());
  Fnv1a h;
  for (const auto& f : files) {
    h.update(f.generic_string());
    h.update(file_hash(root / f));
  }
  return hex64(h.digest());
}

void log_resolved(const std::string& command, const nlohmann::ordered_json& resolved, const fs::path* out_file) {
  std::cout << "[" << command << "] resolved config:\n" << resolved.dump(2) << "\n";
  if (out_file) {
    std::ofstream o(*out_file);
    if (!o) throw RuntimeFault("cannot write " + out_file->string());
    o << resolved.dump(2) << "\n";
  }
}

void require_empty_or_force(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw ConfigError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
  }
}

/// Checks a checkpoint's rig against the dataset's; ConfigError unless allowed.
void check_rig(const Archive& ckpt, const synth::Dataset& d, const ModelConfig& mc, bool allow_mismatch) {
  std::vector<std::string> problems;
  if (ckpt.meta.contains("rig_hash") && ckpt.meta.at("rig_hash").get<std::string>() != synth::rig_hash(d.config.rig)) {
    problems.push_back("rig hash " + ckpt.meta.at("rig_hash").get<std::string>() + " differs from dataset rig hash " +
                       synth::rig_hash(d.config.rig));
  }
  if (mc.denoiser.image_size != d.config.rig.image_size) {
    problems.push_back("checkpoint image size " + std::to_string(mc.denoiser.image_size) + " differs from dataset " +
                       std::to_string(d.config.rig.image_size));
  }
  if (d.view_count() % mc.denoiser.views != 0) {
    problems.push_back("checkpoint view count " + std::to_string(mc.denoiser.views) + " does not divide the rig size " +
                       std::to_string(d.view_count()));
  }
  if (problems.empty()) return;
  // Shape mismatches cannot be sampled at all; hash-only mismatches may be overridden.
  const bool shape_problem = mc.denoiser.image_size != d.config.rig.image_size || d.view_count() % mc.denoiser.views != 0;
  if (!allow_mismatch || shape_problem) throw ConfigError(problems.front());
  std::cerr << "warning: " << problems.front() << " (continuing: --allow-mismatch)\n";
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<Index> subjects, test_subjects;
  std::optional<int> expressions;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  const auto cfg = read_config(a.config);
  auto dc = synth::dataset_config_from_json(section(cfg, "data"));
  if (a.seed) dc.seed = *a.seed;
  if (a.expressions) dc.expressions = *a.expressions;
  if (a.subjects) {
    dc.subjects = *a.subjects;
    if (!a.test_subjects && dc.test_subjects >= dc.subjects) dc.test_subjects = dc.subjects / 2;
  }
  if (a.test_subjects) dc.test_subjects = *a.test_subjects;
  if (a.out.empty()) throw ConfigError("gen-data needs --out");
  const fs::path out(a.out);
  require_empty_or_force(out, a.force);
  if (a.force && fs::exists(out)) fs::remove_all(out);
  nlohmann::ordered_json resolved{{"command", "gen-data"},
                                  {"data", synth::dataset_config_to_json(dc)},
                                  {"config_hash", synth::config_hash(dc)}};
  log_resolved("gen-data", resolved, nullptr);
  const auto d = synth::generate_dataset(dc);
  synth::write_dataset(d, out, a.force);
  std::cout << "wrote " << d.subject_count() << " subjects x " << d.expression_count() << " expressions x "
            << d.view_count() << " views to " << out << "\n";
  std::cout << "manifest hash " << file_hash(out / "manifest.json") << "\n";
  std::cout << "content hash " << tree_hash(out) << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data, out, resume, shuffled;
  std::optional<std::uint64_t> seed;
  std::optional<Index> steps;
  std::vector<std::string> exclude;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  const auto cfg = read_config(a.config);
  auto tc = train::train_config_from_json(section(cfg, "train"));
  if (a.steps) tc.total_steps = *a.steps;
  if (a.seed) tc.seed = *a.seed;
  if (!a.shuffled.empty()) tc.shuffled = a.shuffled == "on";
  if (!a.exclude.empty()) tc.expression_exclusions = a.exclude;
  if (tc.total_steps > 0 && tc.lr_warmup_steps > tc.total_steps) tc.lr_warmup_steps = tc.total_steps;
  train::validate(tc);
  if (a.data.empty() || a.out.empty()) throw ConfigError("train needs --data and --out");
  const fs::path out(a.out);
  if (a.resume.empty()) require_empty_or_force(out, a.force);
  const auto data = synth::load_dataset(a.data);

  std::unique_ptr<Model<float>> model;
  ModelConfig mc;
  if (!a.resume.empty()) {
    const auto ar = Archive::load(a.resume);
    mc = model_config_from_json(ar.meta.at("model_config"));
  } else {
    mc = model_config_from_json(section(cfg, "model"));
  }
  model = Model<float>::create(mc, tc.seed);

  nlohmann::ordered_json resolved{{"command", "train"},
                                  {"data_dir", a.data},
                                  {"dataset_hash", synth::config_hash(data.config)},
                                  {"dataset_manifest_hash", file_hash(fs::path(a.data) / "manifest.json")},
                                  {"model", to_json(mc)},
                                  {"train", train::to_json(tc)},
                                  {"schedule_hash", model->schedule.hash()},
                                  {"resume", a.resume}};
  if (!a.resume.empty()) resolved["resume_hash"] = file_hash(a.resume);
  fs::create_directories(out);
  const fs::path run_file = out / "run.json";
  log_resolved("train", resolved, &run_file);

  std::optional<fs::path> resume;
  if (!a.resume.empty()) resume = fs::path(a.resume);
  const auto records = train::run_training(data, *model, tc, out, resume, [&](const train::StepRecord& r) {
    if (r.step % 10 == 0 || r.step + 1 == tc.total_steps) {
      std::cout << "step " << r.step << " loss " << r.loss << " lr " << r.lr.main << " grad_norm " << r.grad_norm
                << " (" << r.wall_ms << " ms)\n";
    }
  });
  const fs::path last = out / train::checkpoint_name(tc.total_steps);
  std::cout << "trained " << records.size() << " steps; checkpoint " << last << " hash " << file_hash(last) << "\n";
  return 0;
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
  std::string checkpoint, data, out, input, coeffs, input_expression = "neutral", expression;
  Index subject = -1, input_view = 0;
  std::optional<std::uint64_t> seed;
  std::optional<Index> steps;
  bool allow_mismatch = false, force = false;
};

MorphCoeffs read_coeffs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open coefficient file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed coefficient file " + path + ": " + e.what());
  }
  auto vec = [&](const char* key) {
    if (!j.contains(key)) throw ConfigError(std::string("coefficient file lacks '") + key + "'");
    const auto v = j.at(key).get<std::vector<double>>();
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size())));
  };
  return {vec("identity"), vec("expression")};
}

int cmd_sample(const SampleArgs& a) {
  if (a.checkpoint.empty() || a.data.empty() || a.out.empty()) throw ConfigError("sample needs --checkpoint, --data and --out");
  const auto ar = Archive::load(a.checkpoint);
  const auto model = Model<float>::from_archive(ar);
  const auto data = synth::load_dataset(a.data);
  check_rig(ar, data, model->config, a.allow_mismatch);
  const Index views = model->config.denoiser.views;

  // Input image: a PNG file, or a dataset render of (subject, input expression, input view).
  const Index subject = a.subject < 0 ? data.first_test_subject() : a.subject;
  if (subject >= data.subject_count()) throw ConfigError("subject " + std::to_string(subject) + " not in dataset");
  Tensor<float> input = a.input.empty() ? data.image(subject, data.expression_index(a.input_expression), a.input_view)
                                        : read_png(a.input);
  if (input.dim(1) != model->config.denoiser.image_size || input.dim(2) != model->config.denoiser.image_size) {
    throw ConfigError("input image is " + shape_str(input.shape) + "; checkpoint expects " +
                      std::to_string(model->config.denoiser.image_size) + " px");
  }
  // Conditioning mesh: a coefficient file, or the subject with the requested expression
  // (the input expression itself for novel-view mode).
  MorphCoeffs coeffs;
  if (!a.coeffs.empty()) {
    coeffs = read_coeffs(a.coeffs);
  } else {
    coeffs = data.coeffs(subject, data.expression_index(a.expression.empty() ? a.input_expression : a.expression));
  }
  if (coeffs.identity.size() != data.model.identity_dim() || coeffs.expression.size() != data.model.expression_dim()) {
    throw ConfigError("coefficient dimensions do not match the morphable model");
  }
  const Points mesh = build_mesh(data.model, coeffs);
  std::vector<CameraParams> cams;
  for (Index v : synth::target_view_indices(data, views)) cams.push_back(data.rig[static_cast<std::size_t>(v)]);

  const std::uint64_t seed = a.seed.value_or(0);
  const Index steps = a.steps.value_or(diffusion::kDefaultDdimSteps);
  const fs::path out(a.out);
  require_empty_or_force(out, a.force);
  fs::create_directories(out);
  nlohmann::ordered_json resolved{{"command", "sample"},
                                  {"checkpoint", a.checkpoint},
                                  {"checkpoint_hash", file_hash(a.checkpoint)},
                                  {"dataset_hash", synth::config_hash(data.config)},
                                  {"input", a.input.empty() ? "dataset" : a.input},
                                  {"subject", subject},
                                  {"identity", std::vector<double>(coeffs.identity.data(), coeffs.identity.data() + coeffs.identity.size())},
                                  {"expression", std::vector<double>(coeffs.expression.data(), coeffs.expression.data() + coeffs.expression.size())},
                                  {"views", views},
                                  {"ddim_steps", steps},
                                  {"seed", seed}};
  const fs::path sidecar = out / "sample.json";
  log_resolved("sample", resolved, &sidecar);

  Rng rng(seed);
  const auto plan = model->plan(cams, mesh);
  const auto result = sample_views(*model, plan, input, rng, steps);
  const Index per = result.size() / views;
  for (Index v = 0; v < views; ++v) {
    Tensor<float> img({3, result.dim(2), result.dim(3)});
    std::copy(result.data.begin() + v * per, result.data.begin() + (v + 1) * per, img.data.begin());
    char name[32];
    std::snprintf(name, sizeof name, "view_%02lld.png", static_cast<long long>(v));
    write_png(out / name, img);
  }
  write_png(out / "grid.png", tile_views(result, views));
  std::cout << "wrote " << views << " views to " << out << " (grid hash " << file_hash(out / "grid.png") << ")\n";
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string config, checkpoint, data, out, baseline, input_expression;
  std::vector<std::string> target_expressions;
  std::optional<std::uint64_t> seed;
  std::optional<Index> steps, max_subjects, input_view;
  std::optional<double> max_azimuth, max_elevation;
  bool allow_mismatch = false, no_geometry = false;
};

int cmd_eval(const EvalArgs& a) {
  const auto cfg = section(read_config(a.config), "eval");
  if (a.data.empty()) throw ConfigError("eval needs --data");
  if (a.checkpoint.empty() == a.baseline.empty()) throw ConfigError("eval needs exactly one of --checkpoint or --baseline");
  const auto data = synth::load_dataset(a.data);

  eval::EvalOptions opt;
  opt.camera_filter.max_azimuth_deg = cfg.value("max_azimuth_deg", opt.camera_filter.max_azimuth_deg);
  opt.camera_filter.max_elevation_deg = cfg.value("max_elevation_deg", opt.camera_filter.max_elevation_deg);
  opt.ddim_steps = cfg.value("ddim_steps", opt.ddim_steps);
  opt.seed = cfg.value("seed", opt.seed);
  opt.max_subjects = cfg.value("max_subjects", opt.max_subjects);
  opt.input_view = cfg.value("input_view", opt.input_view);
  opt.input_expression = cfg.value("input_expression", opt.input_expression);
  opt.target_expressions = cfg.value("target_expressions", opt.target_expressions);
  opt.iou_resolution = cfg.value("iou_resolution", opt.iou_resolution);
  if (a.max_azimuth) opt.camera_filter.max_azimuth_deg = *a.max_azimuth;
  if (a.max_elevation) opt.camera_filter.max_elevation_deg = *a.max_elevation;
  if (a.steps) opt.ddim_steps = *a.steps;
  if (a.seed) opt.seed = *a.seed;
  if (a.max_subjects) opt.max_subjects = *a.max_subjects;
  if (a.input_view) opt.input_view = *a.input_view;
  if (!a.input_expression.empty()) opt.input_expression = a.input_expression;
  if (!a.target_expressions.empty()) opt.target_expressions = a.target_expressions;
  opt.fit_geometry = !a.no_geometry;

  std::unique_ptr<Model<float>> model;
  eval::ViewGenerator generate;
  std::string checkpoint_hash = "none";
  if (!a.checkpoint.empty()) {
    const auto ar = Archive::load(a.checkpoint);
    model = Model<float>::from_archive(ar);
    check_rig(ar, data, model->config, a.allow_mismatch);
    opt.target_views = model->config.denoiser.views;
    checkpoint_hash = file_hash(a.checkpoint);
    generate = eval::model_generator(*model, opt);
  } else if (a.baseline == "ground-truth") {
    generate = eval::ground_truth_generator();
  } else if (a.baseline == "mean") {
    generate = eval::constant_generator({eval::dataset_mean_image(data)});
  } else if (a.baseline == "mean-per-view") {
    generate = eval::constant_generator(eval::dataset_mean_per_view(data));
  } else {
    throw ConfigError("unknown baseline '" + a.baseline + "' (ground-truth, mean, mean-per-view)");
  }
  nlohmann::ordered_json resolved{{"command", "eval"},
                                  {"checkpoint", a.checkpoint},
                                  {"checkpoint_hash", checkpoint_hash},
                                  {"baseline", a.baseline},
                                  {"dataset_hash", synth::config_hash(data.config)},
                                  {"options", eval::to_json(opt)}};
  log_resolved("eval", resolved, nullptr);

  const auto items = eval::test_items(data, opt);
  auto result = eval::evaluate(data, items, generate, opt);
  result.report.checkpoint_hash = checkpoint_hash;
  result.report.extra["options"] = eval::to_json(opt);
  std::cout << result.report.table();
  const std::string json = result.report.to_json().dump(2);
  if (a.out.empty()) {
    std::cout << json << "\n";
  } else {
    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream(out) << json << "\n";
    std::cout << "report written to " << out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"morphdiff: morphable-model-conditioned multi-view diffusion on synthetic heads"};
  app.require_subcommand(1);

  GenDataArgs g;
  auto* gen = app.add_subcommand("gen-data", "Render the synthetic head dataset");
  gen->add_option("--config", g.config, "JSON config file (section \"data\")");
  gen->add_option("--out", g.out, "Output directory")->required();
  gen->add_option("--seed", g.seed, "Dataset seed");
  gen->add_option("--subjects", g.subjects, "Number of subjects");
  gen->add_option("--test-subjects", g.test_subjects, "Held-out subjects (the last ones)");
  gen->add_option("--expressions", g.expressions, "Number of expressions (1-8)");
  gen->add_flag("--force", g.force, "Overwrite a non-empty output directory");

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train the model");
  tr->add_option("--config", t.config, "JSON config file (sections \"model\", \"train\")");
  tr->add_option("--data", t.data, "Dataset directory")->required();
  tr->add_option("--out", t.out, "Run directory for checkpoints and log.csv")->required();
  tr->add_option("--steps", t.steps, "Total optimizer steps");
  tr->add_option("--seed", t.seed, "Training seed");
  tr->add_option("--shuffled", t.shuffled, "Shuffled-expression training")->check(CLI::IsMember({"on", "off"}));
  tr->add_option("--exclude-expression", t.exclude, "Expression never sampled in training (repeatable)");
  tr->add_option("--resume", t.resume, "Checkpoint to resume from");
  tr->add_flag("--force", t.force, "Allow a non-empty run directory");

  SampleArgs s;
  auto* sa = app.add_subcommand("sample", "Generate N views from one input image");
  sa->add_option("--checkpoint", s.checkpoint, "Checkpoint file")->required();
  sa->add_option("--data", s.data, "Dataset directory (morphable model and rig)")->required();
  sa->add_option("--out", s.out, "Output directory")->required();
  sa->add_option("--input", s.input, "Input PNG (default: dataset render)");
  sa->add_option("--coeffs", s.coeffs, "JSON file with \"identity\" and \"expression\" coefficient arrays");
  sa->add_option("--subject", s.subject, "Dataset subject (default: first held-out)");
  sa->add_option("--input-expression", s.input_expression, "Expression of the dataset input image");
  sa->add_option("--input-view", s.input_view, "Rig view of the dataset input image");
  sa->add_option("--expression", s.expression, "Target expression of the conditioning mesh (animation mode)");
  sa->add_option("--steps", s.steps, "DDIM steps");
  sa->add_option("--seed", s.seed, "Sampling seed");
  sa->add_flag("--allow-mismatch", s.allow_mismatch, "Accept a checkpoint trained on a different rig");
  sa->add_flag("--force", s.force, "Overwrite a non-empty output directory");

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint (or a baseline) on held-out subjects");
  ev->add_option("--config", e.config, "JSON config file (section \"eval\")");
  ev->add_option("--checkpoint", e.checkpoint, "Checkpoint file");
  ev->add_option("--baseline", e.baseline, "ground-truth, mean or mean-per-view instead of a checkpoint");
  ev->add_option("--data", e.data, "Dataset directory")->required();
  ev->add_option("--out", e.out, "Report JSON path (default: stdout)");
  ev->add_option("--steps", e.steps, "DDIM steps");
  ev->add_option("--seed", e.seed, "Sampling seed");
  ev->add_option("--max-subjects", e.max_subjects, "Evaluate only the first held-out subjects");
  ev->add_option("--max-azimuth", e.max_azimuth, "PCK camera filter: max |azimuth| in degrees");
  ev->add_option("--max-elevation", e.max_elevation, "PCK camera filter: max |elevation| in degrees");
  ev->add_option("--input-view", e.input_view, "Rig view of the input image");
  ev->add_option("--input-expression", e.input_expression, "Input expression (animation mode)");
  ev->add_option("--target-expression", e.target_expressions, "Target expression (repeatable; default all)");
  ev->add_flag("--no-geometry", e.no_geometry, "Skip expression fitting, PCK, Chamfer and IoU");
  ev->add_flag("--allow-mismatch", e.allow_mismatch, "Accept a checkpoint trained on a different rig");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }
  try {
    if (*gen) return cmd_gen_data(g);
    if (*tr) return cmd_train(t);
    if (*sa) return cmd_sample(s);
    if (*ev) return cmd_eval(e);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "runtime fault: " << err.what() << "\n";
    return 3;
  }
  return 2;
}
