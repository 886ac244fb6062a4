#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "roadimp/dataset.hpp"
#include "roadimp/metrics.hpp"
#include "roadimp/model.hpp"

namespace fs = std::filesystem;
using namespace roadimp;

namespace {

ModelConfig load_config_or_default(const std::string& path, const std::string& profile) {
  if (!path.empty()) return ModelConfig::load(path);
  if (profile == "micro") return ModelConfig::micro();
  return ModelConfig::defaults();
}

int run_make_synthetic(const std::string& out, const std::string& config_path,
                       uint64_t seed, int64_t n_clips, int64_t obj_min,
                       int64_t obj_max, const std::string& rule, int64_t frames,
                       int64_t size) {
  SyntheticConfig cfg;
  if (!config_path.empty()) {
    // Synthetic settings may be embedded under "synthetic" in a config file.
    std::ifstream in(config_path);
    RI_CHECK(in.good(), "cannot open config: " + config_path);
    auto j = nlohmann::json::parse(in);
    if (j.contains("synthetic")) {
      const auto& s = j.at("synthetic");
      if (s.contains("n_clips")) cfg.n_clips = s.at("n_clips").get<int64_t>();
      if (s.contains("n_objects_range"))
        cfg.n_objects_range = s.at("n_objects_range").get<std::array<int64_t, 2>>();
      if (s.contains("rule"))
        cfg.rule = SyntheticConfig::rule_from_string(s.at("rule").get<std::string>());
      if (s.contains("frames_per_scene"))
        cfg.frames_per_scene = s.at("frames_per_scene").get<int64_t>();
      if (s.contains("image_size")) cfg.image_size = s.at("image_size").get<int64_t>();
      if (s.contains("train_fraction"))
        cfg.train_fraction = s.at("train_fraction").get<double>();
      if (s.contains("beta")) cfg.beta = s.at("beta").get<double>();
    }
  }
  cfg.seed = seed;
  if (n_clips > 0) cfg.n_clips = n_clips;
  if (obj_min > 0 && obj_max >= obj_min) cfg.n_objects_range = {obj_min, obj_max};
  if (!rule.empty()) cfg.rule = SyntheticConfig::rule_from_string(rule);
  if (frames > 0) cfg.frames_per_scene = frames;
  if (size > 0) cfg.image_size = size;
  generate_synthetic(cfg, out);
  std::cout << "wrote synthetic dataset: " << out << " (" << cfg.n_clips
            << " clips, rule " << SyntheticConfig::rule_to_string(cfg.rule) << ")\n";
  return 0;
}

int run_train(const std::string& data, const std::string& config_path,
              const std::string& profile, const std::string& out,
              const std::string& log_csv, const std::string& resume_path) {
  ModelConfig cfg = load_config_or_default(config_path, profile);
  auto train_clips = load_clips(data, Split::kTrain, cfg);
  auto val_clips = load_clips(data, Split::kTest, cfg);
  TrainOptions opts;
  if (!log_csv.empty()) opts.log_csv = fs::path(log_csv);
  if (!resume_path.empty()) opts.resume = Checkpoint::load(resume_path);
  Checkpoint ckpt = train_model(train_clips, val_clips, cfg, opts);
  ckpt.save(out);
  std::cout << "saved checkpoint: " << out << " (epochs "
            << ckpt.epochs_completed << ")\n";
  if (!ckpt.history.empty()) {
    const auto& last = ckpt.history.back();
    std::cout << "final: loss " << last.loss << " AP " << last.ap << " F1 "
              << last.f1 << " Acc " << last.acc << "\n";
  }
  return 0;
}

int run_eval(const std::string& data, const std::string& checkpoint,
             const std::string& report_path, const std::string& pr_csv) {
  Checkpoint ckpt = Checkpoint::load(checkpoint);
  auto model = ckpt.restore_model();
  auto clips = load_clips(data, Split::kTest, ckpt.config);
  EvalReport report = evaluate(*model, clips);
  report.save(report_path);
  if (!pr_csv.empty()) report.save_pr_csv(pr_csv);
  std::cout << "AP " << report.ap << " F1 " << report.f1 << " Acc " << report.acc
            << " (" << report.per_object.size() << " objects)\n";
  std::cout << "wrote report: " << report_path << "\n";
  return 0;
}

int run_predict(const std::string& data, const std::string& clip_spec,
                const std::string& checkpoint, const std::string& overlay_dir,
                double threshold) {
  Checkpoint ckpt = Checkpoint::load(checkpoint);
  auto model = ckpt.restore_model();

  std::string scene_id = clip_spec;
  int64_t t_end = -1;
  if (auto pos = clip_spec.find(':'); pos != std::string::npos) {
    scene_id = clip_spec.substr(0, pos);
    t_end = std::stoll(clip_spec.substr(pos + 1));
  }
  std::vector<SceneRecord> scenes;
  for (Split split : {Split::kTrain, Split::kTest})
    for (auto& s : load_dataset(data, split))
      if (s.scene_id == scene_id) scenes.push_back(std::move(s));
  RI_CHECK(!scenes.empty(), "scene '" + scene_id + "' not found in " + data);
  const SceneRecord& scene = scenes.front();
  if (t_end < 0) {
    auto idx = eval_frame_indices(scene, ckpt.config.T, ckpt.config.eval_stride);
    RI_CHECK(!idx.empty(), "scene '" + scene_id + "' has no eligible window");
    t_end = idx.front();
  }
  ClipSample clip = sample_clip(scene, t_end, ckpt.config);
  NoGradGuard no_grad;
  model->set_train(false);
  ImportanceScores scores = model->forward(clip);
  const GateDecisions& gate = model->last_gate();

  fs::create_directories(overlay_dir);
  const fs::path png = fs::path(overlay_dir) /
                       (scene_id + "_" + std::to_string(t_end) + ".png");
  render_overlay(clip, scores.A, gate.p_c, threshold, png);

  nlohmann::json gj;
  for (int64_t i = 0; i < clip.num_objects(); ++i) {
    nlohmann::json o = {{"track_id", clip.track_ids[i]},
                        {"score", scores.A[i]},
                        {"label", clip.labels[i]}};
    if (!gate.p.empty()) {
      o["p"] = gate.p[i];
      o["p_c"] = gate.p_c[i];
    }
    gj.push_back(o);
  }
  const fs::path gate_path = fs::path(overlay_dir) /
                             (scene_id + "_" + std::to_string(t_end) + "_gate.json");
  std::ofstream gout(gate_path);
  gout << gj.dump(2) << "\n";
  std::cout << "wrote " << png << " and " << gate_path << "\n";
  return 0;
}

int run_ablate(const std::string& data, const std::string& preset,
               const std::string& config_path, const std::string& profile,
               const std::string& out_dir) {
  ModelConfig cfg = load_config_or_default(config_path, profile);
  cfg.apply_preset(preset);
  fs::create_directories(out_dir);
  auto train_clips = load_clips(data, Split::kTrain, cfg);
  auto val_clips = load_clips(data, Split::kTest, cfg);
  TrainOptions opts;
  opts.log_csv = fs::path(out_dir) / (preset + "_train.csv");
  Checkpoint ckpt = train_model(train_clips, val_clips, cfg, opts);
  ckpt.save(fs::path(out_dir) / (preset + ".ckpt"));
  auto model = ckpt.restore_model();
  EvalReport report = evaluate(*model, val_clips);
  report.save(fs::path(out_dir) / (preset + "_report.json"));
  std::cout << "preset " << preset << ": AP " << report.ap << " F1 " << report.f1
            << " Acc " << report.acc << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"On-road object importance estimation toolkit"};
  app.require_subcommand(1);

  std::string data, config_path, out, profile = "default";
  std::string rule, log_csv, resume_path, checkpoint, report_path, pr_csv;
  std::string clip_spec, overlay_dir, preset;
  uint64_t seed = 0;
  int64_t n_clips = 0, obj_min = 0, obj_max = 0, frames = 0, size = 0;
  double threshold = 0.5;

  auto* make = app.add_subcommand("make-synthetic", "Generate a synthetic dataset");
  make->add_option("--out", out, "Output dataset root")->required();
  make->add_option("--config", config_path, "Config file (synthetic section)");
  make->add_option("--seed", seed, "Generator seed");
  make->add_option("--n-clips", n_clips, "Number of clips");
  make->add_option("--objects-min", obj_min, "Minimum objects per clip");
  make->add_option("--objects-max", obj_max, "Maximum objects per clip");
  make->add_option("--rule", rule,
                   "intention_path_collision | drivable_area | lane_barrier");
  make->add_option("--frames", frames, "Frames per scene");
  make->add_option("--size", size, "Rendered image size");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--data", data, "Dataset root")->required();
  train->add_option("--config", config_path, "Config JSON file");
  train->add_option("--profile", profile, "default | micro (when no --config)");
  train->add_option("--out", out, "Checkpoint output path")->required();
  train->add_option("--log", log_csv, "Training log CSV");
  train->add_option("--resume", resume_path, "Checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval->add_option("--data", data, "Dataset root")->required();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
  eval->add_option("--report", report_path, "Report JSON output")->required();
  eval->add_option("--pr-csv", pr_csv, "PR curve CSV output");

  auto* predict = app.add_subcommand("predict", "Run one clip and render overlays");
  predict->add_option("--data", data, "Dataset root")->required();
  predict->add_option("--clip", clip_spec, "Scene id or scene:t_end")->required();
  predict->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
  predict->add_option("--overlay-dir", overlay_dir, "Overlay output dir")->required();
  predict->add_option("--threshold", threshold, "Importance threshold");

  auto* ablate = app.add_subcommand("ablate", "Train + evaluate an ablation preset");
  ablate->add_option("--data", data, "Dataset root")->required();
  std::string preset_help = "Preset:";
  for (const auto& p : ModelConfig::preset_names()) preset_help += " " + p;
  ablate->add_option("--preset", preset, preset_help)->required();
  ablate->add_option("--config", config_path, "Config JSON file");
  ablate->add_option("--profile", profile, "default | micro (when no --config)");
  ablate->add_option("--out-dir", out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (make->parsed())
      return run_make_synthetic(out, config_path, seed, n_clips, obj_min, obj_max,
                                rule, frames, size);
    if (train->parsed())
      return run_train(data, config_path, profile, out, log_csv, resume_path);
    if (eval->parsed()) return run_eval(data, checkpoint, report_path, pr_csv);
    if (predict->parsed())
      return run_predict(data, clip_spec, checkpoint, overlay_dir, threshold);
    if (ablate->parsed())
      return run_ablate(data, preset, config_path, profile, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
