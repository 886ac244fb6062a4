#ifndef ROADIMP_CONFIG_HPP
#define ROADIMP_CONFIG_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace roadimp {

/// Optimizer and schedule settings; recorded verbatim in checkpoints.
struct TrainConfig {
  double lr = 1e-4;            // initial rate of the cosine schedule
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int64_t batch_size = 8;
  int64_t epochs = 50;
  uint64_t seed = 0;
  std::string precision = "float64";

  void validate() const;
};

/// All model/runtime constants. Defaults correspond to the full-scale
/// configuration; `micro()` is the CPU-sized test profile.
struct ModelConfig {
  // clip geometry
  int64_t T = 16;          // frames per clip
  int64_t image_size = 320;  // W = H
  int64_t roi_size = 10;     // W' = H'
  int64_t C = 512;           // backbone channels
  int64_t Cp = 256;          // C', temporal/lane embedding width
  int64_t heads = 8;

  // ofe
  std::string backbone = "tiny";  // tiny | resnet18
  std::vector<int64_t> tiny_strides = {4, 2, 2};
  bool backbone_bias = true;
  bool use_spatial = true;   // OFE ablation switches
  bool use_temporal = true;

  // disg
  double a = 1.0;
  double b = 1.5;
  double beta = 2.2;
  bool use_disg = true;        // framework-level switch (bottom-up only when false)
  bool use_semantics = true;
  bool use_intention = true;

  // trg
  double alpha = 0.001;
  double soft_k = 50.0;
  bool use_trg = true;
  bool use_interaction = true;
  bool use_weighting = true;

  // input normalization, fixed constants recorded in checkpoints
  std::array<double, 3> norm_mean = {0.485, 0.456, 0.406};
  std::array<double, 3> norm_std = {0.229, 0.224, 0.225};

  // flow rendering: value channel = min(1, magnitude / flow_mag_scale)
  double flow_mag_scale = 8.0;

  // evaluation cadence over raw frame indices
  int64_t eval_stride = 10;

  TrainConfig train;

  static ModelConfig defaults() { return {}; }
  static ModelConfig micro();

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  static ModelConfig load(const std::string& path);
  void save(const std::string& path) const;

  /// Applies one of the named ablation presets (bu, bu+trg, bu+disg, full,
  /// ofe-spatial, ofe-temporal, disg-semantics, disg-intention,
  /// trg-interaction). Throws on unknown names.
  void apply_preset(const std::string& preset);
  static std::vector<std::string> preset_names();
};

}  // namespace roadimp

#endif  // ROADIMP_CONFIG_HPP
