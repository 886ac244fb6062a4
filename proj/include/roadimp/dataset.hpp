#ifndef ROADIMP_DATASET_HPP
#define ROADIMP_DATASET_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "roadimp/config.hpp"
#include "roadimp/tensor.hpp"

namespace roadimp {

struct ObjectAnnotation {
  int64_t track_id = 0;
  std::array<double, 4> box = {0, 0, 0, 0};  // x_min, y_min, x_max, y_max (pixels)
  int importance = 0;                        // 1 = important
};

struct SceneRecord {
  std::string scene_id;
  std::filesystem::path dir;
  int64_t frame_count = 0;
  double fps = 10.0;
  // frame index -> annotations, ascending track_id within a frame
  std::map<int64_t, std::vector<ObjectAnnotation>> annotations;
  std::vector<double> ego_angular_velocity;  // one entry per frame

  std::filesystem::path frame_path(int64_t idx) const;
  std::filesystem::path seg_path(int64_t idx) const;
  std::filesystem::path lane_path(int64_t idx) const;
  std::filesystem::path flow_path(int64_t idx) const;
};

struct LaneInput {
  static constexpr int64_t kMaxLanes = 20;
  Tensor points;  // [20, 4], zero-padded fitted-segment endpoints (x1,y1,x2,y2)
  int64_t count = 0;

  static LaneInput empty();
};

/// One T-frame window: the unit of inference.
struct ClipSample {
  Tensor frames;    // [T, 3, H, W], values in [0,1]
  Tensor flow;      // [T, 3, H, W], rendered flow image in [0,1]
  Tensor boxes;     // [N, T, 4] in resized coordinates
  Tensor validity;  // [N, T], 1 where the track is annotated
  LaneInput lanes;
  Tensor seg_map;   // [3, H, W] color-coded semantics for the final frame
  double ego_velocity = 0.0;  // E at the clip's first frame
  std::vector<int> labels;    // N, binary
  std::vector<int64_t> track_ids;
  std::string scene_id;
  int64_t t_end = 0;

  int64_t num_objects() const { return static_cast<int64_t>(labels.size()); }
};

struct SyntheticConfig {
  enum class Rule { kIntentionPathCollision, kDrivableArea, kLaneBarrier };

  int64_t n_clips = 32;
  std::array<int64_t, 2> n_objects_range = {4, 8};
  Rule rule = Rule::kIntentionPathCollision;
  uint64_t seed = 0;
  int64_t frames_per_scene = 16;
  int64_t image_size = 320;
  double train_fraction = 0.75;
  double beta = 2.2;  // turning threshold used when assigning ego intents

  static Rule rule_from_string(const std::string& s);
  static std::string rule_to_string(Rule r);
};

enum class Split { kTrain, kTest };

/// Reads the manifest and every scene of the requested split. Throws on a
/// missing/invalid manifest or malformed per-scene files; validates that the
/// per-scene frame counts sum to the manifest total.
std::vector<SceneRecord> load_dataset(const std::filesystem::path& root, Split split);

/// Extracts the T-frame window ending at t_end. Throws std::out_of_range when
/// t_end < T-1 or the window leaves the scene.
ClipSample sample_clip(const SceneRecord& scene, int64_t t_end, const ModelConfig& cfg);

/// Dense optical flow between consecutive frames rendered as a 3-channel
/// image (hue = direction, value = magnitude / mag_scale clamped to 1,
/// saturation = 1). The first frame gets a zero flow field. Input/output
/// [T,3,H,W] in [0,1]; throws std::invalid_argument for fewer than 2 frames.
Tensor compute_flow(const Tensor& frames, double mag_scale);

/// Summarizes each polyline to fitted-segment endpoints, keeps the 20 longest
/// (ties broken by the encoded row), zero-pads the rest.
LaneInput encode_lanes(const std::vector<std::vector<std::array<double, 2>>>& polylines);

/// Renders a deterministic desk-scale dataset under out_root and returns it.
std::filesystem::path generate_synthetic(const SyntheticConfig& config,
                                         const std::filesystem::path& out_root);

/// Eligible evaluation windows of a scene: annotated frames >= T-1 stepped by
/// `stride` raw frame indices.
std::vector<int64_t> eval_frame_indices(const SceneRecord& scene, int64_t T,
                                        int64_t stride);

}  // namespace roadimp

#endif  // ROADIMP_DATASET_HPP
