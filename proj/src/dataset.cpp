#include "roadimp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <opencv2/video/tracking.hpp>
#include <sstream>

namespace roadimp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string frame_name(int64_t idx, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld%s", static_cast<long long>(idx), ext);
  return buf;
}

}  // namespace

std::filesystem::path SceneRecord::frame_path(int64_t idx) const {
  return dir / "frames" / frame_name(idx, ".png");
}
std::filesystem::path SceneRecord::seg_path(int64_t idx) const {
  return dir / "seg" / frame_name(idx, ".png");
}
std::filesystem::path SceneRecord::lane_path(int64_t idx) const {
  return dir / "lanes" / frame_name(idx, ".json");
}
std::filesystem::path SceneRecord::flow_path(int64_t idx) const {
  return dir / "flow" / frame_name(idx, ".png");
}

LaneInput LaneInput::empty() {
  LaneInput l;
  l.points = Tensor::zeros({kMaxLanes, 4});
  l.count = 0;
  return l;
}

SyntheticConfig::Rule SyntheticConfig::rule_from_string(const std::string& s) {
  if (s == "intention_path_collision") return Rule::kIntentionPathCollision;
  if (s == "drivable_area") return Rule::kDrivableArea;
  if (s == "lane_barrier") return Rule::kLaneBarrier;
  fail("unknown importance rule '" + s + "'");
}

std::string SyntheticConfig::rule_to_string(Rule r) {
  switch (r) {
    case Rule::kIntentionPathCollision: return "intention_path_collision";
    case Rule::kDrivableArea: return "drivable_area";
    case Rule::kLaneBarrier: return "lane_barrier";
  }
  return "?";
}

// ---- loading -----------------------------------------------------------------

namespace {

SceneRecord load_scene(const fs::path& root, const std::string& scene_id,
                       int64_t frame_count, double fps) {
  SceneRecord scene;
  scene.scene_id = scene_id;
  scene.dir = root / scene_id;
  scene.frame_count = frame_count;
  scene.fps = fps;

  const fs::path ann_path = scene.dir / "annotations.jsonl";
  std::ifstream ann(ann_path);
  RI_CHECK(ann.good(), "scene '" + scene_id + "': missing " + ann_path.string());
  std::string line;
  int64_t line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      fail("scene '" + scene_id + "': malformed annotation at line " +
           std::to_string(line_no) + ": " + e.what());
    }
    const std::string where =
        "scene '" + scene_id + "' line " + std::to_string(line_no);
    RI_CHECK(j.contains("frame") && j.contains("track_id") && j.contains("box") &&
                 j.contains("importance"),
             where + ": annotation row missing a required field");
    ObjectAnnotation a;
    const int64_t frame = j.at("frame").get<int64_t>();
    a.track_id = j.at("track_id").get<int64_t>();
    auto box = j.at("box").get<std::vector<double>>();
    RI_CHECK(box.size() == 4, where + ": box must have 4 coordinates");
    std::copy(box.begin(), box.end(), a.box.begin());
    a.importance = j.at("importance").get<int>();
    RI_CHECK(frame >= 0 && frame < frame_count,
             where + ": frame " + std::to_string(frame) + " outside scene (" +
                 std::to_string(frame_count) + " frames)");
    RI_CHECK(a.box[0] < a.box[2] && a.box[1] < a.box[3],
             where + ": degenerate box for track " + std::to_string(a.track_id) +
                 " at frame " + std::to_string(frame));
    RI_CHECK(a.importance == 0 || a.importance == 1,
             where + ": importance must be 0 or 1");
    auto& frame_anns = scene.annotations[frame];
    for (const auto& prev : frame_anns)
      RI_CHECK(prev.track_id != a.track_id,
               where + ": duplicate track " + std::to_string(a.track_id) +
                   " at frame " + std::to_string(frame));
    frame_anns.push_back(a);
  }
  for (auto& [frame, anns] : scene.annotations)
    std::sort(anns.begin(), anns.end(),
              [](const auto& x, const auto& y) { return x.track_id < y.track_id; });

  const fs::path ego_path = scene.dir / "ego.csv";
  std::ifstream ego(ego_path);
  RI_CHECK(ego.good(), "scene '" + scene_id + "': missing " + ego_path.string());
  scene.ego_angular_velocity.assign(frame_count, 0.0);
  std::vector<bool> seen(frame_count, false);
  line_no = 0;
  while (std::getline(ego, line)) {
    ++line_no;
    if (line.empty() || (line_no == 1 && line.rfind("frame", 0) == 0)) continue;
    std::istringstream ss(line);
    std::string tok;
    RI_CHECK(std::getline(ss, tok, ','), "scene '" + scene_id + "': bad ego.csv row " +
                                             std::to_string(line_no));
    const int64_t frame = std::stoll(tok);
    RI_CHECK(std::getline(ss, tok, ','), "scene '" + scene_id + "': bad ego.csv row " +
                                             std::to_string(line_no));
    const double e = std::stod(tok);
    RI_CHECK(frame >= 0 && frame < frame_count,
             "scene '" + scene_id + "': ego.csv frame out of range at row " +
                 std::to_string(line_no));
    scene.ego_angular_velocity[frame] = e;
    seen[frame] = true;
  }
  for (int64_t f = 0; f < frame_count; ++f)
    RI_CHECK(seen[f], "scene '" + scene_id + "': ego.csv has no row for frame " +
                          std::to_string(f));
  return scene;
}

}  // namespace

std::vector<SceneRecord> load_dataset(const std::filesystem::path& root, Split split) {
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream in(manifest_path);
  RI_CHECK(in.good(), "missing manifest: " + manifest_path.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const std::exception& e) {
    fail("invalid manifest " + manifest_path.string() + ": " + e.what());
  }
  RI_CHECK(m.contains("scenes") && m.contains("splits") && m.contains("totals"),
           "manifest missing scenes/splits/totals: " + manifest_path.string());

  std::map<std::string, std::pair<int64_t, double>> scene_info;  // id -> (frames, fps)
  int64_t frame_total = 0;
  for (const auto& s : m.at("scenes")) {
    const std::string id = s.at("id").get<std::string>();
    const int64_t frames = s.at("frames").get<int64_t>();
    const double fps = s.contains("fps") ? s.at("fps").get<double>() : 10.0;
    RI_CHECK(frames > 0, "manifest: scene '" + id + "' has no frames");
    RI_CHECK(!scene_info.count(id), "manifest: duplicate scene '" + id + "'");
    scene_info[id] = {frames, fps};
    frame_total += frames;
  }
  const int64_t declared_total = m.at("totals").at("frames").get<int64_t>();
  RI_CHECK(frame_total == declared_total,
           "manifest: scene frame counts sum to " + std::to_string(frame_total) +
               " but totals.frames = " + std::to_string(declared_total));

  const std::string split_key = split == Split::kTrain ? "train" : "test";
  RI_CHECK(m.at("splits").contains(split_key),
           "manifest: missing split '" + split_key + "'");
  std::vector<SceneRecord> scenes;
  for (const auto& sid : m.at("splits").at(split_key)) {
    const std::string id = sid.get<std::string>();
    auto it = scene_info.find(id);
    RI_CHECK(it != scene_info.end(),
             "manifest: split '" + split_key + "' references unknown scene '" + id + "'");
    scenes.push_back(load_scene(root, id, it->second.first, it->second.second));
  }
  return scenes;
}

// ---- flow ----------------------------------------------------------------------

namespace {

cv::Mat tensor_frame_to_gray8(const Tensor& frames, int64_t t) {
  const int64_t h = frames.size(2), w = frames.size(3);
  const double* p = frames.data() + t * 3 * h * w;
  cv::Mat gray(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      const double r = p[0 * h * w + i * w + j];
      const double g = p[1 * h * w + i * w + j];
      const double b = p[2 * h * w + i * w + j];
      const double v = 0.299 * r + 0.587 * g + 0.114 * b;
      gray.at<uint8_t>(static_cast<int>(i), static_cast<int>(j)) =
          static_cast<uint8_t>(std::min(255.0, std::max(0.0, v * 255.0 + 0.5)));
    }
  return gray;
}

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  // h in [0,1), s,v in [0,1]
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

}  // namespace

// Estimator noise below this magnitude (pixels) renders as exactly zero, so
// static clips produce a true zero-magnitude image.
constexpr double kFlowMagFloor = 0.02;

Tensor compute_flow(const Tensor& frames, double mag_scale) {
  RI_CHECK(frames.dim() == 4 && frames.size(1) == 3,
           "compute_flow: expected [T,3,H,W]");
  const int64_t T = frames.size(0), h = frames.size(2), w = frames.size(3);
  if (T < 2) throw std::invalid_argument("compute_flow: need at least 2 frames");
  RI_CHECK(mag_scale > 0.0, "compute_flow: mag_scale must be positive");

  std::vector<double> out(static_cast<size_t>(T * 3 * h * w), 0.0);
  cv::Mat prev = tensor_frame_to_gray8(frames, 0);
  for (int64_t t = 1; t < T; ++t) {
    cv::Mat next = tensor_frame_to_gray8(frames, t);
    if (cv::countNonZero(prev != next) == 0) {  // identical frames: exact zero
      prev = next;
      continue;
    }
    cv::Mat flow;
    cv::calcOpticalFlowFarneback(prev, next, flow, 0.5, 3, 15, 3, 5, 1.2, 0);
    double* dst = out.data() + t * 3 * h * w;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        const cv::Point2f f = flow.at<cv::Point2f>(static_cast<int>(i),
                                                   static_cast<int>(j));
        const double mag = std::sqrt(static_cast<double>(f.x) * f.x +
                                     static_cast<double>(f.y) * f.y);
        if (mag < kFlowMagFloor) continue;  // dst already zero
        double angle = std::atan2(static_cast<double>(f.y), static_cast<double>(f.x));
        if (angle < 0) angle += 2.0 * M_PI;
        double rgb[3];
        hsv_to_rgb(angle / (2.0 * M_PI), 1.0, std::min(1.0, mag / mag_scale), rgb);
        dst[0 * h * w + i * w + j] = rgb[0];
        dst[1 * h * w + i * w + j] = rgb[1];
        dst[2 * h * w + i * w + j] = rgb[2];
      }
    prev = next;
  }
  // First frame: zero flow field rendered as zero magnitude (black).
  return Tensor::from_vector({T, 3, h, w}, std::move(out));
}

// ---- lanes ----------------------------------------------------------------------

LaneInput encode_lanes(
    const std::vector<std::vector<std::array<double, 2>>>& polylines) {
  struct Encoded {
    double length;
    std::array<double, 4> row;
  };
  std::vector<Encoded> lanes;
  for (const auto& poly : polylines) {
    if (poly.size() < 2) continue;
    double length = 0.0;
    for (size_t i = 1; i < poly.size(); ++i)
      length += std::hypot(poly[i][0] - poly[i - 1][0], poly[i][1] - poly[i - 1][1]);
    if (length <= 0.0) continue;
    // Total-least-squares direction via the principal axis.
    double mx = 0, my = 0;
    for (const auto& p : poly) {
      mx += p[0];
      my += p[1];
    }
    mx /= static_cast<double>(poly.size());
    my /= static_cast<double>(poly.size());
    double sxx = 0, sxy = 0, syy = 0;
    for (const auto& p : poly) {
      const double dx = p[0] - mx, dy = p[1] - my;
      sxx += dx * dx;
      sxy += dx * dy;
      syy += dy * dy;
    }
    // Leading eigenvector of [[sxx,sxy],[sxy,syy]].
    const double tr = sxx + syy;
    const double det = sxx * syy - sxy * sxy;
    const double lambda = 0.5 * tr + std::sqrt(std::max(0.0, 0.25 * tr * tr - det));
    double dx, dy;
    if (std::abs(sxy) > 1e-12) {
      dx = lambda - syy;
      dy = sxy;
    } else if (sxx >= syy) {
      dx = 1.0;
      dy = 0.0;
    } else {
      dx = 0.0;
      dy = 1.0;
    }
    const double norm = std::hypot(dx, dy);
    dx /= norm;
    dy /= norm;
    double tmin = std::numeric_limits<double>::infinity();
    double tmax = -std::numeric_limits<double>::infinity();
    for (const auto& p : poly) {
      const double t = (p[0] - mx) * dx + (p[1] - my) * dy;
      tmin = std::min(tmin, t);
      tmax = std::max(tmax, t);
    }
    std::array<double, 2> e0 = {mx + tmin * dx, my + tmin * dy};
    std::array<double, 2> e1 = {mx + tmax * dx, my + tmax * dy};
    // Endpoint order: ascending y, then ascending x.
    if (e1[1] < e0[1] || (e1[1] == e0[1] && e1[0] < e0[0])) std::swap(e0, e1);
    lanes.push_back({length, {e0[0], e0[1], e1[0], e1[1]}});
  }
  std::sort(lanes.begin(), lanes.end(), [](const Encoded& a, const Encoded& b) {
    if (a.length != b.length) return a.length > b.length;
    return a.row < b.row;
  });
  LaneInput out = LaneInput::empty();
  out.count = std::min<int64_t>(static_cast<int64_t>(lanes.size()), LaneInput::kMaxLanes);
  for (int64_t i = 0; i < out.count; ++i)
    for (int64_t k = 0; k < 4; ++k) out.points.vec()[i * 4 + k] = lanes[i].row[k];
  return out;
}

// ---- clip sampling -----------------------------------------------------------------

namespace {

// Decoded image -> [3,H,W] planes in [0,1], resized to size x size.
void push_image_planes(const cv::Mat& img_bgr, int64_t size, bool nearest,
                       std::vector<double>& dst) {
  cv::Mat resized;
  if (img_bgr.rows == size && img_bgr.cols == size)
    resized = img_bgr;
  else
    cv::resize(img_bgr, resized, cv::Size(static_cast<int>(size), static_cast<int>(size)),
               0, 0, nearest ? cv::INTER_NEAREST : cv::INTER_LINEAR);
  const size_t plane = static_cast<size_t>(size * size);
  const size_t base = dst.size();
  dst.resize(base + 3 * plane);
  for (int64_t i = 0; i < size; ++i)
    for (int64_t j = 0; j < size; ++j) {
      const cv::Vec3b px = resized.at<cv::Vec3b>(static_cast<int>(i), static_cast<int>(j));
      dst[base + 0 * plane + i * size + j] = px[2] / 255.0;  // R
      dst[base + 1 * plane + i * size + j] = px[1] / 255.0;  // G
      dst[base + 2 * plane + i * size + j] = px[0] / 255.0;  // B
    }
}

cv::Mat read_image(const fs::path& path, const std::string& what) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  RI_CHECK(!img.empty(), "cannot read " + what + ": " + path.string());
  return img;
}

std::vector<std::vector<std::array<double, 2>>> read_lane_file(const fs::path& path) {
  std::vector<std::vector<std::array<double, 2>>> polylines;
  std::ifstream in(path);
  if (!in.good()) return polylines;  // absent file = no detected lanes
  json j;
  try {
    j = json::parse(in);
  } catch (const std::exception& e) {
    fail("invalid lane file " + path.string() + ": " + e.what());
  }
  for (const auto& lane : j.at("lanes")) {
    std::vector<std::array<double, 2>> poly;
    for (const auto& pt : lane)
      poly.push_back({pt.at(0).get<double>(), pt.at(1).get<double>()});
    polylines.push_back(std::move(poly));
  }
  return polylines;
}

}  // namespace

ClipSample sample_clip(const SceneRecord& scene, int64_t t_end, const ModelConfig& cfg) {
  const int64_t T = cfg.T;
  if (t_end < T - 1)
    throw std::out_of_range("sample_clip: t_end " + std::to_string(t_end) +
                            " < T-1 = " + std::to_string(T - 1));
  RI_CHECK(t_end < scene.frame_count,
           "sample_clip: t_end " + std::to_string(t_end) + " outside scene '" +
               scene.scene_id + "'");
  const int64_t t0 = t_end - T + 1;
  const int64_t S = cfg.image_size;

  ClipSample clip;
  clip.scene_id = scene.scene_id;
  clip.t_end = t_end;

  // Frames
  std::vector<double> frame_data;
  frame_data.reserve(static_cast<size_t>(T * 3 * S * S));
  double sx = 1.0, sy = 1.0;  // native -> resized scale, set from the first frame
  for (int64_t t = t0; t <= t_end; ++t) {
    cv::Mat img = read_image(scene.frame_path(t), "frame");
    if (t == t0) {
      sx = static_cast<double>(S) / img.cols;
      sy = static_cast<double>(S) / img.rows;
    }
    push_image_planes(img, S, false, frame_data);
  }
  clip.frames = Tensor::from_vector({T, 3, S, S}, std::move(frame_data));

  // Flow: precomputed files if the full window has them, else OpenCV.
  bool have_flow_files = true;
  for (int64_t t = t0; t <= t_end; ++t)
    if (!fs::exists(scene.flow_path(t))) {
      have_flow_files = false;
      break;
    }
  if (have_flow_files) {
    std::vector<double> flow_data;
    flow_data.reserve(static_cast<size_t>(T * 3 * S * S));
    for (int64_t t = t0; t <= t_end; ++t)
      push_image_planes(read_image(scene.flow_path(t), "flow image"), S, false,
                        flow_data);
    clip.flow = Tensor::from_vector({T, 3, S, S}, std::move(flow_data));
  } else {
    clip.flow = compute_flow(clip.frames, cfg.flow_mag_scale);
  }

  // Objects present at the final frame, ascending track_id.
  auto it = scene.annotations.find(t_end);
  const std::vector<ObjectAnnotation> empty_anns;
  const auto& final_anns = it != scene.annotations.end() ? it->second : empty_anns;
  const int64_t N = static_cast<int64_t>(final_anns.size());
  RI_CHECK(N >= 1, "sample_clip: no annotated objects at frame " +
                       std::to_string(t_end) + " of scene '" + scene.scene_id + "'");

  clip.boxes = Tensor::zeros({N, T, 4});
  clip.validity = Tensor::zeros({N, T});
  for (int64_t n = 0; n < N; ++n) {
    clip.track_ids.push_back(final_anns[n].track_id);
    clip.labels.push_back(final_anns[n].importance);
    for (int64_t t = t0; t <= t_end; ++t) {
      auto fit = scene.annotations.find(t);
      if (fit == scene.annotations.end()) continue;
      for (const auto& a : fit->second) {
        if (a.track_id != final_anns[n].track_id) continue;
        const int64_t tt = t - t0;
        double* box = clip.boxes.data() + (n * T + tt) * 4;
        box[0] = a.box[0] * sx;
        box[1] = a.box[1] * sy;
        box[2] = a.box[2] * sx;
        box[3] = a.box[3] * sy;
        clip.validity.data()[n * T + tt] = 1.0;
        break;
      }
    }
  }

  // Lanes at the final frame, scaled to resized coordinates.
  auto polylines = read_lane_file(scene.lane_path(t_end));
  for (auto& poly : polylines)
    for (auto& pt : poly) {
      pt[0] *= sx;
      pt[1] *= sy;
    }
  clip.lanes = encode_lanes(polylines);

  // Semantic map for the final frame (nearest-neighbour keeps label colors).
  std::vector<double> seg_data;
  seg_data.reserve(static_cast<size_t>(3 * S * S));
  push_image_planes(read_image(scene.seg_path(t_end), "segmentation map"), S, true,
                    seg_data);
  clip.seg_map = Tensor::from_vector({3, S, S}, std::move(seg_data));

  RI_CHECK(t0 < static_cast<int64_t>(scene.ego_angular_velocity.size()),
           "sample_clip: missing ego velocity for frame " + std::to_string(t0));
  clip.ego_velocity = scene.ego_angular_velocity[t0];
  return clip;
}

std::vector<int64_t> eval_frame_indices(const SceneRecord& scene, int64_t T,
                                        int64_t stride) {
  std::vector<int64_t> out;
  int64_t last = std::numeric_limits<int64_t>::min();
  for (const auto& [frame, anns] : scene.annotations) {
    if (frame < T - 1 || anns.empty()) continue;
    if (out.empty() || frame - last >= stride) {
      out.push_back(frame);
      last = frame;
    }
  }
  return out;
}

// ---- synthetic generator ---------------------------------------------------------

namespace {

struct SynthObject {
  double cx, cy, w, h;   // box geometry at t=0 (pixels)
  double vx, vy;         // velocity per frame
  cv::Scalar color;      // painted body color (BGR)
  int64_t track_id;

  std::array<double, 4> box_at(int64_t t, int64_t size) const {
    double x = cx + vx * static_cast<double>(t);
    double y = cy + vy * static_cast<double>(t);
    x = std::min(std::max(x, w / 2 + 1.0), static_cast<double>(size) - w / 2 - 1.0);
    y = std::min(std::max(y, h / 2 + 1.0), static_cast<double>(size) - h / 2 - 1.0);
    return {x - w / 2, y - h / 2, x + w / 2, y + h / 2};
  }
};

struct RoadGeom {
  double road_left, road_right;           // solid edge lines
  std::vector<double> dashed_xs;          // dashed in-road markings
  explicit RoadGeom(int64_t size) {
    road_left = 0.25 * static_cast<double>(size);
    road_right = 0.75 * static_cast<double>(size);
    dashed_xs = {0.4166 * static_cast<double>(size), 0.5833 * static_cast<double>(size)};
  }
};

cv::Mat render_frame(int64_t size, const RoadGeom& geom,
                     const std::vector<SynthObject>& objs, int64_t t) {
  const int s = static_cast<int>(size);
  cv::Mat img(s, s, CV_8UC3);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      cv::Vec3b px;
      if (j >= geom.road_left && j <= geom.road_right) {
        // Road surface with a strong horizontal shade gradient (position cue).
        const uint8_t base = static_cast<uint8_t>(50 + 160.0 * j / s);
        px = cv::Vec3b(base, base, base);
      } else if (j < geom.road_left) {
        // vegetation strip, brightening toward the road
        px = cv::Vec3b(30, static_cast<uint8_t>(120 + 300.0 * j / s), 30);
      } else {
        // sidewalk strip, warm tones deepening to the right
        px = cv::Vec3b(60, static_cast<uint8_t>(40 + 120.0 * j / s),
                       static_cast<uint8_t>(120 + 130.0 * j / s));
      }
      img.at<cv::Vec3b>(i, j) = px;
    }
  const int lw = std::max(1, s / 64);
  auto draw_vline = [&](double x, bool dashed, cv::Vec3b color) {
    const int xi = static_cast<int>(x);
    for (int i = 0; i < s; ++i) {
      if (dashed && (i / (s / 8)) % 2 == 1) continue;
      for (int dj = 0; dj < lw; ++dj) {
        const int j = std::min(s - 1, xi + dj);
        img.at<cv::Vec3b>(i, j) = color;
      }
    }
  };
  // white left edge, yellow right edge: another left/right anchor
  draw_vline(geom.road_left, false, cv::Vec3b(255, 255, 255));
  draw_vline(geom.road_right, false, cv::Vec3b(0, 215, 255));
  for (double x : geom.dashed_xs) draw_vline(x, true, cv::Vec3b(255, 255, 255));

  for (const auto& o : objs) {
    auto b = o.box_at(t, size);
    // Body fills 70% of the box so background position cues remain visible.
    const double mw = 0.15 * (b[2] - b[0]), mh = 0.15 * (b[3] - b[1]);
    cv::rectangle(img,
                  cv::Point(static_cast<int>(b[0] + mw), static_cast<int>(b[1] + mh)),
                  cv::Point(static_cast<int>(b[2] - mw), static_cast<int>(b[3] - mh)),
                  o.color, cv::FILLED);
  }
  return img;
}

cv::Mat render_seg(int64_t size, const RoadGeom& geom,
                   const std::vector<SynthObject>& objs, int64_t t) {
  const int s = static_cast<int>(size);
  cv::Mat img(s, s, CV_8UC3);
  // Left-right asymmetric semantics (vegetation vs sidewalk), as in real
  // scenes; a mirror-symmetric map would make left- and right-turn guidance
  // indistinguishable to attention, which has no positional encoding.
  const cv::Vec3b road(128, 64, 128), vegetation(35, 142, 107),
      sidewalk(232, 35, 244), vehicle(142, 0, 0);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      cv::Vec3b px;
      if (j >= geom.road_left && j <= geom.road_right)
        px = road;
      else
        px = j < geom.road_left ? vegetation : sidewalk;
      img.at<cv::Vec3b>(i, j) = px;
    }
  for (const auto& o : objs) {
    auto b = o.box_at(t, size);
    cv::rectangle(img, cv::Point(static_cast<int>(b[0]), static_cast<int>(b[1])),
                  cv::Point(static_cast<int>(b[2]), static_cast<int>(b[3])), vehicle,
                  cv::FILLED);
  }
  return img;
}

json lane_json(int64_t size, const RoadGeom& geom) {
  json lanes = json::array();
  auto solid = [&](double x) {
    return json::array({json::array({x, 0.0}),
                        json::array({x, static_cast<double>(size - 1)})});
  };
  lanes.push_back(solid(geom.road_left));
  lanes.push_back(solid(geom.road_right));
  const double seg_len = static_cast<double>(size) / 8.0;
  for (double x : geom.dashed_xs)
    for (int k = 0; k < 4; ++k) {
      const double y0 = 2 * k * seg_len;
      lanes.push_back(json::array(
          {json::array({x, y0}), json::array({x, y0 + seg_len - 1.0})}));
    }
  return json{{"lanes", lanes}};
}

int label_for(const SynthObject& o, int64_t t, int64_t size, const RoadGeom& geom,
              SyntheticConfig::Rule rule, double ego_e, double beta) {
  const auto b = o.box_at(t, size);
  const double cx = 0.5 * (b[0] + b[2]);
  switch (rule) {
    case SyntheticConfig::Rule::kIntentionPathCollision: {
      // Collision corridor: turning left puts the risk on the right side of
      // the view (oncoming traffic crossing the new path), and vice versa;
      // going straight keeps it in the centre.
      const double third = static_cast<double>(size) / 3.0;
      double lo, hi;
      if (ego_e > beta) {  // left turn
        lo = 2 * third;
        hi = static_cast<double>(size);
      } else if (ego_e < -beta) {  // right turn
        lo = 0;
        hi = third;
      } else {
        lo = third;
        hi = 2 * third;
      }
      return (cx >= lo && cx < hi) ? 1 : 0;
    }
    case SyntheticConfig::Rule::kDrivableArea: {
      const double bottom_cx = cx;  // bottom centre shares x with the centre
      return (bottom_cx >= geom.road_left && bottom_cx <= geom.road_right) ? 1 : 0;
    }
    case SyntheticConfig::Rule::kLaneBarrier: {
      // Unimportant when a solid line separates the object from the ego
      // column at the image centre.
      const double ego_x = 0.5 * static_cast<double>(size);
      for (double lx : {geom.road_left, geom.road_right}) {
        if ((cx < lx && lx < ego_x) || (ego_x < lx && lx < cx)) return 0;
      }
      return 1;
    }
  }
  return 0;
}

}  // namespace

std::filesystem::path generate_synthetic(const SyntheticConfig& config,
                                         const std::filesystem::path& out_root) {
  RI_CHECK(config.n_clips >= 1, "generate_synthetic: n_clips must be >= 1");
  RI_CHECK(config.n_objects_range[0] >= 1 &&
               config.n_objects_range[1] >= config.n_objects_range[0],
           "generate_synthetic: bad n_objects_range");
  RI_CHECK(config.frames_per_scene >= 2, "generate_synthetic: need >= 2 frames");
  Rng rng(config.seed);
  fs::create_directories(out_root);

  const int64_t S = config.image_size;
  const RoadGeom geom(S);
  json manifest_scenes = json::array();
  json train_ids = json::array(), test_ids = json::array();
  int64_t total_frames = 0, total_objects = 0;
  const int64_t n_train = std::max<int64_t>(
      1, static_cast<int64_t>(std::llround(config.train_fraction *
                                           static_cast<double>(config.n_clips))));

  for (int64_t c = 0; c < config.n_clips; ++c) {
    char sid[16];
    std::snprintf(sid, sizeof(sid), "s%04lld", static_cast<long long>(c));
    const fs::path sdir = out_root / sid;
    fs::create_directories(sdir / "frames");
    fs::create_directories(sdir / "seg");
    fs::create_directories(sdir / "lanes");

    // Ego intent: straight half the time, turns a quarter each. The skew
    // gives object position an informative marginal, which real driving data
    // has as well; a uniform intent mix would make the labels a pure
    // position-intent parity problem.
    const int64_t draw = rng.uniform_int(0, 3);
    const int64_t intent = draw <= 1 ? 1 : (draw == 2 ? 0 : 2);
    double ego_e;
    if (intent == 0)
      ego_e = config.beta + 0.5 + rng.uniform(0.0, 1.0);
    else if (intent == 2)
      ego_e = -(config.beta + 0.5 + rng.uniform(0.0, 1.0));
    else
      ego_e = rng.uniform(-0.5, 0.5) * config.beta;

    const int64_t n_objects =
        rng.uniform_int(config.n_objects_range[0], config.n_objects_range[1]);
    std::vector<SynthObject> objs;
    // Region boundaries that decide labels; spawning right on top of one
    // makes the label unreadable through the feature-map blur.
    const std::vector<double> boundaries = {geom.road_left, geom.road_right,
                                            static_cast<double>(S) / 3.0,
                                            2.0 * static_cast<double>(S) / 3.0};
    const double margin = 0.05 * static_cast<double>(S);
    for (int64_t k = 0; k < n_objects; ++k) {
      SynthObject o;
      o.w = rng.uniform(0.12, 0.20) * static_cast<double>(S);
      o.h = rng.uniform(0.12, 0.20) * static_cast<double>(S);
      for (int attempt = 0; attempt < 64; ++attempt) {
        o.cx = rng.uniform(0.08, 0.92) * static_cast<double>(S);
        bool clear = true;
        for (double bx : boundaries) clear &= std::abs(o.cx - bx) > margin;
        if (clear) break;
      }
      o.cy = rng.uniform(0.25, 0.9) * static_cast<double>(S);
      o.vx = rng.uniform(-0.005, 0.005) * static_cast<double>(S);
      o.vy = rng.uniform(-0.005, 0.005) * static_cast<double>(S);
      // Small shared palette: a fresh random color per object would let a
      // desk-scale model memorize color -> label instead of the rule.
      static const cv::Scalar palette[8] = {
          {40, 40, 220},  {220, 60, 40},  {40, 160, 240}, {160, 40, 160},
          {60, 180, 180}, {30, 90, 140},  {200, 200, 60}, {90, 40, 70}};
      o.color = palette[rng.uniform_int(0, 7)];
      o.track_id = k;
      objs.push_back(o);
    }

    std::ofstream ann(sdir / "annotations.jsonl");
    std::ofstream ego(sdir / "ego.csv");
    ego << "frame,angular_velocity\n";
    for (int64_t t = 0; t < config.frames_per_scene; ++t) {
      cv::Mat frame = render_frame(S, geom, objs, t);
      cv::imwrite((sdir / "frames" / frame_name(t, ".png")).string(), frame);
      cv::Mat seg = render_seg(S, geom, objs, t);
      cv::imwrite((sdir / "seg" / frame_name(t, ".png")).string(), seg);
      std::ofstream lf(sdir / "lanes" / frame_name(t, ".json"));
      lf << lane_json(S, geom).dump() << "\n";
      ego << t << "," << ego_e << "\n";
      for (const auto& o : objs) {
        const auto b = o.box_at(t, S);
        json row = {{"frame", t},
                    {"track_id", o.track_id},
                    {"box", {b[0], b[1], b[2], b[3]}},
                    {"importance",
                     label_for(o, t, S, geom, config.rule, ego_e, config.beta)}};
        ann << row.dump() << "\n";
        ++total_objects;
      }
    }
    total_frames += config.frames_per_scene;
    manifest_scenes.push_back(
        {{"id", sid}, {"frames", config.frames_per_scene}, {"fps", 10.0}});
    if (c < n_train)
      train_ids.push_back(sid);
    else
      test_ids.push_back(sid);
  }

  json manifest = {
      {"format", "roadimp-dataset-v1"},
      {"rule", SyntheticConfig::rule_to_string(config.rule)},
      {"seed", config.seed},
      {"scenes", manifest_scenes},
      {"splits", {{"train", train_ids}, {"test", test_ids}}},
      {"totals", {{"frames", total_frames}, {"objects", total_objects}}}};
  std::ofstream mf(out_root / "manifest.json");
  mf << manifest.dump(2) << "\n";
  return out_root;
}

}  // namespace roadimp
