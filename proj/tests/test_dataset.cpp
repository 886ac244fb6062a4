#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "oracles.hpp"
#include "roadimp/dataset.hpp"

using namespace roadimp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("roadimp_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Minimal scene on disk: annotations + ego only (frames stay virtual).
void write_stub_scene(const fs::path& root, const std::string& id, int64_t frames,
                      int64_t objects_at_0 = 1) {
  fs::create_directories(root / id);
  std::ofstream ann(root / id / "annotations.jsonl");
  for (int64_t k = 0; k < objects_at_0; ++k) {
    json row = {{"frame", 0},
                {"track_id", k},
                {"box", {10.0 + k, 10.0, 30.0 + k, 40.0}},
                {"importance", k % 2}};
    ann << row.dump() << "\n";
  }
  std::ofstream ego(root / id / "ego.csv");
  ego << "frame,angular_velocity\n";
  for (int64_t f = 0; f < frames; ++f) ego << f << ",0.5\n";
}

void write_manifest(const fs::path& root, const std::vector<std::pair<std::string, int64_t>>& scenes,
                    const std::vector<std::string>& train,
                    const std::vector<std::string>& test, int64_t total_frames) {
  json m;
  m["scenes"] = json::array();
  for (auto& [id, frames] : scenes)
    m["scenes"].push_back({{"id", id}, {"frames", frames}, {"fps", 10.0}});
  m["splits"] = {{"train", train}, {"test", test}};
  m["totals"] = {{"frames", total_frames}, {"objects", 0}};
  std::ofstream f(root / "manifest.json");
  f << m.dump(2);
}

}  // namespace

TEST_CASE("load_dataset: 28-scene manifest totalling 9858 frames") {
  fs::path root = fresh_dir("manifest28");
  std::vector<std::pair<std::string, int64_t>> scenes;
  std::vector<std::string> train, test;
  // 27 scenes of 350 frames + 1 of 408 = 9858.
  int64_t total = 0;
  for (int64_t i = 0; i < 28; ++i) {
    const std::string id = "scene" + std::to_string(i);
    const int64_t frames = i < 27 ? 350 : 408;
    scenes.emplace_back(id, frames);
    total += frames;
    (i < 22 ? train : test).push_back(id);
    write_stub_scene(root, id, frames);
  }
  REQUIRE(total == 9858);
  write_manifest(root, scenes, train, test, total);

  auto train_scenes = load_dataset(root, Split::kTrain);
  auto test_scenes = load_dataset(root, Split::kTest);
  CHECK(train_scenes.size() + test_scenes.size() == 28);
  int64_t frame_total = 0;
  for (const auto& s : train_scenes) frame_total += s.frame_count;
  for (const auto& s : test_scenes) frame_total += s.frame_count;
  CHECK(frame_total == 9858);
}

TEST_CASE("load_dataset: empty directory is a fatal format error") {
  fs::path root = fresh_dir("empty");
  CHECK_THROWS_WITH_AS(load_dataset(root, Split::kTrain),
                       doctest::Contains("missing manifest"), std::runtime_error);
}

TEST_CASE("load_dataset: malformed annotation names scene and line") {
  fs::path root = fresh_dir("badann");
  write_stub_scene(root, "s0", 4);
  {
    std::ofstream ann(root / "s0" / "annotations.jsonl", std::ios::app);
    ann << "{\"frame\": 1, \"track_id\": 9}\n";  // missing box/importance
  }
  write_manifest(root, {{"s0", 4}}, {"s0"}, {}, 4);
  try {
    load_dataset(root, Split::kTrain);
    FAIL("expected error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("s0") != std::string::npos);
    CHECK(msg.find("line") != std::string::npos);
  }
}

TEST_CASE("load_dataset: frame-count mismatch with totals is rejected") {
  fs::path root = fresh_dir("badtotal");
  write_stub_scene(root, "s0", 4);
  write_manifest(root, {{"s0", 4}}, {"s0"}, {}, 5);
  CHECK_THROWS_AS(load_dataset(root, Split::kTrain), std::runtime_error);
}

TEST_CASE("synthetic round-trip: written annotations reload exactly") {
  fs::path root = fresh_dir("roundtrip");
  SyntheticConfig cfg;
  cfg.n_clips = 3;
  cfg.n_objects_range = {2, 4};
  cfg.frames_per_scene = 4;
  cfg.image_size = 48;
  cfg.seed = 11;
  generate_synthetic(cfg, root);

  auto train = load_dataset(root, Split::kTrain);
  auto test = load_dataset(root, Split::kTest);
  CHECK(train.size() + test.size() == 3);
  // Re-serialize every annotation row and compare to the files byte for byte.
  for (const auto& scenes : {train, test})
    for (const auto& scene : scenes) {
      std::ostringstream rebuilt;
      for (const auto& [frame, anns] : scene.annotations)
        for (const auto& a : anns) {
          json row = {{"frame", frame},
                      {"track_id", a.track_id},
                      {"box", {a.box[0], a.box[1], a.box[2], a.box[3]}},
                      {"importance", a.importance}};
          rebuilt << row.dump() << "\n";
        }
      std::ifstream in(scene.dir / "annotations.jsonl");
      std::stringstream original;
      original << in.rdbuf();
      CHECK(rebuilt.str() == original.str());
    }
}

TEST_CASE("synthetic generation is deterministic per seed") {
  fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  SyntheticConfig cfg;
  cfg.n_clips = 2;
  cfg.frames_per_scene = 3;
  cfg.image_size = 32;
  cfg.seed = 7;
  generate_synthetic(cfg, a);
  generate_synthetic(cfg, b);
  for (auto it = fs::recursive_directory_iterator(a);
       it != fs::recursive_directory_iterator(); ++it) {
    if (!it->is_regular_file()) continue;
    const fs::path rel = fs::relative(it->path(), a);
    std::ifstream fa(it->path(), std::ios::binary), fb(b / rel, std::ios::binary);
    REQUIRE(fb.good());
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    CHECK(sa.str() == sb.str());
  }
}

TEST_CASE("synthetic manifest counts match the config") {
  fs::path root = fresh_dir("counts");
  SyntheticConfig cfg;
  cfg.n_clips = 32;
  cfg.n_objects_range = {4, 8};
  cfg.frames_per_scene = 2;
  cfg.image_size = 24;
  cfg.seed = 3;
  generate_synthetic(cfg, root);
  std::ifstream in(root / "manifest.json");
  json m = json::parse(in);
  CHECK(m.at("scenes").size() == 32);
  CHECK(m.at("totals").at("frames").get<int64_t>() == 64);
  const int64_t objects = m.at("totals").at("objects").get<int64_t>();
  CHECK(objects >= 32 * 2 * 4);
  CHECK(objects <= 32 * 2 * 8);
}

TEST_CASE("intention_path_collision rule labels the corridor") {
  // An object dead-centre of a straight-driving clip must be important.
  fs::path root = fresh_dir("rulecheck");
  SyntheticConfig cfg;
  cfg.n_clips = 6;
  cfg.frames_per_scene = 3;
  cfg.image_size = 60;
  cfg.seed = 5;
  cfg.rule = SyntheticConfig::Rule::kIntentionPathCollision;
  generate_synthetic(cfg, root);
  int checked = 0;
  for (Split split : {Split::kTrain, Split::kTest})
    for (const auto& scene : load_dataset(root, split)) {
      const double e = scene.ego_angular_velocity[0];
      for (const auto& [frame, anns] : scene.annotations)
        for (const auto& a : anns) {
          const double cx = 0.5 * (a.box[0] + a.box[2]);
          double lo, hi;
          if (e > cfg.beta) {
            lo = 0;
            hi = 20;
          } else if (e < -cfg.beta) {
            lo = 40;
            hi = 60;
          } else {
            lo = 20;
            hi = 40;
          }
          const int expect = (cx >= lo && cx < hi) ? 1 : 0;
          CHECK(a.importance == expect);
          ++checked;
        }
    }
  CHECK(checked > 0);
}

TEST_CASE("sample_clip window, validity, and range error") {
  fs::path root = fresh_dir("clip");
  SyntheticConfig scfg;
  scfg.n_clips = 1;
  scfg.frames_per_scene = 16;
  scfg.image_size = 48;
  scfg.n_objects_range = {3, 3};
  scfg.seed = 2;
  generate_synthetic(scfg, root);
  auto scenes = load_dataset(root, Split::kTrain);
  REQUIRE(scenes.size() == 1);

  ModelConfig cfg = ModelConfig::micro();  // T = 4
  cfg.image_size = 48;

  ClipSample clip = sample_clip(scenes[0], 15, cfg);
  CHECK(clip.frames.shape() == Shape{4, 3, 48, 48});
  CHECK(clip.flow.shape() == Shape{4, 3, 48, 48});
  CHECK(clip.seg_map.shape() == Shape{3, 48, 48});
  CHECK(clip.num_objects() == 3);
  CHECK(clip.boxes.shape() == Shape{3, 4, 4});
  CHECK(clip.lanes.points.shape() == Shape{20, 4});
  CHECK(clip.t_end == 15);
  for (int64_t n = 0; n < 3; ++n)
    for (int64_t t = 0; t < 4; ++t) CHECK(clip.validity.at({n, t}) == 1.0);
  // first valid window
  ClipSample first = sample_clip(scenes[0], 3, cfg);
  CHECK(first.t_end == 3);
  CHECK_THROWS_AS(sample_clip(scenes[0], 2, cfg), std::out_of_range);
}

TEST_CASE("sample_clip: object appearing only at t_end has invalid earlier boxes") {
  fs::path root = fresh_dir("lateobj");
  fs::create_directories(root / "s0" / "frames");
  fs::create_directories(root / "s0" / "seg");
  fs::create_directories(root / "s0" / "lanes");
  // 4 uniform frames + seg
  for (int64_t t = 0; t < 4; ++t) {
    cv::Mat img(32, 32, CV_8UC3, cv::Scalar(90, 90, 90));
    char name[16];
    std::snprintf(name, sizeof(name), "%06lld.png", static_cast<long long>(t));
    cv::imwrite((root / "s0" / "frames" / name).string(), img);
    cv::imwrite((root / "s0" / "seg" / name).string(), img);
  }
  std::ofstream ann(root / "s0" / "annotations.jsonl");
  // track 0 on every frame, track 1 only at the final frame
  for (int64_t t = 0; t < 4; ++t)
    ann << json({{"frame", t},
                 {"track_id", 0},
                 {"box", {2.0, 2.0, 10.0, 10.0}},
                 {"importance", 1}})
               .dump()
        << "\n";
  ann << json({{"frame", 3},
               {"track_id", 1},
               {"box", {12.0, 12.0, 20.0, 20.0}},
               {"importance", 0}})
             .dump()
      << "\n";
  ann.close();
  std::ofstream ego(root / "s0" / "ego.csv");
  ego << "frame,angular_velocity\n";
  for (int64_t t = 0; t < 4; ++t) ego << t << ",0\n";
  ego.close();
  write_manifest(root, {{"s0", 4}}, {"s0"}, {}, 4);

  ModelConfig cfg = ModelConfig::micro();
  cfg.image_size = 32;
  auto scenes = load_dataset(root, Split::kTrain);
  ClipSample clip = sample_clip(scenes[0], 3, cfg);
  REQUIRE(clip.num_objects() == 2);
  CHECK(clip.validity.at({1, 0}) == 0.0);
  CHECK(clip.validity.at({1, 1}) == 0.0);
  CHECK(clip.validity.at({1, 2}) == 0.0);
  CHECK(clip.validity.at({1, 3}) == 1.0);
  // absent-track frames carry the zero box
  CHECK(clip.boxes.at({1, 0, 2}) == 0.0);
}

TEST_CASE("compute_flow: static clip renders zero magnitude") {
  Rng rng(40);
  // textured but identical frames
  Tensor one = Tensor::rand_uniform({1, 3, 32, 32}, rng, 0.0, 1.0);
  Tensor frames = cat({one, one, one}, 0);
  Tensor flow = compute_flow(frames, 8.0);
  CHECK(flow.shape() == Shape{3, 3, 32, 32});
  for (int64_t i = 0; i < flow.numel(); ++i) CHECK(flow.data()[i] == 0.0);
}

TEST_CASE("compute_flow: single frame is an error") {
  Tensor frames = Tensor::zeros({1, 3, 16, 16});
  CHECK_THROWS_AS(compute_flow(frames, 8.0), std::invalid_argument);
}

TEST_CASE("compute_flow: 1-px horizontal shift recovers magnitude ~1") {
  // smooth random texture, shifted right by one pixel
  Rng rng(41);
  const int64_t S = 64;
  std::vector<double> base((S + 1) * S);
  for (auto& v : base) v = rng.uniform(0.0, 1.0);
  // blur columns a little so Farneback's polynomial expansion can latch on
  auto smooth = [&](int64_t i, int64_t j) {
    double acc = 0;
    int cnt = 0;
    for (int64_t di = -2; di <= 2; ++di)
      for (int64_t dj = -2; dj <= 2; ++dj) {
        const int64_t ii = i + di, jj = j + dj;
        if (ii < 0 || ii >= S || jj < 0 || jj >= S + 1) continue;
        acc += base[ii * (S + 1) + jj];
        ++cnt;
      }
    return acc / cnt;
  };
  std::vector<double> f0(3 * S * S), f1(3 * S * S);
  for (int64_t i = 0; i < S; ++i)
    for (int64_t j = 0; j < S; ++j) {
      const double a = smooth(i, j + 1);  // frame 0 samples shifted-right texture
      const double b = smooth(i, j);      // frame 1 = frame 0 moved right by 1 px
      for (int64_t c = 0; c < 3; ++c) {
        f0[c * S * S + i * S + j] = a;
        f1[c * S * S + i * S + j] = b;
      }
    }
  std::vector<double> both;
  both.insert(both.end(), f0.begin(), f0.end());
  both.insert(both.end(), f1.begin(), f1.end());
  const double mag_scale = 8.0;
  Tensor flow = compute_flow(Tensor::from_vector({2, 3, S, S}, both), mag_scale);
  // value channel (max of rgb under s=1 rendering) * mag_scale ~ 1 px in the
  // centre; Farneback tolerance is generous
  double err_sum = 0;
  int64_t count = 0;
  const double* p = flow.data() + 1 * 3 * S * S;
  for (int64_t i = 16; i < S - 16; ++i)
    for (int64_t j = 16; j < S - 16; ++j) {
      const double r = p[0 * S * S + i * S + j];
      const double g = p[1 * S * S + i * S + j];
      const double bch = p[2 * S * S + i * S + j];
      const double mag = std::max({r, g, bch}) * mag_scale;
      err_sum += std::abs(mag - 1.0);
      ++count;
    }
  CHECK(err_sum / count < 0.45);
}

TEST_CASE("encode_lanes: empty, vertical fit, truncation, order invariance") {
  LaneInput none = encode_lanes({});
  CHECK(none.count == 0);
  for (int64_t i = 0; i < none.points.numel(); ++i) CHECK(none.points.data()[i] == 0.0);

  // one vertical lane at x=160
  std::vector<std::array<double, 2>> vertical;
  for (int64_t y = 20; y <= 300; y += 20) vertical.push_back({160.0, double(y)});
  LaneInput v = encode_lanes({vertical});
  CHECK(v.count == 1);
  CHECK(v.points.at({0, 0}) == doctest::Approx(160.0));
  CHECK(v.points.at({0, 1}) == doctest::Approx(20.0));
  CHECK(v.points.at({0, 2}) == doctest::Approx(160.0));
  CHECK(v.points.at({0, 3}) == doctest::Approx(300.0));

  // 25 lanes: the 20 longest survive
  std::vector<std::vector<std::array<double, 2>>> many;
  for (int64_t k = 0; k < 25; ++k) {
    const double len = 10.0 + k * 5.0;
    many.push_back({{double(k), 0.0}, {double(k), len}});
  }
  LaneInput kept = encode_lanes(many);
  CHECK(kept.count == 20);
  // the shortest five (x = 0..4) are gone
  for (int64_t i = 0; i < 20; ++i) CHECK(kept.points.at({i, 0}) >= 5.0);

  // permutation insensitivity after the length sort
  auto shuffled = many;
  std::reverse(shuffled.begin(), shuffled.end());
  LaneInput again = encode_lanes(shuffled);
  for (int64_t i = 0; i < kept.points.numel(); ++i)
    CHECK(kept.points.data()[i] == again.points.data()[i]);
}

TEST_CASE("eval_frame_indices honors the stride over raw indices") {
  SceneRecord scene;
  scene.frame_count = 100;
  for (int64_t f = 0; f < 100; f += 10)
    scene.annotations[f].push_back({0, {1, 1, 2, 2}, 0});
  auto idx = eval_frame_indices(scene, 16, 10);
  REQUIRE(!idx.empty());
  CHECK(idx.front() >= 15);
  for (size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] - idx[i - 1] >= 10);
}
