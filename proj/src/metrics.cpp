#include "roadimp/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "roadimp/model.hpp"

namespace roadimp {

using nlohmann::json;

std::optional<double> average_precision(const std::vector<double>& scores,
                                        const std::vector<int>& labels) {
  RI_CHECK(scores.size() == labels.size(), "average_precision: length mismatch");
  const size_t n = scores.size();
  size_t positives = 0;
  for (int l : labels) positives += l ? 1 : 0;
  if (positives == 0) return std::nullopt;

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  // Descending score; equal scores keep their original order.
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  size_t tp = 0;
  for (size_t rank = 0; rank < n; ++rank) {
    if (labels[order[rank]]) {
      ++tp;
      ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(positives);
}

double f1_score(const std::vector<double>& scores, const std::vector<int>& labels,
                double threshold) {
  RI_CHECK(scores.size() == labels.size(), "f1_score: length mismatch");
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i])
      ++tp;
    else if (pred && !labels[i])
      ++fp;
    else if (!pred && labels[i])
      ++fn;
  }
  if (tp == 0) return 0.0;  // covers P + R == 0 as well
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

double accuracy(const std::vector<double>& scores, const std::vector<int>& labels,
                double threshold) {
  RI_CHECK(scores.size() == labels.size(), "accuracy: length mismatch");
  if (scores.empty()) return 0.0;
  int64_t correct = 0;
  for (size_t i = 0; i < scores.size(); ++i)
    if ((scores[i] >= threshold ? 1 : 0) == (labels[i] ? 1 : 0)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

// ---- report -------------------------------------------------------------------

std::string EvalReport::to_json() const {
  json j;
  j["ap"] = ap;
  j["f1"] = f1;
  j["acc"] = acc;
  json curve = json::array();
  for (const auto& [r, p] : pr_curve) curve.push_back({r, p});
  j["pr_curve"] = curve;
  json objs = json::array();
  for (const auto& o : per_object)
    objs.push_back({{"clip", o.clip_id},
                    {"track_id", o.track_id},
                    {"score", o.score},
                    {"label", o.label},
                    {"p", o.gate_p},
                    {"p_c", o.gate_p_c}});
  j["per_object"] = objs;
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  json j = json::parse(text);
  EvalReport r;
  r.ap = j.at("ap").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.acc = j.at("acc").get<double>();
  for (const auto& pt : j.at("pr_curve"))
    r.pr_curve.emplace_back(pt.at(0).get<double>(), pt.at(1).get<double>());
  for (const auto& o : j.at("per_object")) {
    PerObjectResult po;
    po.clip_id = o.at("clip").get<std::string>();
    po.track_id = o.at("track_id").get<int64_t>();
    po.score = o.at("score").get<double>();
    po.label = o.at("label").get<int>();
    po.gate_p = o.at("p").get<double>();
    po.gate_p_c = o.at("p_c").get<double>();
    r.per_object.push_back(po);
  }
  return r;
}

void EvalReport::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  RI_CHECK(out.good(), "cannot write report: " + path.string());
  out << to_json() << "\n";
}

EvalReport EvalReport::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  RI_CHECK(in.good(), "cannot open report: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return from_json(text);
}

void EvalReport::save_pr_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  RI_CHECK(out.good(), "cannot write PR curve: " + path.string());
  out << "recall,precision\n";
  for (const auto& [r, p] : pr_curve) out << r << "," << p << "\n";
}

// ---- evaluation -------------------------------------------------------------------

EvalReport evaluate(ImportanceModel& model, const std::vector<ClipSample>& clips) {
  RI_CHECK(!clips.empty(), "evaluate: empty split");
  NoGradGuard no_grad;
  const bool was_training = model.training();
  model.set_train(false);

  EvalReport report;
  for (const auto& clip : clips) {
    ImportanceScores scores = model.forward(clip);
    const GateDecisions& gate = model.last_gate();
    for (int64_t i = 0; i < clip.num_objects(); ++i) {
      PerObjectResult o;
      o.clip_id = clip.scene_id + ":" + std::to_string(clip.t_end);
      o.track_id = clip.track_ids[i];
      o.score = scores.A[i];
      o.label = clip.labels[i];
      if (!gate.p.empty()) {
        o.gate_p = gate.p[i];
        o.gate_p_c = gate.p_c[i];
      }
      report.per_object.push_back(o);
    }
  }
  model.set_train(was_training);

  // Canonical pooling order so shuffled clip lists yield identical reports.
  std::sort(report.per_object.begin(), report.per_object.end(),
            [](const PerObjectResult& a, const PerObjectResult& b) {
              if (a.clip_id != b.clip_id) return a.clip_id < b.clip_id;
              return a.track_id < b.track_id;
            });

  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& o : report.per_object) {
    scores.push_back(o.score);
    labels.push_back(o.label);
  }
  auto ap = average_precision(scores, labels);
  RI_CHECK(ap.has_value(), "evaluate: no positive labels in the pooled split");
  report.ap = *ap;
  report.f1 = f1_score(scores, labels);
  report.acc = accuracy(scores, labels);

  // PR points at each positive of the ranked pool; recall is non-decreasing.
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  size_t positives = 0;
  for (int l : labels) positives += l ? 1 : 0;
  size_t tp = 0;
  for (size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]]) {
      ++tp;
      report.pr_curve.emplace_back(
          static_cast<double>(tp) / static_cast<double>(positives),
          static_cast<double>(tp) / static_cast<double>(rank + 1));
    }
  }
  return report;
}

// ---- overlay -------------------------------------------------------------------

void render_overlay(const ClipSample& clip, const std::vector<double>& scores,
                    const std::vector<double>& gate_p_c, double threshold,
                    const std::filesystem::path& out_png) {
  const int64_t T = clip.frames.size(0);
  const int64_t h = clip.frames.size(2), w = clip.frames.size(3);
  RI_CHECK(static_cast<int64_t>(scores.size()) == clip.num_objects(),
           "render_overlay: score count mismatch");
  const double* plane = clip.frames.data() + (T - 1) * 3 * h * w;
  cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      auto to8 = [&](int c) {
        const double v = plane[c * h * w + i * w + j];
        return static_cast<uint8_t>(std::min(255.0, std::max(0.0, v * 255.0 + 0.5)));
      };
      img.at<cv::Vec3b>(static_cast<int>(i), static_cast<int>(j)) =
          cv::Vec3b(to8(2), to8(1), to8(0));  // BGR
    }

  const cv::Scalar red(0, 0, 255), green(0, 128, 0);
  const cv::Scalar blue(255, 80, 0), yellow(0, 170, 220);
  for (int64_t n = 0; n < clip.num_objects(); ++n) {
    const double* b = clip.boxes.data() + (n * T + (T - 1)) * 4;
    const cv::Rect rect(cv::Point(static_cast<int>(b[0]), static_cast<int>(b[1])),
                        cv::Point(static_cast<int>(b[2]), static_cast<int>(b[3])));
    if (n < static_cast<int64_t>(gate_p_c.size())) {
      // Gate tint: blue when the interaction was penalized (p_c = alpha).
      const bool penalized = gate_p_c[n] < 0.5;
      cv::Mat roi = img(rect & cv::Rect(0, 0, img.cols, img.rows));
      cv::Mat tint(roi.size(), roi.type(),
                   penalized ? blue : yellow);
      cv::addWeighted(roi, 0.65, tint, 0.35, 0.0, roi);
    }
    cv::rectangle(img, rect, scores[n] >= threshold ? red : green, 2);
  }
  cv::imwrite(out_png.string(), img);
}

}  // namespace roadimp
