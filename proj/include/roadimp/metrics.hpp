#ifndef ROADIMP_METRICS_HPP
#define ROADIMP_METRICS_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace roadimp {

class ImportanceModel;
struct ClipSample;

/// Rank-based average precision: sort by descending score (stable ties),
/// mean of precision at each positive. Empty result when there is no
/// positive label (undefined; the caller decides).
std::optional<double> average_precision(const std::vector<double>& scores,
                                        const std::vector<int>& labels);

/// F1 at a fixed threshold (prediction = score >= threshold); 0 when
/// precision + recall is 0.
double f1_score(const std::vector<double>& scores, const std::vector<int>& labels,
                double threshold = 0.5);

double accuracy(const std::vector<double>& scores, const std::vector<int>& labels,
                double threshold = 0.5);

struct PerObjectResult {
  std::string clip_id;  // "<scene>:<t_end>"
  int64_t track_id = 0;
  double score = 0.0;
  int label = 0;
  double gate_p = 0.0;
  double gate_p_c = 1.0;
};

struct EvalReport {
  double ap = 0.0;
  double f1 = 0.0;
  double acc = 0.0;
  std::vector<std::pair<double, double>> pr_curve;  // (recall, precision)
  std::vector<PerObjectResult> per_object;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static EvalReport load(const std::filesystem::path& path);
  void save_pr_csv(const std::filesystem::path& path) const;
};

/// Runs the model on every eligible clip of the given samples, pools all
/// object scores in canonical (clip id, track id) order and computes the
/// metrics. Throws when the pool has no positive label.
EvalReport evaluate(ImportanceModel& model, const std::vector<ClipSample>& clips);

/// Renders the final frame with red boxes for predicted-important objects,
/// green otherwise, and an optional gate tint (blue = penalized interaction,
/// yellow = enabled). Writes a PNG.
void render_overlay(const ClipSample& clip, const std::vector<double>& scores,
                    const std::vector<double>& gate_p_c, double threshold,
                    const std::filesystem::path& out_png);

}  // namespace roadimp

#endif  // ROADIMP_METRICS_HPP
