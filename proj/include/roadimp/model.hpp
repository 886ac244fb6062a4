#ifndef ROADIMP_MODEL_HPP
#define ROADIMP_MODEL_HPP

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "roadimp/config.hpp"
#include "roadimp/dataset.hpp"
#include "roadimp/disg.hpp"
#include "roadimp/nn.hpp"
#include "roadimp/ofe.hpp"
#include "roadimp/trg.hpp"

namespace roadimp {

struct ImportanceScores {
  Tensor logits;          // [N, 2]
  Tensor probs;           // [N, 2] softmax rows
  std::vector<double> A;  // class-1 probability per object
};

/// Gate decisions of the last forward pass (empty when TRG is disabled).
struct GateDecisions {
  std::vector<double> p;
  std::vector<double> p_c;
};

/// Name/shape pairs of the intermediate tensors produced by the last forward.
using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

/// The full estimation network: bottom-up two-stream features fused with
/// intention-mask, scene-semantics and lane-rule guidance.
class ImportanceModel : public nn::Module {
 public:
  ImportanceModel(const ModelConfig& cfg, uint64_t param_seed);

  /// Composes the full dataflow on one clip. Gate mode follows the module's
  /// train/eval state (soft surrogate when training, hard rule otherwise).
  ImportanceScores forward(const ClipSample& sample);

  /// Head only: flatten + Linear + LayerNorm + ReLU on f_ois, add f_ol,
  /// perceptron to 2 classes, softmax.
  ImportanceScores estimate_importance(const Tensor& f_ois, const Tensor& f_ol);

  /// Binary cross-entropy plus focal loss on the class-1 probabilities,
  /// averaged over objects. Throws std::invalid_argument for empty labels.
  Tensor loss(const ImportanceScores& scores, const std::vector<int>& labels) const;

  const ModelConfig& config() const { return cfg_; }
  Ofe& ofe() { return *ofe_; }
  Disg& disg() { return *disg_; }
  Trg& trg() { return *trg_; }
  const GateDecisions& last_gate() const { return last_gate_; }
  const ShapeTrace& last_trace() const { return last_trace_; }

 private:
  ModelConfig cfg_;
  std::shared_ptr<Ofe> ofe_;
  std::shared_ptr<Disg> disg_;
  std::shared_ptr<Trg> trg_;
  std::shared_ptr<nn::Linear> head_proj_;
  std::shared_ptr<nn::LayerNorm> head_norm_;
  std::shared_ptr<nn::Mlp> head_mlp_;
  GateDecisions last_gate_;
  ShapeTrace last_trace_;

  Tensor normalize_image(const Tensor& img) const;
};

/// Focal loss constants (the loss equation names FocalLoss without
/// parameters; these are the established defaults).
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kFocalBalance = 0.25;
inline constexpr double kProbEps = 1e-7;

Tensor bce_loss(const Tensor& prob_class1, const std::vector<int>& labels);
Tensor focal_loss(const Tensor& prob_class1, const std::vector<int>& labels);

// ---- optimizer --------------------------------------------------------------

/// Momentum gradient descent with decoupled-from-nothing classic weight decay
/// (gradient += wd * param), matching the reference recipe.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<std::pair<std::string, Tensor>> params, double momentum,
               double weight_decay);
  void step(double lr);
  void zero_grad();
  std::vector<std::pair<std::string, Tensor>>& momentum_buffers() { return velocity_; }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> velocity_;
  double momentum_, weight_decay_;
};

// ---- checkpoint --------------------------------------------------------------

struct EpochStats {
  int64_t epoch = 0;
  double loss = 0.0;
  double ap = 0.0;
  double f1 = 0.0;
  double acc = 0.0;
  double lr = 0.0;
};

/// Versioned container of every named array plus the exact configuration;
/// reloading reproduces forward outputs bit-identically.
struct Checkpoint {
  static constexpr const char* kVersion = "roadimp-ckpt-v1";

  ModelConfig config;
  int64_t epochs_completed = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, Tensor>> buffers;
  std::vector<std::pair<std::string, Tensor>> momentum;
  std::vector<EpochStats> history;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  /// Builds a model and installs the stored arrays. Throws with the module
  /// path on any shape mismatch.
  std::shared_ptr<ImportanceModel> restore_model() const;
  void install_into(ImportanceModel& model) const;
};

// ---- training --------------------------------------------------------------

struct TrainOptions {
  std::optional<std::filesystem::path> log_csv;
  std::optional<Checkpoint> resume;
  // Stop after the epoch whose validation AP/F1 reach these thresholds.
  std::optional<double> stop_ap;
  std::optional<double> stop_f1;
  // Pause after this many epochs (the cosine schedule still spans
  // config.train.epochs); resume later to continue the identical run.
  std::optional<int64_t> stop_after_epochs;
  bool verbose = true;
};

/// Minimizes the composite loss with momentum SGD under a cosine schedule.
/// Deterministic given the seed; throws on divergence (non-finite loss).
Checkpoint train_model(const std::vector<ClipSample>& train_clips,
                       const std::vector<ClipSample>& val_clips,
                       const ModelConfig& cfg, const TrainOptions& opts = {});

/// Loads and caches every eligible clip of the split.
std::vector<ClipSample> load_clips(const std::filesystem::path& root, Split split,
                                   const ModelConfig& cfg);

}  // namespace roadimp

#endif  // ROADIMP_MODEL_HPP
