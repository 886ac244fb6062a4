#ifndef ROADIMP_TRG_HPP
#define ROADIMP_TRG_HPP

#include <memory>

#include "roadimp/config.hpp"
#include "roadimp/dataset.hpp"
#include "roadimp/nn.hpp"
#include "roadimp/tensor.hpp"

namespace roadimp {

struct LaneFeature {
  Tensor f_l;  // [N, C'], all rows identical (scene-level embedding broadcast)
};

struct LaneGate {
  Tensor f_ol_m;  // [N, C'] initial object-lane interaction feature
  Tensor p;       // [N] gate scores in (0,1)
  Tensor p_c;     // [N] penalty coefficients
  Tensor f_ol;    // [N, C'] gated feature
};

enum class GateMode { kHard, kSoft };

/// Penalizing coefficients from gate scores. Hard mode is the exact
/// evaluation rule (1 below 0.5, alpha at or above); soft mode is the
/// differentiable training surrogate 1 + (alpha-1)*sigmoid(k*(p-0.5)).
/// Throws std::invalid_argument when alpha is outside (0,1).
Tensor penalty_coefficient(const Tensor& p, double alpha, GateMode mode,
                           double soft_k = 50.0);

/// Row-wise scalar weighting of the interaction feature.
Tensor apply_gate(const Tensor& f_ol_m, const Tensor& p_c);

/// Traffic Rule Guidance: lane feature extraction and the adaptive
/// object-lane interaction with its weighting gate.
class Trg : public nn::Module {
 public:
  Trg(const ModelConfig& cfg, Rng& rng);

  /// Flattened 20x4 lane rows -> Linear + LayerNorm + ReLU, broadcast to N.
  LaneFeature lane_feature(const LaneInput& lanes, int64_t n_objects);

  /// Per-object single-token cross-attention (query = lane feature,
  /// key/value = temporal feature) plus residual.
  Tensor object_lane_interaction(const Tensor& f_l, const Tensor& f_ot);

  /// Per-object perceptron + sigmoid.
  Tensor gate_score(const Tensor& f_ol_m);

  /// Full adaptive interaction: interaction, score, penalty, weighting.
  LaneGate forward(const LaneInput& lanes, const Tensor& f_ot, GateMode mode);

  nn::MultiheadAttention& cross_attention() { return *mhca_; }

 private:
  ModelConfig cfg_;
  std::shared_ptr<nn::Linear> lane_proj_;
  std::shared_ptr<nn::LayerNorm> lane_norm_;
  std::shared_ptr<nn::MultiheadAttention> mhca_;
  std::shared_ptr<nn::Mlp> gate_mlp_;
};

}  // namespace roadimp

#endif  // ROADIMP_TRG_HPP
