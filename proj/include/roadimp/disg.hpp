#ifndef ROADIMP_DISG_HPP
#define ROADIMP_DISG_HPP

#include <memory>

#include "roadimp/config.hpp"
#include "roadimp/nn.hpp"
#include "roadimp/tensor.hpp"

namespace roadimp {

enum class IntentionKind { kLeft, kStraight, kRight };

/// Fixed-valued spatial mask emphasizing the image region matching the
/// driver's turning behaviour. Entries take exactly the two values {a, b}.
struct IntentionMask {
  Tensor m;  // [H', W']
  IntentionKind kind = IntentionKind::kStraight;
  double a = 1.0;
  double b = 1.5;
};

struct IntentionMasks {
  IntentionMask left, straight, right;
};

struct SemanticFeature {
  Tensor f_s;  // [1, 2C, W', H']
};

struct FusedGuidance {
  Tensor f_is;   // [1, 2C, W', H']
  Tensor f_ois;  // [N, 2C, W', H']
};

/// Builds the three turning-behaviour masks. The left-turn mask carries the
/// high value on the right half, the straight mask on a centred column band
/// (side width floor(W'/3)), the right-turn mask mirrors the left one.
/// Throws std::invalid_argument unless b > a > 0.
IntentionMasks build_masks(double a, double b, int64_t Wp, int64_t Hp);

/// Selects the mask by ego angular velocity: E > beta -> left turn,
/// E < -beta -> right turn, otherwise straight (strict inequalities).
/// Throws std::invalid_argument for non-finite E or beta <= 0.
const IntentionMask& select_mask(double E, double beta, const IntentionMasks& masks);

/// Elementwise mask application, broadcast over channels.
Tensor fuse_intention_semantics(const SemanticFeature& f_s, const IntentionMask& m);

/// Driver Intention and Semantics Guidance: scene-semantics encoding,
/// intention mask selection and object refinement by cross-attention.
class Disg : public nn::Module {
 public:
  Disg(const ModelConfig& cfg, Rng& rng);

  /// G: [3,H,W] color-coded semantic map of the final frame (normalized).
  SemanticFeature semantic_feature(const Tensor& G);

  /// Cross-attention with the object spatial feature as query and the fused
  /// intention-semantics feature as key/value, plus a residual connection.
  Tensor object_intention_semantics(const Tensor& f_os, const Tensor& f_is);

  const IntentionMasks& masks() const { return masks_; }
  nn::MultiheadAttention& cross_attention() { return *mhca_; }

 private:
  ModelConfig cfg_;
  IntentionMasks masks_;
  std::shared_ptr<nn::Backbone> backbone_;
  std::shared_ptr<nn::Conv2d> proj_;  // 1x1, C -> 2C
  std::shared_ptr<nn::MultiheadAttention> mhca_;
};

}  // namespace roadimp

#endif  // ROADIMP_DISG_HPP
