#ifndef ROADIMP_OFE_HPP
#define ROADIMP_OFE_HPP

#include <memory>

#include "roadimp/config.hpp"
#include "roadimp/nn.hpp"
#include "roadimp/tensor.hpp"

namespace roadimp {

/// Per-object appearance and motion streams after ROI pooling.
struct StreamFeatures {
  Tensor f_v;       // [N, T, C, W', H']
  Tensor f_m;       // [N, T, C, W', H']
  Tensor validity;  // [N, T]
};

struct ObjectSpatialFeature {
  Tensor f_os;  // [N, 2C, W', H']
};

struct ObjectTemporalFeature {
  Tensor f_ot;  // [N, C']
};

/// Bottom-up object feature extraction: two backbone streams, ROI pooling,
/// a spatial attention branch and a temporal recurrent branch.
class Ofe : public nn::Module {
 public:
  Ofe(const ModelConfig& cfg, Rng& rng);

  /// V, M: [T,3,H,W] (already normalized); boxes [N,T,4] in input-image
  /// coordinates with validity [N,T]. Invalid frames yield zero features.
  StreamFeatures extract_stream_features(const Tensor& V, const Tensor& M,
                                         const Tensor& boxes, const Tensor& validity);

  /// Valid-frame time average of both streams, channel concat, spatial
  /// self-attention over the W'*H' positions (no residual).
  ObjectSpatialFeature spatial_feature(const StreamFeatures& sf);

  /// Per-frame flatten, two-layer recurrence per stream, concat, temporal
  /// self-attention, final step, Linear + LayerNorm + ReLU.
  ObjectTemporalFeature temporal_feature(const StreamFeatures& sf);

  nn::Backbone& backbone_v() { return *backbone_v_; }
  nn::Backbone& backbone_m() { return *backbone_m_; }
  nn::MultiheadAttention& spatial_attention() { return *mhsa_spatial_; }
  nn::MultiheadAttention& temporal_attention() { return *mhsa_temporal_; }

  /// Number of zero-area boxes clamped to the 1-px minimum so far.
  int64_t degenerate_box_count() const { return degenerate_boxes_; }

 private:
  ModelConfig cfg_;
  std::shared_ptr<nn::Backbone> backbone_v_, backbone_m_;
  std::shared_ptr<nn::Lstm> lstm_v_, lstm_m_;
  std::shared_ptr<nn::MultiheadAttention> mhsa_spatial_, mhsa_temporal_;
  std::shared_ptr<nn::Linear> temporal_proj_;
  std::shared_ptr<nn::LayerNorm> temporal_norm_;
  int64_t degenerate_boxes_ = 0;
};

}  // namespace roadimp

#endif  // ROADIMP_OFE_HPP
