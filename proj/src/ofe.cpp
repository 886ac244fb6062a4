#include "roadimp/ofe.hpp"

#include <cmath>
#include <iostream>

namespace roadimp {

Ofe::Ofe(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  backbone_v_ = nn::make_backbone(cfg.backbone, cfg.C, cfg.tiny_strides, rng,
                                  cfg.backbone_bias);
  backbone_m_ = nn::make_backbone(cfg.backbone, cfg.C, cfg.tiny_strides, rng,
                                  cfg.backbone_bias);
  register_module("backbone_v", backbone_v_);
  register_module("backbone_m", backbone_m_);
  const int64_t flat = cfg.C * cfg.roi_size * cfg.roi_size;
  lstm_v_ = std::make_shared<nn::Lstm>(flat, cfg.Cp, 2, rng);
  lstm_m_ = std::make_shared<nn::Lstm>(flat, cfg.Cp, 2, rng);
  register_module("lstm_v", lstm_v_);
  register_module("lstm_m", lstm_m_);
  mhsa_spatial_ = std::make_shared<nn::MultiheadAttention>(2 * cfg.C, cfg.heads, rng);
  mhsa_temporal_ = std::make_shared<nn::MultiheadAttention>(2 * cfg.Cp, cfg.heads, rng);
  register_module("mhsa_spatial", mhsa_spatial_);
  register_module("mhsa_temporal", mhsa_temporal_);
  temporal_proj_ = std::make_shared<nn::Linear>(2 * cfg.Cp, cfg.Cp, rng);
  temporal_norm_ = std::make_shared<nn::LayerNorm>(cfg.Cp);
  register_module("temporal_proj", temporal_proj_);
  register_module("temporal_norm", temporal_norm_);
}

StreamFeatures Ofe::extract_stream_features(const Tensor& V, const Tensor& M,
                                            const Tensor& boxes,
                                            const Tensor& validity) {
  RI_CHECK(V.dim() == 4 && M.dim() == 4, "extract_stream_features: expected [T,3,H,W]");
  RI_CHECK(V.shape() == M.shape(), "extract_stream_features: V/M shape mismatch");
  RI_CHECK(boxes.dim() == 3 && boxes.size(2) == 4,
           "extract_stream_features: boxes must be [N,T,4]");
  const int64_t T = V.size(0), N = boxes.size(0);
  RI_CHECK(boxes.size(1) == T && validity.size(0) == N && validity.size(1) == T,
           "extract_stream_features: boxes/validity do not match T frames");
  const int64_t Wp = cfg_.roi_size, Hp = cfg_.roi_size;
  const double stride = static_cast<double>(backbone_v_->stride());

  Tensor map_v = backbone_v_->forward(V);  // [T, C, h', w']
  Tensor map_m = backbone_m_->forward(M);
  const int64_t fh = map_v.size(2), fw = map_v.size(3);

  auto pool_stream = [&](const Tensor& maps) {
    std::vector<Tensor> frame_maps;
    frame_maps.reserve(T);
    for (int64_t t = 0; t < T; ++t) frame_maps.push_back(select(maps, 0, t));
    std::vector<Tensor> per_object;
    per_object.reserve(N);
    for (int64_t n = 0; n < N; ++n) {
      std::vector<Tensor> per_frame;
      per_frame.reserve(T);
      for (int64_t t = 0; t < T; ++t) {
        if (validity.data()[n * T + t] == 0.0) {
          per_frame.push_back(Tensor::zeros({cfg_.C, Hp, Wp}));
          continue;
        }
        const double* b = boxes.data() + (n * T + t) * 4;
        double x1 = b[0] / stride, y1 = b[1] / stride;
        double x2 = b[2] / stride, y2 = b[3] / stride;
        if (x2 - x1 <= 0.0 || y2 - y1 <= 0.0) {
          ++degenerate_boxes_;
          std::cerr << "[roadimp] warning: zero-area box after coordinate mapping "
                       "(object " << n << ", frame " << t << "), clamped to 1 px\n";
        }
        // Clamp to the 1-px minimum in feature coordinates, keeping the centre.
        if (x2 - x1 < 1.0) {
          const double cx = 0.5 * (x1 + x2);
          x1 = cx - 0.5;
          x2 = cx + 0.5;
        }
        if (y2 - y1 < 1.0) {
          const double cy = 0.5 * (y1 + y2);
          y1 = cy - 0.5;
          y2 = cy + 0.5;
        }
        x1 = std::max(0.0, std::min(x1, static_cast<double>(fw) - 1.0));
        y1 = std::max(0.0, std::min(y1, static_cast<double>(fh) - 1.0));
        x2 = std::max(x1 + 1e-6, std::min(x2, static_cast<double>(fw)));
        y2 = std::max(y1 + 1e-6, std::min(y2, static_cast<double>(fh)));
        per_frame.push_back(roi_align(frame_maps[t], x1, y1, x2, y2, Hp, Wp));
      }
      per_object.push_back(stack(per_frame, 0));  // [T,C,H',W']
    }
    return stack(per_object, 0);  // [N,T,C,H',W']
  };

  StreamFeatures sf;
  sf.f_v = pool_stream(map_v);
  sf.f_m = pool_stream(map_m);
  sf.validity = validity;
  return sf;
}

ObjectSpatialFeature Ofe::spatial_feature(const StreamFeatures& sf) {
  const int64_t N = sf.f_v.size(0), T = sf.f_v.size(1);
  const int64_t C = sf.f_v.size(2), Hp = sf.f_v.size(3), Wp = sf.f_v.size(4);
  // Invalid frames hold zero features; divide by the per-object valid count
  // rather than T so late-appearing objects are not diluted.
  std::vector<double> inv_counts(N);
  for (int64_t n = 0; n < N; ++n) {
    double cnt = 0;
    for (int64_t t = 0; t < T; ++t) cnt += sf.validity.data()[n * T + t];
    RI_CHECK(cnt > 0, "spatial_feature: object " + std::to_string(n) +
                          " has no valid frame");
    inv_counts[n] = 1.0 / cnt;
  }
  Tensor inv = Tensor::from_vector({N, 1, 1, 1}, std::move(inv_counts));
  Tensor avg_v = mul(sum(sf.f_v, 1, false), inv);  // [N,C,H',W']
  Tensor avg_m = mul(sum(sf.f_m, 1, false), inv);
  Tensor x = cat({avg_v, avg_m}, 1);  // [N,2C,H',W']
  // Tokens are the W'*H' spatial positions, embedding is the channel axis.
  Tensor tokens = permute(reshape(x, {N, 2 * C, Hp * Wp}), {0, 2, 1});
  Tensor attended = mhsa_spatial_->forward(tokens, tokens, tokens);
  Tensor out = reshape(permute(attended, {0, 2, 1}), {N, 2 * C, Hp, Wp});
  return {out};
}

ObjectTemporalFeature Ofe::temporal_feature(const StreamFeatures& sf) {
  const int64_t N = sf.f_v.size(0), T = sf.f_v.size(1);
  const int64_t flat = sf.f_v.size(2) * sf.f_v.size(3) * sf.f_v.size(4);
  Tensor seq_v = lstm_v_->forward(reshape(sf.f_v, {N, T, flat}));  // [N,T,C']
  Tensor seq_m = lstm_m_->forward(reshape(sf.f_m, {N, T, flat}));
  Tensor seq = cat({seq_v, seq_m}, 2);  // [N,T,2C']
  Tensor attended = mhsa_temporal_->forward(seq, seq, seq);
  Tensor last = select(attended, 1, T - 1);  // step T -> [N,2C']
  Tensor out = relu(temporal_norm_->forward(temporal_proj_->forward(last)));
  return {out};
}

}  // namespace roadimp
