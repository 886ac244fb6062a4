#include "roadimp/disg.hpp"

#include <cmath>

namespace roadimp {

IntentionMasks build_masks(double a, double b, int64_t Wp, int64_t Hp) {
  if (!(b > a) || !(a > 0.0))
    throw std::invalid_argument("build_masks: require b > a > 0, got a=" +
                                std::to_string(a) + " b=" + std::to_string(b));
  RI_CHECK(Wp >= 1 && Hp >= 1, "build_masks: mask dims must be >= 1");
  auto make = [&](auto col_value, IntentionKind kind) {
    std::vector<double> v(static_cast<size_t>(Hp * Wp));
    for (int64_t i = 0; i < Hp; ++i)
      for (int64_t j = 0; j < Wp; ++j) v[i * Wp + j] = col_value(j);
    IntentionMask m;
    m.m = Tensor::from_vector({Hp, Wp}, std::move(v));
    m.kind = kind;
    m.a = a;
    m.b = b;
    return m;
  };
  // Left turn emphasizes the right half: ceil(W'/2) columns of b.
  const int64_t left_a_cols = Wp / 2;
  // Straight: centred band of width W' - 2*floor(W'/3).
  const int64_t side = Wp / 3;
  IntentionMasks masks;
  masks.left = make([&](int64_t j) { return j < left_a_cols ? a : b; },
                    IntentionKind::kLeft);
  masks.right = make([&](int64_t j) { return j < Wp - left_a_cols ? b : a; },
                     IntentionKind::kRight);
  masks.straight = make([&](int64_t j) { return (j >= side && j < Wp - side) ? b : a; },
                        IntentionKind::kStraight);
  return masks;
}

const IntentionMask& select_mask(double E, double beta, const IntentionMasks& masks) {
  if (!std::isfinite(E))
    throw std::invalid_argument("select_mask: non-finite ego velocity");
  if (!(beta > 0.0)) throw std::invalid_argument("select_mask: beta must be > 0");
  if (E > beta) return masks.left;
  if (E < -beta) return masks.right;
  return masks.straight;
}

Tensor fuse_intention_semantics(const SemanticFeature& f_s, const IntentionMask& m) {
  RI_CHECK(f_s.f_s.dim() == 4, "fuse_intention_semantics: expected [1,2C,H',W']");
  RI_CHECK(f_s.f_s.size(2) == m.m.size(0) && f_s.f_s.size(3) == m.m.size(1),
           "fuse_intention_semantics: mask " + shape_to_string(m.m.shape()) +
               " does not match feature " + shape_to_string(f_s.f_s.shape()));
  return mul(f_s.f_s, m.m);
}

Disg::Disg(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  masks_ = build_masks(cfg.a, cfg.b, cfg.roi_size, cfg.roi_size);
  backbone_ = nn::make_backbone(cfg.backbone, cfg.C, cfg.tiny_strides, rng,
                                cfg.backbone_bias);
  register_module("backbone", backbone_);
  // The backbone emits C channels but f_s needs 2C at W'xH'; reconcile with a
  // 1x1 projection and adaptive pooling.
  proj_ = std::make_shared<nn::Conv2d>(cfg.C, 2 * cfg.C, 1, 1, 0, rng,
                                       cfg.backbone_bias);
  register_module("proj", proj_);
  mhca_ = std::make_shared<nn::MultiheadAttention>(2 * cfg.C, cfg.heads, rng);
  register_module("mhca", mhca_);
}

SemanticFeature Disg::semantic_feature(const Tensor& G) {
  RI_CHECK(G.dim() == 3 && G.size(0) == 3, "semantic_feature: expected [3,H,W]");
  Tensor batched = reshape(G, {1, 3, G.size(1), G.size(2)});
  Tensor feat = backbone_->forward(batched);
  feat = proj_->forward(feat);
  feat = adaptive_avg_pool2d(feat, cfg_.roi_size, cfg_.roi_size);
  return {feat};
}

Tensor Disg::object_intention_semantics(const Tensor& f_os, const Tensor& f_is) {
  RI_CHECK(f_os.dim() == 4 && f_is.dim() == 4 && f_is.size(0) == 1,
           "object_intention_semantics: expected f_os [N,2C,H',W'], f_is [1,2C,H',W']");
  RI_CHECK(f_os.size(1) == f_is.size(1) && f_os.size(2) == f_is.size(2) &&
               f_os.size(3) == f_is.size(3),
           "object_intention_semantics: channel/spatial dims differ");
  const int64_t N = f_os.size(0), D = f_os.size(1);
  const int64_t Hp = f_os.size(2), Wp = f_os.size(3);
  Tensor query = permute(reshape(f_os, {N, D, Hp * Wp}), {0, 2, 1});  // [N,S,2C]
  Tensor kv = permute(reshape(f_is, {1, D, Hp * Wp}), {0, 2, 1});     // [1,S,2C]
  Tensor kv_n = N == 1 ? kv : reshape(repeat_leading(reshape(kv, {Hp * Wp, D}), N),
                                      {N, Hp * Wp, D});
  Tensor attended = mhca_->forward(query, kv_n, kv_n);
  Tensor out = reshape(permute(attended, {0, 2, 1}), {N, D, Hp, Wp});
  return add(out, f_os);
}

}  // namespace roadimp
