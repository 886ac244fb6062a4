#include <doctest.h>

#include "oracles.hpp"
#include "roadimp/ofe.hpp"

using namespace roadimp;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg = ModelConfig::micro();  // T=4, C=64, Cp=32, roi 4
  cfg.image_size = 32;
  return cfg;
}

// Boxes [N,T,4] all valid, random but well-formed.
std::pair<Tensor, Tensor> random_boxes(int64_t N, int64_t T, int64_t S, Rng& rng) {
  Tensor boxes = Tensor::zeros({N, T, 4});
  Tensor validity = Tensor::ones({N, T});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t t = 0; t < T; ++t) {
      const double x1 = rng.uniform(0.0, S * 0.5), y1 = rng.uniform(0.0, S * 0.5);
      double* b = boxes.data() + (n * T + t) * 4;
      b[0] = x1;
      b[1] = y1;
      b[2] = x1 + rng.uniform(4.0, S * 0.4);
      b[3] = y1 + rng.uniform(4.0, S * 0.4);
    }
  return {boxes, validity};
}

}  // namespace

TEST_CASE("extract_stream_features: shapes follow the contract") {
  ModelConfig cfg = tiny_cfg();
  Rng rng(50);
  Ofe ofe(cfg, rng);
  Rng drng(51);
  const int64_t N = 5, T = cfg.T, S = cfg.image_size;
  Tensor V = Tensor::randn({T, 3, S, S}, drng);
  Tensor M = Tensor::randn({T, 3, S, S}, drng);
  auto [boxes, validity] = random_boxes(N, T, S, drng);
  NoGradGuard ng;
  StreamFeatures sf = ofe.extract_stream_features(V, M, boxes, validity);
  CHECK(sf.f_v.shape() == Shape{N, T, cfg.C, cfg.roi_size, cfg.roi_size});
  CHECK(sf.f_m.shape() == Shape{N, T, cfg.C, cfg.roi_size, cfg.roi_size});
}

TEST_CASE("zero image with bias-free backbone gives all-zero features") {
  ModelConfig cfg = tiny_cfg();
  cfg.backbone_bias = false;
  Rng rng(52);
  Ofe ofe(cfg, rng);
  const int64_t N = 2, T = cfg.T, S = cfg.image_size;
  Tensor V = Tensor::zeros({T, 3, S, S});
  Tensor M = Tensor::zeros({T, 3, S, S});
  Rng drng(53);
  auto [boxes, validity] = random_boxes(N, T, S, drng);
  NoGradGuard ng;
  StreamFeatures sf = ofe.extract_stream_features(V, M, boxes, validity);
  for (int64_t i = 0; i < sf.f_v.numel(); ++i) CHECK(sf.f_v.data()[i] == 0.0);
  for (int64_t i = 0; i < sf.f_m.numel(); ++i) CHECK(sf.f_m.data()[i] == 0.0);
}

TEST_CASE("invalid frames produce zero features and do not dilute the average") {
  ModelConfig cfg = tiny_cfg();
  Rng rng(54);
  Ofe ofe(cfg, rng);
  const int64_t T = cfg.T, S = cfg.image_size;
  Rng drng(55);
  Tensor V = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  Tensor M = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  // one object valid only at the final frame
  Tensor boxes = Tensor::zeros({1, T, 4});
  Tensor validity = Tensor::zeros({1, T});
  double* b = boxes.data() + (T - 1) * 4;
  b[0] = 4;
  b[1] = 4;
  b[2] = 20;
  b[3] = 20;
  validity.data()[T - 1] = 1.0;
  NoGradGuard ng;
  StreamFeatures sf = ofe.extract_stream_features(V, M, boxes, validity);
  for (int64_t t = 0; t + 1 < T; ++t)
    for (int64_t i = 0; i < cfg.C * 16; ++i)
      CHECK(sf.f_v.data()[t * cfg.C * 16 + i] == 0.0);

  // average over valid frames equals the single valid frame exactly
  ofe.spatial_attention().set_hook(nn::MultiheadAttention::Hook::kIdentity);
  ObjectSpatialFeature f_os = ofe.spatial_feature(sf);
  const int64_t plane = cfg.C * 16;
  for (int64_t i = 0; i < plane; ++i)
    CHECK(f_os.f_os.data()[i] ==
          doctest::Approx(sf.f_v.data()[(T - 1) * plane + i]).epsilon(1e-12));
}

TEST_CASE("spatial_feature: identity hook returns concat of time averages") {
  ModelConfig cfg = tiny_cfg();
  Rng rng(56);
  Ofe ofe(cfg, rng);
  const int64_t N = 3, T = cfg.T, S = cfg.image_size;
  Rng drng(57);
  Tensor V = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  Tensor M = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  auto [boxes, validity] = random_boxes(N, T, S, drng);
  NoGradGuard ng;
  StreamFeatures sf = ofe.extract_stream_features(V, M, boxes, validity);
  ofe.spatial_attention().set_hook(nn::MultiheadAttention::Hook::kIdentity);
  ObjectSpatialFeature out = ofe.spatial_feature(sf);
  CHECK(out.f_os.shape() == Shape{N, 2 * cfg.C, cfg.roi_size, cfg.roi_size});
  // manual concat + mean oracle
  const int64_t plane = cfg.C * cfg.roi_size * cfg.roi_size;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < plane; ++i) {
      double acc_v = 0, acc_m = 0;
      for (int64_t t = 0; t < T; ++t) {
        acc_v += sf.f_v.data()[(n * T + t) * plane + i];
        acc_m += sf.f_m.data()[(n * T + t) * plane + i];
      }
      CHECK(out.f_os.data()[n * 2 * plane + i] ==
            doctest::Approx(acc_v / T).epsilon(1e-12));
      CHECK(out.f_os.data()[n * 2 * plane + plane + i] ==
            doctest::Approx(acc_m / T).epsilon(1e-12));
    }
}

TEST_CASE("spatial_feature: constant-in-time streams equal any single frame") {
  ModelConfig cfg = tiny_cfg();
  Rng rng(58);
  Ofe ofe(cfg, rng);
  const int64_t T = cfg.T, S = cfg.image_size;
  Rng drng(59);
  Tensor frame = Tensor::rand_uniform({1, 3, S, S}, drng, 0.0, 1.0);
  Tensor V = repeat_leading(reshape(frame, {3, S, S}), T);
  auto [boxes0, validity] = random_boxes(1, T, S, drng);
  // same box every frame so features are constant in time
  for (int64_t t = 0; t < T; ++t)
    for (int64_t k = 0; k < 4; ++k)
      boxes0.data()[t * 4 + k] = boxes0.data()[k];
  NoGradGuard ng;
  StreamFeatures sf = ofe.extract_stream_features(V, V, boxes0, validity);
  ofe.spatial_attention().set_hook(nn::MultiheadAttention::Hook::kIdentity);
  ObjectSpatialFeature out = ofe.spatial_feature(sf);
  const int64_t plane = cfg.C * cfg.roi_size * cfg.roi_size;
  for (int64_t i = 0; i < plane; ++i)
    CHECK(out.f_os.data()[i] == doctest::Approx(sf.f_v.data()[i]).epsilon(1e-9));
}

TEST_CASE("temporal_feature: shape and final-step sensitivity") {
  ModelConfig cfg = tiny_cfg();
  Rng rng(60);
  Ofe ofe(cfg, rng);
  const int64_t N = 3, T = cfg.T, S = cfg.image_size;
  Rng drng(61);
  Tensor V = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  Tensor M = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  auto [boxes, validity] = random_boxes(N, T, S, drng);
  NoGradGuard ng;
  StreamFeatures sf = ofe.extract_stream_features(V, M, boxes, validity);
  ObjectTemporalFeature f_ot = ofe.temporal_feature(sf);
  CHECK(f_ot.f_ot.shape() == Shape{N, cfg.Cp});

  // clips differing only at the final frame produce different outputs
  Tensor V2 = V.clone();
  for (int64_t i = 0; i < 3 * S * S; ++i)
    V2.data()[(T - 1) * 3 * S * S + i] += 0.25;
  StreamFeatures sf2 = ofe.extract_stream_features(V2, M, boxes, validity);
  ObjectTemporalFeature f_ot2 = ofe.temporal_feature(sf2);
  double diff = 0;
  for (int64_t i = 0; i < f_ot.f_ot.numel(); ++i)
    diff += std::abs(f_ot.f_ot.data()[i] - f_ot2.f_ot.data()[i]);
  CHECK(diff > 1e-9);
}

TEST_CASE("object-order equivariance of both OFE branches") {
  ModelConfig cfg = tiny_cfg();
  Rng rng(62);
  Ofe ofe(cfg, rng);
  const int64_t N = 4, T = cfg.T, S = cfg.image_size;
  Rng drng(63);
  Tensor V = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  Tensor M = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  auto [boxes, validity] = random_boxes(N, T, S, drng);
  NoGradGuard ng;
  StreamFeatures sf = ofe.extract_stream_features(V, M, boxes, validity);
  Tensor f_os = ofe.spatial_feature(sf).f_os;
  Tensor f_ot = ofe.temporal_feature(sf).f_ot;

  // reverse object order
  std::vector<int64_t> perm = {3, 2, 1, 0};
  Tensor boxes_p = Tensor::zeros(boxes.shape());
  for (int64_t n = 0; n < N; ++n)
    std::copy(boxes.data() + perm[n] * T * 4, boxes.data() + (perm[n] + 1) * T * 4,
              boxes_p.data() + n * T * 4);
  StreamFeatures sf_p = ofe.extract_stream_features(V, M, boxes_p, validity);
  Tensor f_os_p = ofe.spatial_feature(sf_p).f_os;
  Tensor f_ot_p = ofe.temporal_feature(sf_p).f_ot;
  const int64_t os_plane = f_os.numel() / N, ot_plane = f_ot.numel() / N;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t i = 0; i < os_plane; ++i)
      CHECK(f_os_p.data()[n * os_plane + i] ==
            doctest::Approx(f_os.data()[perm[n] * os_plane + i]).epsilon(1e-12));
    for (int64_t i = 0; i < ot_plane; ++i)
      CHECK(f_ot_p.data()[n * ot_plane + i] ==
            doctest::Approx(f_ot.data()[perm[n] * ot_plane + i]).epsilon(1e-12));
  }
}

TEST_CASE("gradient flows from a scalar readout back to an input pixel") {
  ModelConfig cfg = tiny_cfg();
  Rng rng(64);
  Ofe ofe(cfg, rng);
  const int64_t T = cfg.T, S = cfg.image_size;
  Rng drng(65);
  Tensor V = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  Tensor M = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  auto [boxes, validity] = random_boxes(2, T, S, drng);
  V.set_requires_grad(true);

  auto readout = [&]() {
    StreamFeatures sf = ofe.extract_stream_features(V, M, boxes, validity);
    Tensor f_os = ofe.spatial_feature(sf).f_os;
    Tensor f_ot = ofe.temporal_feature(sf).f_ot;
    return add(sum_all(mul(f_os, f_os)), sum_all(mul(f_ot, f_ot)));
  };
  Tensor score = readout();
  V.zero_grad();
  score.backward();

  // probe a pixel inside the first object's box at the final frame
  const double* b = boxes.data() + (T - 1) * 4;
  const int64_t pi = static_cast<int64_t>((b[1] + b[3]) / 2);
  const int64_t pj = static_cast<int64_t>((b[0] + b[2]) / 2);
  const int64_t idx = ((T - 1) * 3 + 0) * S * S + pi * S + pj;
  const double autodiff = V.grad()[idx];
  const double numeric =
      oracles::numeric_grad(V, idx, [&]() { return readout().item(); }, 1e-6);
  CHECK(oracles::rel_error(autodiff, numeric) < 1e-3);
  CHECK(std::abs(autodiff) > 0.0);
}

TEST_CASE("zero-area box is clamped with a warning counter") {
  ModelConfig cfg = tiny_cfg();
  Rng rng(66);
  Ofe ofe(cfg, rng);
  const int64_t T = cfg.T, S = cfg.image_size;
  Rng drng(67);
  Tensor V = Tensor::rand_uniform({T, 3, S, S}, drng, 0.0, 1.0);
  Tensor boxes = Tensor::zeros({1, T, 4});
  Tensor validity = Tensor::ones({1, T});
  for (int64_t t = 0; t < T; ++t) {
    double* b = boxes.data() + t * 4;
    b[0] = b[2] = 16.0;  // zero width
    b[1] = 8.0;
    b[3] = 8.0;  // zero height
  }
  NoGradGuard ng;
  StreamFeatures sf = ofe.extract_stream_features(V, V, boxes, validity);
  CHECK(ofe.degenerate_box_count() > 0);
  bool finite = true;
  for (int64_t i = 0; i < sf.f_v.numel(); ++i)
    finite &= std::isfinite(sf.f_v.data()[i]);
  CHECK(finite);
}
