#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "roadimp/trg.hpp"

using namespace roadimp;

namespace {
ModelConfig micro() { return ModelConfig::micro(); }
}  // namespace

TEST_CASE("lane_feature: broadcast rows, non-negative, shape") {
  ModelConfig cfg = micro();
  Rng rng(90);
  Trg trg(cfg, rng);
  Rng drng(91);
  LaneInput lanes = LaneInput::empty();
  for (int64_t i = 0; i < 6; ++i)
    for (int64_t k = 0; k < 4; ++k)
      lanes.points.vec()[i * 4 + k] = drng.uniform(0.0, 64.0);
  lanes.count = 6;
  NoGradGuard ng;
  LaneFeature f = trg.lane_feature(lanes, 7);
  CHECK(f.f_l.shape() == Shape{7, cfg.Cp});
  for (int64_t n = 1; n < 7; ++n)
    for (int64_t k = 0; k < cfg.Cp; ++k)
      CHECK(f.f_l.at({n, k}) == f.f_l.at({0, k}));
  for (int64_t i = 0; i < f.f_l.numel(); ++i) CHECK(f.f_l.data()[i] >= 0.0);
}

TEST_CASE("lane_feature: zero lanes with zero bias give zero feature") {
  ModelConfig cfg = micro();
  Rng rng(92);
  Trg trg(cfg, rng);
  // zero out the projection bias and the LayerNorm shift
  auto params = trg.named_parameters();
  for (auto& [name, t] : params)
    if (name.find("bias") != std::string::npos ||
        name.find("beta") != std::string::npos)
      std::fill(t.vec().begin(), t.vec().end(), 0.0);
  NoGradGuard ng;
  LaneFeature f = trg.lane_feature(LaneInput::empty(), 2);
  // LayerNorm of a constant-zero row is zero, ReLU keeps it zero
  for (int64_t i = 0; i < f.f_l.numel(); ++i) CHECK(f.f_l.data()[i] == 0.0);
}

TEST_CASE("object_lane_interaction: residual identity under the zero hook") {
  ModelConfig cfg = micro();
  Rng rng(93);
  Trg trg(cfg, rng);
  Rng drng(94);
  const int64_t N = 4;
  Tensor f_l = Tensor::randn({N, cfg.Cp}, drng);
  Tensor f_ot = Tensor::randn({N, cfg.Cp}, drng);
  NoGradGuard ng;
  trg.cross_attention().set_hook(nn::MultiheadAttention::Hook::kZero);
  Tensor out = trg.object_lane_interaction(f_l, f_ot);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == f_ot.data()[i]);
}

TEST_CASE("object_lane_interaction: shape and singleton softmax weight") {
  ModelConfig cfg = micro();
  Rng rng(95);
  Trg trg(cfg, rng);
  Rng drng(96);
  const int64_t N = 5;
  Tensor f_l = Tensor::randn({N, cfg.Cp}, drng);
  Tensor f_ot = Tensor::randn({N, cfg.Cp}, drng);
  NoGradGuard ng;
  Tensor out = trg.object_lane_interaction(f_l, f_ot);
  CHECK(out.shape() == Shape{N, cfg.Cp});
  // softmax over a single key is exactly 1
  const Tensor& probs = trg.cross_attention().last_attention();
  REQUIRE(probs.defined());
  for (int64_t i = 0; i < probs.numel(); ++i) CHECK(probs.data()[i] == 1.0);
}

TEST_CASE("gate_score: sigmoid(0) = 0.5 with zeroed head, range, monotonicity") {
  ModelConfig cfg = micro();
  Rng rng(97);
  Trg trg(cfg, rng);
  NoGradGuard ng;
  // zero input + zero weights -> exactly 0.5
  {
    Trg zeroed(cfg, rng);
    for (auto& [name, t] : zeroed.named_parameters())
      if (name.rfind("gate_mlp", 0) == 0)
        std::fill(t.vec().begin(), t.vec().end(), 0.0);
    Tensor p = zeroed.gate_score(Tensor::zeros({3, cfg.Cp}));
    for (int64_t i = 0; i < 3; ++i) CHECK(p.data()[i] == 0.5);
  }
  // any input lands strictly inside (0,1)
  Rng drng(98);
  Tensor x = mul_scalar(Tensor::randn({16, cfg.Cp}, drng), 30.0);
  Tensor p = trg.gate_score(x);
  for (int64_t i = 0; i < p.numel(); ++i) {
    CHECK(p.data()[i] > 0.0);
    CHECK(p.data()[i] < 1.0);
  }
  // 1-D scan along the weight vector direction is non-decreasing
  auto params = trg.named_parameters();
  Tensor w;
  for (auto& [name, t] : params)
    if (name == "gate_mlp.fc0.weight") w = t;
  REQUIRE(w.defined());
  double prev = -1.0;
  for (int step = 0; step <= 10; ++step) {
    std::vector<double> row(cfg.Cp);
    for (int64_t k = 0; k < cfg.Cp; ++k)
      row[k] = w.data()[k] * (static_cast<double>(step) - 5.0);
    Tensor q = trg.gate_score(Tensor::from_vector({1, cfg.Cp}, row));
    CHECK(q.data()[0] >= prev);
    prev = q.data()[0];
  }
}

TEST_CASE("penalty_coefficient: hard rule is exact") {
  Tensor p = Tensor::from_vector({4}, {0.3, 0.5, 0.7, 0.4999999});
  Tensor pc = penalty_coefficient(p, 0.001, GateMode::kHard);
  CHECK(pc.data()[0] == 1.0);
  CHECK(pc.data()[1] == 0.001);  // p >= 0.5 branch
  CHECK(pc.data()[2] == 0.001);
  CHECK(pc.data()[3] == 1.0);
  CHECK_THROWS_AS(penalty_coefficient(p, 1.5, GateMode::kHard),
                  std::invalid_argument);
  CHECK_THROWS_AS(penalty_coefficient(p, 0.0, GateMode::kHard),
                  std::invalid_argument);
}

TEST_CASE("penalty_coefficient: soft surrogate values and gradient") {
  const double alpha = 0.001;
  Tensor p = Tensor::from_vector({1}, {0.5});
  Tensor pc = penalty_coefficient(p, alpha, GateMode::kSoft, 50.0);
  CHECK(pc.data()[0] == doctest::Approx((1.0 + alpha) / 2.0).epsilon(1e-12));

  // differentiable: gradient flows through the surrogate (gentle slope keeps
  // the sigmoid out of saturation where finite differences lose precision)
  Tensor p2 = Tensor::from_vector({3}, {0.3, 0.5, 0.7});
  p2.set_requires_grad(true);
  Tensor pc2 = penalty_coefficient(p2, alpha, GateMode::kSoft, 4.0);
  sum_all(pc2).backward();
  for (int64_t i = 0; i < 3; ++i) {
    const double num = oracles::numeric_grad(p2, i, [&]() {
      return sum_all(penalty_coefficient(p2, alpha, GateMode::kSoft, 4.0)).item();
    });
    CHECK(oracles::rel_error(p2.grad()[i], num) < 1e-5);
  }
}

TEST_CASE("soft gate converges pointwise to the hard rule as k grows") {
  Rng rng(99);
  const double alpha = 0.001;
  for (int i = 0; i < 500; ++i) {
    const double pv = rng.uniform(0.0, 1.0);
    if (std::abs(pv - 0.5) <= 0.01) continue;
    Tensor p = Tensor::from_vector({1}, {pv});
    const double soft =
        penalty_coefficient(p, alpha, GateMode::kSoft, 1e4).data()[0];
    const double hard = penalty_coefficient(p, alpha, GateMode::kHard).data()[0];
    CHECK(std::abs(soft - hard) < 1e-3);
  }
}

TEST_CASE("apply_gate: identity, homogeneity, mixed rows") {
  Rng rng(100);
  Tensor f = Tensor::randn({3, 8}, rng);
  Tensor ones = Tensor::ones({3});
  Tensor same = apply_gate(f, ones);
  for (int64_t i = 0; i < f.numel(); ++i) CHECK(same.data()[i] == f.data()[i]);

  // row with norm 2 scaled by 0.001 has norm 0.002
  std::vector<double> row(8, 0.0);
  row[0] = 2.0;
  Tensor single = Tensor::from_vector({1, 8}, row);
  Tensor scaled = apply_gate(single, Tensor::from_vector({1}, {0.001}));
  double norm = 0;
  for (int64_t i = 0; i < 8; ++i) norm += scaled.data()[i] * scaled.data()[i];
  CHECK(std::sqrt(norm) == doctest::Approx(0.002).epsilon(1e-12));

  // mixed gates scale only their own rows (row-wise multiplication oracle)
  Tensor pc = Tensor::from_vector({3}, {1.0, 0.001, 1.0});
  Tensor mixed = apply_gate(f, pc);
  for (int64_t n = 0; n < 3; ++n)
    for (int64_t k = 0; k < 8; ++k)
      CHECK(mixed.at({n, k}) == doctest::Approx(f.at({n, k}) * pc.data()[n]));
}

TEST_CASE("Trg::forward hard mode: gate semantics are exact per object") {
  ModelConfig cfg = micro();
  Rng rng(101);
  Trg trg(cfg, rng);
  trg.set_train(false);
  Rng drng(102);
  NoGradGuard ng;
  for (int rep = 0; rep < 20; ++rep) {
    const int64_t N = drng.uniform_int(1, 8);
    Tensor f_ot = mul_scalar(Tensor::randn({N, cfg.Cp}, drng), 2.0);
    LaneInput lanes = LaneInput::empty();
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t k = 0; k < 4; ++k)
        lanes.points.vec()[i * 4 + k] = drng.uniform(0.0, 64.0);
    lanes.count = 4;
    LaneGate gate = trg.forward(lanes, f_ot, GateMode::kHard);
    for (int64_t n = 0; n < N; ++n) {
      const double p = gate.p.data()[n];
      const double pc = gate.p_c.data()[n];
      CHECK((pc == 1.0 || pc == cfg.alpha));
      CHECK(pc == (p < 0.5 ? 1.0 : cfg.alpha));
      for (int64_t k = 0; k < cfg.Cp; ++k) {
        const double expect = gate.f_ol_m.at({n, k}) * pc;
        CHECK(gate.f_ol.at({n, k}) == expect);
      }
    }
  }
}
