#include "roadimp/trg.hpp"

namespace roadimp {

Tensor penalty_coefficient(const Tensor& p, double alpha, GateMode mode,
                           double soft_k) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("penalty_coefficient: alpha must lie in (0,1), got " +
                                std::to_string(alpha));
  if (mode == GateMode::kHard) {
    std::vector<double> pc(p.numel());
    for (int64_t i = 0; i < p.numel(); ++i)
      pc[i] = p.data()[i] < 0.5 ? 1.0 : alpha;
    return Tensor::from_vector(p.shape(), std::move(pc));
  }
  // soft: 1 + (alpha - 1) * sigmoid(k * (p - 0.5))
  Tensor shifted = mul_scalar(add_scalar(p, -0.5), soft_k);
  return add_scalar(mul_scalar(sigmoid(shifted), alpha - 1.0), 1.0);
}

Tensor apply_gate(const Tensor& f_ol_m, const Tensor& p_c) {
  RI_CHECK(f_ol_m.dim() == 2 && p_c.numel() == f_ol_m.size(0),
           "apply_gate: expected [N,C'] features and N coefficients");
  return mul(f_ol_m, reshape(p_c, {f_ol_m.size(0), 1}));
}

Trg::Trg(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  lane_proj_ = std::make_shared<nn::Linear>(LaneInput::kMaxLanes * 4, cfg.Cp, rng);
  lane_norm_ = std::make_shared<nn::LayerNorm>(cfg.Cp);
  register_module("lane_proj", lane_proj_);
  register_module("lane_norm", lane_norm_);
  mhca_ = std::make_shared<nn::MultiheadAttention>(cfg.Cp, cfg.heads, rng);
  register_module("mhca", mhca_);
  gate_mlp_ = std::make_shared<nn::Mlp>(cfg.Cp, std::vector<int64_t>{1}, rng);
  register_module("gate_mlp", gate_mlp_);
}

LaneFeature Trg::lane_feature(const LaneInput& lanes, int64_t n_objects) {
  RI_CHECK(lanes.points.dim() == 2 && lanes.points.size(0) == LaneInput::kMaxLanes &&
               lanes.points.size(1) == 4,
           "lane_feature: lane input must be [20,4]");
  RI_CHECK(n_objects >= 1, "lane_feature: need at least one object");
  Tensor flat = reshape(lanes.points, {1, LaneInput::kMaxLanes * 4});
  Tensor f = relu(lane_norm_->forward(lane_proj_->forward(flat)));  // [1,C']
  Tensor rows = n_objects == 1
                    ? f
                    : reshape(repeat_leading(reshape(f, {cfg_.Cp}), n_objects),
                              {n_objects, cfg_.Cp});
  return {rows};
}

Tensor Trg::object_lane_interaction(const Tensor& f_l, const Tensor& f_ot) {
  RI_CHECK(f_l.dim() == 2 && f_ot.dim() == 2 && f_l.size(0) == f_ot.size(0) &&
               f_l.size(1) == f_ot.size(1),
           "object_lane_interaction: expected matching [N,C'] inputs");
  const int64_t N = f_l.size(0), D = f_l.size(1);
  Tensor q = reshape(f_l, {N, 1, D});
  Tensor kv = reshape(f_ot, {N, 1, D});
  Tensor attended = reshape(mhca_->forward(q, kv, kv), {N, D});
  return add(attended, f_ot);
}

Tensor Trg::gate_score(const Tensor& f_ol_m) {
  RI_CHECK(f_ol_m.dim() == 2 && f_ol_m.size(1) == cfg_.Cp,
           "gate_score: expected [N,C'] input");
  Tensor logits = gate_mlp_->forward(f_ol_m);  // [N,1]
  return reshape(sigmoid(logits), {f_ol_m.size(0)});
}

LaneGate Trg::forward(const LaneInput& lanes, const Tensor& f_ot, GateMode mode) {
  LaneGate gate;
  const int64_t N = f_ot.size(0);
  LaneFeature f_l = lane_feature(lanes, N);
  gate.f_ol_m = cfg_.use_interaction ? object_lane_interaction(f_l.f_l, f_ot) : f_ot;
  gate.p = gate_score(gate.f_ol_m);
  if (cfg_.use_weighting) {
    gate.p_c = penalty_coefficient(gate.p, cfg_.alpha, mode, cfg_.soft_k);
    gate.f_ol = apply_gate(gate.f_ol_m, gate.p_c);
  } else {
    gate.p_c = Tensor::ones({N});
    gate.f_ol = gate.f_ol_m;
  }
  return gate;
}

}  // namespace roadimp
