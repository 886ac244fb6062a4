#include "roadimp/nn.hpp"

#include <cmath>

namespace roadimp::nn {

// ---- Module ----------------------------------------------------------------

void Module::register_parameter(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  params_.emplace_back(name, std::move(t));
}

void Module::register_buffer(const std::string& name, Tensor t) {
  buffers_.emplace_back(name, std::move(t));
}

void Module::register_module(const std::string& name, std::shared_ptr<Module> m) {
  children_.emplace_back(name, std::move(m));
}

std::vector<std::pair<std::string, Tensor>> Module::named_parameters(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [n, t] : params_) out.emplace_back(prefix + n, t);
  for (const auto& [n, m] : children_) {
    auto sub = m->named_parameters(prefix + n + ".");
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> Module::named_buffers(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [n, t] : buffers_) out.emplace_back(prefix + n, t);
  for (const auto& [n, m] : children_) {
    auto sub = m->named_buffers(prefix + n + ".");
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

std::vector<Tensor> Module::parameters() const {
  std::vector<Tensor> out;
  for (auto& [n, t] : named_parameters()) out.push_back(t);
  return out;
}

void Module::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

void Module::set_train(bool train) {
  training_ = train;
  for (auto& [n, m] : children_) m->set_train(train);
}

// ---- Linear ----------------------------------------------------------------

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool with_bias) : in_(in), out_(out) {
  const double k = 1.0 / std::sqrt(static_cast<double>(in));
  weight = Tensor::rand_uniform({out, in}, rng, -k, k);
  register_parameter("weight", weight);
  if (with_bias) {
    bias = Tensor::rand_uniform({out}, rng, -k, k);
    register_parameter("bias", bias);
  }
}

Tensor Linear::forward(const Tensor& x) const {
  RI_CHECK(x.size(-1) == in_, "Linear: expected trailing dim " + std::to_string(in_) +
                                  ", got " + shape_to_string(x.shape()));
  Shape lead(x.shape().begin(), x.shape().end() - 1);
  const int64_t rows = x.numel() / in_;
  Tensor x2 = reshape(x, {rows, in_});
  Tensor y = matmul(x2, permute(weight, {1, 0}));
  if (bias.defined()) y = add(y, bias);
  lead.push_back(out_);
  return reshape(y, lead);
}

// ---- Conv2d ----------------------------------------------------------------

Conv2d::Conv2d(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t pad,
               Rng& rng, bool with_bias)
    : stride_(stride), pad_(pad) {
  // ReLU-gain fan-in init keeps activation scale constant through conv
  // stacks; the backbones here carry no normalization layers to rescue a
  // shrinking signal.
  const double k = std::sqrt(6.0 / static_cast<double>(in * kernel * kernel));
  weight = Tensor::rand_uniform({out, in, kernel, kernel}, rng, -k, k);
  register_parameter("weight", weight);
  if (with_bias) {
    const double kb = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    bias = Tensor::rand_uniform({out}, rng, -kb, kb);
    register_parameter("bias", bias);
  }
}

Tensor Conv2d::forward(const Tensor& x) const {
  return conv2d(x, weight, bias, stride_, pad_);
}

// ---- LayerNorm ----------------------------------------------------------------

LayerNorm::LayerNorm(int64_t dim, double eps) : dim_(dim), eps_(eps) {
  gamma = Tensor::ones({dim});
  beta = Tensor::zeros({dim});
  register_parameter("gamma", gamma);
  register_parameter("beta", beta);
}

Tensor LayerNorm::forward(const Tensor& x) const {
  RI_CHECK(x.size(-1) == dim_, "LayerNorm: trailing dim mismatch");
  Tensor mu = mean(x, -1, true);
  Tensor xc = sub(x, mu);
  Tensor var = mean(square(xc), -1, true);
  Tensor inv = div(Tensor::ones(var.shape()), sqrt_op(add_scalar(var, eps_)));
  return add(mul(mul(xc, inv), gamma), beta);
}

// ---- BatchNorm2d ----------------------------------------------------------------

BatchNorm2d::BatchNorm2d(int64_t channels, double eps, double momentum)
    : channels_(channels), eps_(eps), momentum_(momentum) {
  gamma = Tensor::ones({channels});
  beta = Tensor::zeros({channels});
  register_parameter("gamma", gamma);
  register_parameter("beta", beta);
  running_mean = Tensor::zeros({channels});
  running_var = Tensor::ones({channels});
  register_buffer("running_mean", running_mean);
  register_buffer("running_var", running_var);
}

Tensor BatchNorm2d::forward(const Tensor& x) {
  RI_CHECK(x.dim() == 4 && x.size(1) == channels_, "BatchNorm2d: shape mismatch");
  const int64_t B = x.size(0), h = x.size(2), w = x.size(3);
  const double count = static_cast<double>(B * h * w);
  Shape bshape = {1, channels_, 1, 1};
  if (training_) {
    Tensor m = mean(mean(mean(x, 3, true), 2, true), 0, true);  // [1,C,1,1]
    Tensor xc = sub(x, m);
    Tensor v = mean(mean(mean(square(xc), 3, true), 2, true), 0, true);
    Tensor inv = div(Tensor::ones(bshape), sqrt_op(add_scalar(v, eps_)));
    Tensor y = add(mul(mul(xc, inv), reshape(gamma, bshape)), reshape(beta, bshape));
    // Update running stats outside the graph (unbiased variance).
    const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
    for (int64_t c = 0; c < channels_; ++c) {
      running_mean.vec()[c] =
          (1.0 - momentum_) * running_mean.vec()[c] + momentum_ * m.vec()[c];
      running_var.vec()[c] =
          (1.0 - momentum_) * running_var.vec()[c] + momentum_ * v.vec()[c] * unbias;
    }
    return y;
  }
  std::vector<double> inv_v(channels_), mean_v(channels_);
  for (int64_t c = 0; c < channels_; ++c) {
    inv_v[c] = 1.0 / std::sqrt(running_var.vec()[c] + eps_);
    mean_v[c] = running_mean.vec()[c];
  }
  Tensor m = Tensor::from_vector(bshape, std::move(mean_v));
  Tensor inv = Tensor::from_vector(bshape, std::move(inv_v));
  return add(mul(mul(sub(x, m), inv), reshape(gamma, bshape)), reshape(beta, bshape));
}

// ---- LSTM ----------------------------------------------------------------

Lstm::Lstm(int64_t input, int64_t hidden, int64_t layers, Rng& rng)
    : input_(input), hidden_(hidden) {
  const double k = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (int64_t l = 0; l < layers; ++l) {
    const int64_t in = l == 0 ? input : hidden;
    // fan-in bound for the input projection: the first layer consumes wide
    // flattened feature maps and would otherwise saturate every gate
    const double ki = 1.0 / std::sqrt(static_cast<double>(in));
    LayerWeights lw;
    lw.w_ih = Tensor::rand_uniform({4 * hidden, in}, rng, -ki, ki);
    lw.w_hh = Tensor::rand_uniform({4 * hidden, hidden}, rng, -k, k);
    lw.b_ih = Tensor::rand_uniform({4 * hidden}, rng, -k, k);
    lw.b_hh = Tensor::rand_uniform({4 * hidden}, rng, -k, k);
    const std::string p = "l" + std::to_string(l) + ".";
    register_parameter(p + "w_ih", lw.w_ih);
    register_parameter(p + "w_hh", lw.w_hh);
    register_parameter(p + "b_ih", lw.b_ih);
    register_parameter(p + "b_hh", lw.b_hh);
    layers_.push_back(std::move(lw));
  }
}

Tensor Lstm::forward(const Tensor& x) const {
  RI_CHECK(x.dim() == 3 && x.size(2) == input_, "Lstm: expected [B,T,in]");
  const int64_t B = x.size(0), T = x.size(1);
  const int64_t H = hidden_;
  Tensor layer_in = x;
  for (const auto& lw : layers_) {
    const int64_t in = lw.w_ih.size(1);
    // Project all time steps at once, then run the recurrence.
    Tensor xp = matmul(reshape(layer_in, {B * T, in}), permute(lw.w_ih, {1, 0}));
    xp = add(add(xp, lw.b_ih), lw.b_hh);  // [B*T, 4H]
    xp = reshape(xp, {B, T, 4 * H});
    Tensor w_hh_t = permute(lw.w_hh, {1, 0});
    Tensor h = Tensor::zeros({B, H});
    Tensor c = Tensor::zeros({B, H});
    std::vector<Tensor> outs;
    outs.reserve(T);
    for (int64_t t = 0; t < T; ++t) {
      Tensor gates = add(reshape(narrow(xp, 1, t, 1), {B, 4 * H}), matmul(h, w_hh_t));
      Tensor ig = sigmoid(narrow(gates, 1, 0, H));
      Tensor fg = sigmoid(narrow(gates, 1, H, H));
      Tensor gg = tanh_op(narrow(gates, 1, 2 * H, H));
      Tensor og = sigmoid(narrow(gates, 1, 3 * H, H));
      c = add(mul(fg, c), mul(ig, gg));
      h = mul(og, tanh_op(c));
      outs.push_back(h);
    }
    layer_in = stack(outs, 1);  // [B,T,H]
  }
  return layer_in;
}

// ---- MultiheadAttention ------------------------------------------------------

MultiheadAttention::MultiheadAttention(int64_t embed_dim, int64_t heads, Rng& rng)
    : embed_(embed_dim), heads_(heads) {
  RI_CHECK(embed_dim % heads == 0, "MultiheadAttention: embed dim " +
                                       std::to_string(embed_dim) +
                                       " not divisible by " + std::to_string(heads));
  wq = std::make_shared<Linear>(embed_dim, embed_dim, rng);
  wk = std::make_shared<Linear>(embed_dim, embed_dim, rng);
  wv = std::make_shared<Linear>(embed_dim, embed_dim, rng);
  wo = std::make_shared<Linear>(embed_dim, embed_dim, rng);
  register_module("wq", wq);
  register_module("wk", wk);
  register_module("wv", wv);
  register_module("wo", wo);
}

Tensor MultiheadAttention::forward(const Tensor& query, const Tensor& key,
                                   const Tensor& value) {
  RI_CHECK(query.dim() == 3 && key.dim() == 3 && value.dim() == 3,
           "MultiheadAttention: expected [B,S,D] inputs");
  if (hook_ == Hook::kZero) return Tensor::zeros(query.shape());
  if (hook_ == Hook::kIdentity) return query;

  const int64_t B = query.size(0), sq = query.size(1), sk = key.size(1);
  const int64_t dh = embed_ / heads_;
  auto split_heads = [&](const Tensor& t, int64_t s) {
    // [B,S,D] -> [B*h, S, dh]
    Tensor r = reshape(t, {B, s, heads_, dh});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {B * heads_, s, dh});
  };
  Tensor q = split_heads(wq->forward(query), sq);
  Tensor k = split_heads(wk->forward(key), sk);
  Tensor v = split_heads(wv->forward(value), sk);
  Tensor scores = mul_scalar(bmm(q, permute(k, {0, 2, 1})),
                             1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor probs = softmax(scores, -1);
  last_attention_ = probs.detach();
  Tensor ctx = bmm(probs, v);  // [B*h, Sq, dh]
  ctx = reshape(ctx, {B, heads_, sq, dh});
  ctx = permute(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, {B, sq, embed_});
  return wo->forward(ctx);
}

// ---- MLP ----------------------------------------------------------------

Mlp::Mlp(int64_t in, const std::vector<int64_t>& sizes, Rng& rng) {
  RI_CHECK(!sizes.empty(), "Mlp: empty size list");
  int64_t prev = in;
  for (size_t i = 0; i < sizes.size(); ++i) {
    auto l = std::make_shared<Linear>(prev, sizes[i], rng);
    register_module("fc" + std::to_string(i), l);
    layers_.push_back(l);
    prev = sizes[i];
  }
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->forward(h);
    if (i + 1 < layers_.size()) h = relu(h);
  }
  return h;
}

// ---- TinyBackbone ------------------------------------------------------------

TinyBackbone::TinyBackbone(int64_t out_channels, const std::vector<int64_t>& strides,
                           Rng& rng, bool bias)
    : out_channels_(out_channels) {
  RI_CHECK(strides.size() == 3, "TinyBackbone: expected 3 stage strides");
  const int64_t c1 = std::max<int64_t>(out_channels / 16, 4);
  const int64_t c2 = std::max<int64_t>(out_channels / 4, 8);
  const std::vector<int64_t> chans = {c1, c2, out_channels};
  int64_t in = 3;
  stride_ = 1;
  for (size_t i = 0; i < 3; ++i) {
    const int64_t s = strides[i];
    const int64_t k = s >= 4 ? 5 : 3;
    const int64_t pad = k / 2;
    auto conv = std::make_shared<Conv2d>(in, chans[i], k, s, pad, rng, bias);
    register_module("conv" + std::to_string(i + 1), conv);
    convs_.push_back(conv);
    in = chans[i];
    stride_ *= s;
  }
}

Tensor TinyBackbone::forward(const Tensor& x) {
  Tensor h = x;
  for (auto& conv : convs_) h = relu(conv->forward(h));
  return h;
}

// ---- ResNet18Backbone ------------------------------------------------------------

ResNet18Backbone::ResNet18Backbone(Rng& rng) {
  conv1_ = std::make_shared<Conv2d>(3, 64, 7, 2, 3, rng, false);
  bn1_ = std::make_shared<BatchNorm2d>(64);
  register_module("conv1", conv1_);
  register_module("bn1", bn1_);
  const int64_t stage_channels[4] = {64, 128, 256, 512};
  int64_t in = 64;
  int idx = 0;
  for (int stage = 0; stage < 4; ++stage) {
    for (int block = 0; block < 2; ++block) {
      const int64_t out = stage_channels[stage];
      const int64_t stride = (stage > 0 && block == 0) ? 2 : 1;
      BasicBlock blk;
      blk.conv1 = std::make_shared<Conv2d>(in, out, 3, stride, 1, rng, false);
      blk.bn1 = std::make_shared<BatchNorm2d>(out);
      blk.conv2 = std::make_shared<Conv2d>(out, out, 3, 1, 1, rng, false);
      blk.bn2 = std::make_shared<BatchNorm2d>(out);
      const std::string p = "layer" + std::to_string(stage + 1) + "." +
                            std::to_string(block) + ".";
      register_module(p + "conv1", blk.conv1);
      register_module(p + "bn1", blk.bn1);
      register_module(p + "conv2", blk.conv2);
      register_module(p + "bn2", blk.bn2);
      if (stride != 1 || in != out) {
        blk.down = std::make_shared<Conv2d>(in, out, 1, stride, 0, rng, false);
        blk.bn_down = std::make_shared<BatchNorm2d>(out);
        register_module(p + "down", blk.down);
        register_module(p + "bn_down", blk.bn_down);
      }
      blocks_.push_back(std::move(blk));
      in = out;
      ++idx;
    }
  }
  (void)idx;
}

Tensor ResNet18Backbone::run_block(BasicBlock& blk, const Tensor& x) {
  Tensor h = relu(blk.bn1->forward(blk.conv1->forward(x)));
  h = blk.bn2->forward(blk.conv2->forward(h));
  Tensor skip = blk.down ? blk.bn_down->forward(blk.down->forward(x)) : x;
  return relu(add(h, skip));
}

Tensor ResNet18Backbone::forward(const Tensor& x) {
  Tensor h = relu(bn1_->forward(conv1_->forward(x)));
  h = max_pool2d(h, 3, 2, 1);
  for (auto& blk : blocks_) h = run_block(blk, h);
  return h;
}

std::shared_ptr<Backbone> make_backbone(const std::string& kind, int64_t out_channels,
                                        const std::vector<int64_t>& tiny_strides,
                                        Rng& rng, bool bias) {
  if (kind == "tiny")
    return std::make_shared<TinyBackbone>(out_channels, tiny_strides, rng, bias);
  if (kind == "resnet18") {
    RI_CHECK(out_channels == 512, "resnet18 backbone emits 512 channels");
    return std::make_shared<ResNet18Backbone>(rng);
  }
  fail("unknown backbone '" + kind + "' (expected tiny or resnet18)");
}

}  // namespace roadimp::nn
