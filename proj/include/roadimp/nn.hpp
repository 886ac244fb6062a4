#ifndef ROADIMP_NN_HPP
#define ROADIMP_NN_HPP

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "roadimp/tensor.hpp"

namespace roadimp::nn {

/// Base class providing a named parameter/buffer registry so checkpoints can
/// address every array by module path.
class Module {
 public:
  virtual ~Module() = default;

  void register_parameter(const std::string& name, Tensor t);
  void register_buffer(const std::string& name, Tensor t);
  void register_module(const std::string& name, std::shared_ptr<Module> m);

  std::vector<std::pair<std::string, Tensor>> named_parameters(
      const std::string& prefix = "") const;
  std::vector<std::pair<std::string, Tensor>> named_buffers(
      const std::string& prefix = "") const;
  std::vector<Tensor> parameters() const;

  void zero_grad();
  void set_train(bool train);
  bool training() const { return training_; }

 protected:
  bool training_ = true;

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
};

class Linear : public Module {
 public:
  Linear(int64_t in, int64_t out, Rng& rng, bool bias = true);
  /// x [..., in] -> [..., out]
  Tensor forward(const Tensor& x) const;
  int64_t in_features() const { return in_; }
  int64_t out_features() const { return out_; }

  Tensor weight;  // [out, in]
  Tensor bias;    // [out] (undefined when bias=false)

 private:
  int64_t in_, out_;
};

class Conv2d : public Module {
 public:
  Conv2d(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t pad,
         Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;

  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  int64_t stride() const { return stride_; }

 private:
  int64_t stride_, pad_;
};

class LayerNorm : public Module {
 public:
  LayerNorm(int64_t dim, double eps = 1e-5);
  Tensor forward(const Tensor& x) const;  // normalizes the last dimension

  Tensor gamma, beta;

 private:
  int64_t dim_;
  double eps_;
};

class BatchNorm2d : public Module {
 public:
  BatchNorm2d(int64_t channels, double eps = 1e-5, double momentum = 0.1);
  Tensor forward(const Tensor& x);

  Tensor gamma, beta;
  Tensor running_mean, running_var;

 private:
  int64_t channels_;
  double eps_, momentum_;
};

/// Multi-layer LSTM; gate layout (i, f, g, o), zero initial state.
class Lstm : public Module {
 public:
  Lstm(int64_t input, int64_t hidden, int64_t layers, Rng& rng);
  /// x [B, T, input] -> last layer outputs [B, T, hidden]
  Tensor forward(const Tensor& x) const;
  int64_t hidden_size() const { return hidden_; }

 private:
  struct LayerWeights {
    Tensor w_ih, w_hh, b_ih, b_hh;  // [4H,in],[4H,H],[4H],[4H]
  };
  std::vector<LayerWeights> layers_;
  int64_t input_, hidden_;
};

/// Multi-head attention over token sequences.
/// The test hook bypasses the attention branch: kZero returns an exact zero
/// tensor, kIdentity passes the query through untouched.
class MultiheadAttention : public Module {
 public:
  enum class Hook { kNone, kZero, kIdentity };

  MultiheadAttention(int64_t embed_dim, int64_t heads, Rng& rng);
  /// query [B,Sq,D], key/value [B,Sk,D] -> [B,Sq,D]
  Tensor forward(const Tensor& query, const Tensor& key, const Tensor& value);

  void set_hook(Hook h) { hook_ = h; }
  /// Attention probabilities [B*heads, Sq, Sk] from the last forward
  /// (detached; undefined when a hook was active).
  const Tensor& last_attention() const { return last_attention_; }

  std::shared_ptr<Linear> wq, wk, wv, wo;

 private:
  int64_t embed_, heads_;
  Hook hook_ = Hook::kNone;
  Tensor last_attention_;
};

/// Fully connected stack: sizes = successive output widths, ReLU between
/// layers, none after the last.
class Mlp : public Module {
 public:
  Mlp(int64_t in, const std::vector<int64_t>& sizes, Rng& rng);
  Tensor forward(const Tensor& x) const;

 private:
  std::vector<std::shared_ptr<Linear>> layers_;
};

// ---- backbones -------------------------------------------------------------

class Backbone : public Module {
 public:
  virtual Tensor forward(const Tensor& x) = 0;  // [B,3,H,W] -> [B,C,H/s,W/s]
  virtual int64_t out_channels() const = 0;
  virtual int64_t stride() const = 0;
};

/// Three conv+ReLU stages; desk-scale stand-in for the full residual net.
class TinyBackbone : public Backbone {
 public:
  TinyBackbone(int64_t out_channels, const std::vector<int64_t>& stage_strides,
               Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) override;
  int64_t out_channels() const override { return out_channels_; }
  int64_t stride() const override { return stride_; }

 private:
  std::vector<std::shared_ptr<Conv2d>> convs_;
  int64_t out_channels_, stride_;
};

/// Standard 18-layer residual network, classifier head removed.
class ResNet18Backbone : public Backbone {
 public:
  explicit ResNet18Backbone(Rng& rng);
  Tensor forward(const Tensor& x) override;
  int64_t out_channels() const override { return 512; }
  int64_t stride() const override { return 32; }

 private:
  struct BasicBlock {
    std::shared_ptr<Conv2d> conv1, conv2, down;
    std::shared_ptr<BatchNorm2d> bn1, bn2, bn_down;
  };
  Tensor run_block(BasicBlock& blk, const Tensor& x);

  std::shared_ptr<Conv2d> conv1_;
  std::shared_ptr<BatchNorm2d> bn1_;
  std::vector<BasicBlock> blocks_;
};

std::shared_ptr<Backbone> make_backbone(const std::string& kind, int64_t out_channels,
                                        const std::vector<int64_t>& tiny_strides,
                                        Rng& rng, bool bias = true);

}  // namespace roadimp::nn

#endif  // ROADIMP_NN_HPP
