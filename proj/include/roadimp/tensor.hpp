#ifndef ROADIMP_TENSOR_HPP
#define ROADIMP_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace roadimp {

using Shape = std::vector<int64_t>;

std::string shape_to_string(const Shape& s);
int64_t shape_numel(const Shape& s);

[[noreturn]] void fail(const std::string& msg);

#define RI_CHECK(cond, msg)                  \
  do {                                       \
    if (!(cond)) ::roadimp::fail(msg);       \
  } while (0)

/// Seeded RNG used everywhere parameters or data are sampled.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    return std::uniform_int_distribution<int64_t>(lo, hi)(eng_);
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

class Tensor;

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same numel as data
  bool requires_grad = false;
  // Parents kept alive for the backward pass; backward_fn reads this
  // node's grad and accumulates into the parents' grads.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

/// Global switch that disables graph construction (evaluation mode).
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }

 private:
  bool prev_;
};

/// Dense double-precision tensor with reverse-mode autodiff.
/// Row-major, dynamically shaped. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from_vector(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value) { return from_vector({1}, {value}); }
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);
  static Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t size(int64_t d) const;
  int64_t numel() const { return impl_->numel(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }

  double item() const;
  double at(const std::vector<int64_t>& idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  const std::vector<double>& grad() const { return impl_->grad; }
  std::vector<double>& grad_mutable() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  /// Reverse-mode sweep from this scalar tensor.
  void backward();

  /// Value copy detached from the graph.
  Tensor detach() const;
  /// Deep copy (still detached).
  Tensor clone() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// ---- graph helpers -------------------------------------------------------

namespace detail {
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<Tensor> parents,
                   std::function<void(TensorImpl&)> backward_fn);
bool any_requires_grad(const std::vector<Tensor>& ts);
}  // namespace detail

// ---- elementwise / broadcast ops ----------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor sqrt_op(const Tensor& a);
Tensor square(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor clamp(const Tensor& a, double lo, double hi);

// ---- linear algebra ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,m,k] x [B,k,n]

// ---- shape ops -----------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<int64_t>& axes);
Tensor narrow(const Tensor& a, int64_t dim, int64_t start, int64_t length);
Tensor select(const Tensor& a, int64_t dim, int64_t index);
Tensor cat(const std::vector<Tensor>& ts, int64_t dim);
Tensor stack(const std::vector<Tensor>& ts, int64_t dim);
/// Tile a tensor `times` along a fresh leading axis.
Tensor repeat_leading(const Tensor& a, int64_t times);

// ---- reductions ----------------------------------------------------------

Tensor sum(const Tensor& a, int64_t dim, bool keepdim);
Tensor mean(const Tensor& a, int64_t dim, bool keepdim);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
/// Row maxima along `dim`, detached from the graph (used for stable softmax).
Tensor max_detached(const Tensor& a, int64_t dim, bool keepdim);

Tensor softmax(const Tensor& a, int64_t dim);

// ---- convolution / pooling ----------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t pad);
Tensor max_pool2d(const Tensor& x, int64_t kernel, int64_t stride, int64_t pad);

/// Bilinear ROI pooling of one box per call over feature maps [C,H,W] ->
/// [C, out_h, out_w]. Box in feature-map coordinates.
Tensor roi_align(const Tensor& feat, double x1, double y1, double x2, double y2,
                 int64_t out_h, int64_t out_w);

/// Average pooling to a fixed output grid, [B,C,H,W] -> [B,C,out_h,out_w].
Tensor adaptive_avg_pool2d(const Tensor& x, int64_t out_h, int64_t out_w);

}  // namespace roadimp

#endif  // ROADIMP_TENSOR_HPP
