#include "roadimp/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace roadimp {

using detail::TensorImpl;
using EMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMatrix>;
using ECMap = Eigen::Map<const EMatrix>;

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

void fail(const std::string& msg) { throw std::runtime_error(msg); }

namespace {
thread_local bool g_grad_enabled = true;

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int64_t i = static_cast<int64_t>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

// ---- Tensor basics --------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape) {
  return from_vector(shape, std::vector<double>(shape_numel(shape), 0.0));
}

Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  return from_vector(shape, std::vector<double>(shape_numel(shape), value));
}

Tensor Tensor::from_vector(const Shape& shape, std::vector<double> values) {
  RI_CHECK(shape_numel(shape) == static_cast<int64_t>(values.size()),
           "from_vector: shape " + shape_to_string(shape) + " does not match " +
               std::to_string(values.size()) + " values");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  return wrap(std::move(impl));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return from_vector(shape, std::move(v));
}

Tensor Tensor::rand_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return from_vector(shape, std::move(v));
}

int64_t Tensor::size(int64_t d) const {
  if (d < 0) d += dim();
  RI_CHECK(d >= 0 && d < dim(), "size: dim out of range");
  return impl_->shape[d];
}

double Tensor::item() const {
  RI_CHECK(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

double Tensor::at(const std::vector<int64_t>& idx) const {
  RI_CHECK(static_cast<int64_t>(idx.size()) == dim(), "at: rank mismatch");
  auto st = contiguous_strides(impl_->shape);
  int64_t off = 0;
  for (size_t i = 0; i < idx.size(); ++i) {
    RI_CHECK(idx[i] >= 0 && idx[i] < impl_->shape[i], "at: index out of range");
    off += idx[i] * st[i];
  }
  return impl_->data[off];
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return wrap(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

void Tensor::backward() {
  RI_CHECK(numel() == 1, "backward: expected scalar output");
  // Topological order over the reachable graph.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, size_t>> dfs;
  dfs.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!dfs.empty()) {
    auto& [node, next] = dfs.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (!seen.count(p)) {
        seen.insert(p);
        dfs.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      dfs.pop_back();
    }
  }
  impl_->ensure_grad();
  impl_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

namespace detail {

bool any_requires_grad(const std::vector<Tensor>& ts) {
  if (!GradMode::enabled()) return false;
  for (const auto& t : ts)
    if (t.defined() && (t.requires_grad() || t.impl()->backward_fn)) return true;
  return false;
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(TensorImpl&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (any_requires_grad(parents)) {
    impl->requires_grad = true;
    impl->parents.reserve(parents.size());
    for (auto& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = std::move(backward_fn);
    for (auto& p : impl->parents) p->ensure_grad();
  }
  return Tensor::wrap(std::move(impl));
}

}  // namespace detail

// ---- broadcasting machinery ------------------------------------------------

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (size_t i = 0; i < n; ++i) {
    int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    RI_CHECK(da == db || da == 1 || db == 1,
             "broadcast: incompatible shapes " + shape_to_string(a) + " and " +
                 shape_to_string(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` viewed as the broadcast target `out` (0 where broadcast).
std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  auto st = contiguous_strides(s);
  std::vector<int64_t> res(out.size(), 0);
  size_t off = out.size() - s.size();
  for (size_t i = 0; i < s.size(); ++i) res[off + i] = (s[i] == 1) ? 0 : st[i];
  return res;
}

template <typename Fwd>
std::vector<double> broadcast_eval(const Tensor& a, const Tensor& b, const Shape& out,
                                   Fwd fwd) {
  const int64_t n = shape_numel(out);
  std::vector<double> res(n);
  if (a.shape() == b.shape()) {  // fast path
    const double* pa = a.data();
    const double* pb = b.data();
    for (int64_t i = 0; i < n; ++i) res[i] = fwd(pa[i], pb[i]);
    return res;
  }
  auto sa = broadcast_strides(a.shape(), out);
  auto sb = broadcast_strides(b.shape(), out);
  std::vector<int64_t> idx(out.size(), 0);
  const double* pa = a.data();
  const double* pb = b.data();
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    res[i] = fwd(pa[oa], pb[ob]);
    for (int64_t d = static_cast<int64_t>(out.size()) - 1; d >= 0; --d) {
      if (++idx[d] < out[d]) {
        oa += sa[d];
        ob += sb[d];
        break;
      }
      idx[d] = 0;
      oa -= sa[d] * (out[d] - 1);
      ob -= sb[d] * (out[d] - 1);
    }
  }
  return res;
}

// Accumulate grad contribution `g` (laid out as `out`) into `target` whose
// shape broadcasts to `out`.
void reduce_into(const std::vector<double>& g, const Shape& out, TensorImpl& target) {
  target.ensure_grad();
  if (target.shape == out) {
    for (size_t i = 0; i < g.size(); ++i) target.grad[i] += g[i];
    return;
  }
  auto st = broadcast_strides(target.shape, out);
  std::vector<int64_t> idx(out.size(), 0);
  int64_t off = 0;
  const int64_t n = shape_numel(out);
  for (int64_t i = 0; i < n; ++i) {
    target.grad[off] += g[i];
    for (int64_t d = static_cast<int64_t>(out.size()) - 1; d >= 0; --d) {
      if (++idx[d] < out[d]) {
        off += st[d];
        break;
      }
      idx[d] = 0;
      off -= st[d] * (out[d] - 1);
    }
  }
}

// Elementwise values of `t` expanded to the broadcast shape `out`.
std::vector<double> expand_values(const Tensor& t, const Shape& out) {
  const int64_t n = shape_numel(out);
  std::vector<double> res(n);
  if (t.shape() == out) {
    std::copy(t.data(), t.data() + n, res.begin());
    return res;
  }
  auto st = broadcast_strides(t.shape(), out);
  std::vector<int64_t> idx(out.size(), 0);
  int64_t off = 0;
  const double* p = t.data();
  for (int64_t i = 0; i < n; ++i) {
    res[i] = p[off];
    for (int64_t d = static_cast<int64_t>(out.size()) - 1; d >= 0; --d) {
      if (++idx[d] < out[d]) {
        off += st[d];
        break;
      }
      idx[d] = 0;
      off -= st[d] * (out[d] - 1);
    }
  }
  return res;
}

}  // namespace

// ---- elementwise binary ----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  auto data = broadcast_eval(a, b, out, [](double x, double y) { return x + y; });
  auto ai = a.impl();
  auto bi = b.impl();
  Shape out_copy = out;
  return detail::make_result(
      out, std::move(data), {a, b}, [ai, bi, out_copy](TensorImpl& self) {
        reduce_into(self.grad, out_copy, *ai);
        reduce_into(self.grad, out_copy, *bi);
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  auto data = broadcast_eval(a, b, out, [](double x, double y) { return x - y; });
  auto ai = a.impl();
  auto bi = b.impl();
  Shape out_copy = out;
  return detail::make_result(
      out, std::move(data), {a, b}, [ai, bi, out_copy](TensorImpl& self) {
        reduce_into(self.grad, out_copy, *ai);
        std::vector<double> gneg(self.grad.size());
        for (size_t i = 0; i < gneg.size(); ++i) gneg[i] = -self.grad[i];
        reduce_into(gneg, out_copy, *bi);
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  auto data = broadcast_eval(a, b, out, [](double x, double y) { return x * y; });
  auto ai = a.impl();
  auto bi = b.impl();
  Tensor ad = a, bd = b;
  Shape out_copy = out;
  return detail::make_result(
      out, std::move(data), {a, b}, [ai, bi, ad, bd, out_copy](TensorImpl& self) {
        auto bv = expand_values(bd, out_copy);
        for (size_t i = 0; i < bv.size(); ++i) bv[i] *= self.grad[i];
        reduce_into(bv, out_copy, *ai);
        auto av = expand_values(ad, out_copy);
        for (size_t i = 0; i < av.size(); ++i) av[i] *= self.grad[i];
        reduce_into(av, out_copy, *bi);
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  auto data = broadcast_eval(a, b, out, [](double x, double y) { return x / y; });
  auto ai = a.impl();
  auto bi = b.impl();
  Tensor ad = a, bd = b;
  Shape out_copy = out;
  return detail::make_result(
      out, std::move(data), {a, b}, [ai, bi, ad, bd, out_copy](TensorImpl& self) {
        auto bv = expand_values(bd, out_copy);
        std::vector<double> ga(bv.size());
        for (size_t i = 0; i < bv.size(); ++i) ga[i] = self.grad[i] / bv[i];
        reduce_into(ga, out_copy, *ai);
        auto av = expand_values(ad, out_copy);
        std::vector<double> gb(bv.size());
        for (size_t i = 0; i < bv.size(); ++i)
          gb[i] = -self.grad[i] * av[i] / (bv[i] * bv[i]);
        reduce_into(gb, out_copy, *bi);
      });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> data(a.vec());
  for (auto& x : data) x += s;
  auto ai = a.impl();
  return detail::make_result(a.shape(), std::move(data), {a}, [ai](TensorImpl& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
  });
}

Tensor mul_scalar(const Tensor& a, double s) {
  std::vector<double> data(a.vec());
  for (auto& x : data) x *= s;
  auto ai = a.impl();
  return detail::make_result(a.shape(), std::move(data), {a}, [ai, s](TensorImpl& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += s * self.grad[i];
  });
}

// ---- elementwise unary -----------------------------------------------------

namespace {
template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd_from_xy) {
  std::vector<double> data(a.numel());
  const double* p = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) data[i] = fwd(p[i]);
  auto ai = a.impl();
  Tensor ad = a;
  return detail::make_result(a.shape(), std::move(data), {a},
                             [ai, ad, bwd_from_xy](TensorImpl& self) {
                               const double* x = ad.data();
                               const double* y = self.data.data();
                               for (size_t i = 0; i < self.grad.size(); ++i)
                                 ai->grad[i] += self.grad[i] * bwd_from_xy(x[i], y[i]);
                             });
}
}  // namespace

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_op(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor exp_op(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_op(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt_op(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor pow_scalar(const Tensor& a, double p) {
  return unary_op(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- matmul ----------------------------------------------------------------

// GEMMs run on Eigen-owned (always-aligned) matrices: kernel dispatch then
// depends only on the dimensions, never on heap addresses, which keeps
// results bitwise reproducible across runs.
namespace {

void gemm_into(const double* a, const double* b, double* c, int64_t m, int64_t k,
               int64_t n, bool transpose_a, bool transpose_b, bool accumulate) {
  EMatrix ma = transpose_a ? EMatrix(ECMap(a, k, m)) : EMatrix(ECMap(a, m, k));
  EMatrix mb = transpose_b ? EMatrix(ECMap(b, n, k)) : EMatrix(ECMap(b, k, n));
  EMatrix mc(m, n);
  if (transpose_a && transpose_b)
    mc.noalias() = ma.transpose() * mb.transpose();
  else if (transpose_a)
    mc.noalias() = ma.transpose() * mb;
  else if (transpose_b)
    mc.noalias() = ma * mb.transpose();
  else
    mc.noalias() = ma * mb;
  if (accumulate) {
    for (int64_t i = 0; i < m * n; ++i) c[i] += mc.data()[i];
  } else {
    std::memcpy(c, mc.data(), sizeof(double) * static_cast<size_t>(m * n));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  RI_CHECK(a.dim() == 2 && b.dim() == 2, "matmul: expected 2-D operands");
  const int64_t m = a.size(0), k = a.size(1), k2 = b.size(0), n = b.size(1);
  RI_CHECK(k == k2, "matmul: inner dims differ (" + shape_to_string(a.shape()) + " x " +
                        shape_to_string(b.shape()) + ")");
  std::vector<double> out(static_cast<size_t>(m * n));
  gemm_into(a.data(), b.data(), out.data(), m, k, n, false, false, false);
  auto ai = a.impl();
  auto bi = b.impl();
  Tensor ad = a, bd = b;
  return detail::make_result(
      {m, n}, std::move(out), {a, b}, [ai, bi, ad, bd, m, k, n](TensorImpl& self) {
        const double* g = self.grad.data();
        if (!ai->grad.empty())
          gemm_into(g, bd.data(), ai->grad.data(), m, n, k, false, true, true);
        if (!bi->grad.empty())
          gemm_into(ad.data(), g, bi->grad.data(), k, m, n, true, false, true);
      });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  RI_CHECK(a.dim() == 3 && b.dim() == 3, "bmm: expected 3-D operands");
  const int64_t B = a.size(0), m = a.size(1), k = a.size(2), n = b.size(2);
  RI_CHECK(b.size(0) == B && b.size(1) == k, "bmm: shape mismatch");
  std::vector<double> out(static_cast<size_t>(B * m * n));
  for (int64_t i = 0; i < B; ++i)
    gemm_into(a.data() + i * m * k, b.data() + i * k * n, out.data() + i * m * n, m,
              k, n, false, false, false);
  auto ai = a.impl();
  auto bi = b.impl();
  Tensor ad = a, bd = b;
  return detail::make_result(
      {B, m, n}, std::move(out), {a, b}, [ai, bi, ad, bd, B, m, k, n](TensorImpl& self) {
        for (int64_t i = 0; i < B; ++i) {
          const double* g = self.grad.data() + i * m * n;
          if (!ai->grad.empty())
            gemm_into(g, bd.data() + i * k * n, ai->grad.data() + i * m * k, m, n, k,
                      false, true, true);
          if (!bi->grad.empty())
            gemm_into(ad.data() + i * m * k, g, bi->grad.data() + i * k * n, k, m, n,
                      true, false, true);
        }
      });
}

// ---- shape ops ---------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
  Shape resolved = shape;
  int64_t known = 1, infer = -1;
  for (size_t i = 0; i < resolved.size(); ++i) {
    if (resolved[i] == -1) {
      RI_CHECK(infer == -1, "reshape: at most one -1 dim");
      infer = static_cast<int64_t>(i);
    } else {
      known *= resolved[i];
    }
  }
  if (infer >= 0) resolved[infer] = a.numel() / known;
  RI_CHECK(shape_numel(resolved) == a.numel(),
           "reshape: numel mismatch " + shape_to_string(a.shape()) + " -> " +
               shape_to_string(shape));
  std::vector<double> data(a.vec());
  auto ai = a.impl();
  return detail::make_result(resolved, std::move(data), {a}, [ai](TensorImpl& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<int64_t>& axes) {
  RI_CHECK(static_cast<int64_t>(axes.size()) == a.dim(), "permute: rank mismatch");
  Shape out(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) out[i] = a.size(axes[i]);
  auto in_strides = contiguous_strides(a.shape());
  std::vector<int64_t> perm_strides(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) perm_strides[i] = in_strides[axes[i]];
  const int64_t n = a.numel();
  std::vector<double> data(n);
  std::vector<int64_t> idx(out.size(), 0);
  const double* p = a.data();
  int64_t off = 0;
  for (int64_t i = 0; i < n; ++i) {
    data[i] = p[off];
    for (int64_t d = static_cast<int64_t>(out.size()) - 1; d >= 0; --d) {
      if (++idx[d] < out[d]) {
        off += perm_strides[d];
        break;
      }
      idx[d] = 0;
      off -= perm_strides[d] * (out[d] - 1);
    }
  }
  auto ai = a.impl();
  Shape out_copy = out;
  return detail::make_result(
      out, std::move(data), {a}, [ai, out_copy, perm_strides](TensorImpl& self) {
        std::vector<int64_t> idx(out_copy.size(), 0);
        int64_t off = 0;
        const int64_t n = static_cast<int64_t>(self.grad.size());
        for (int64_t i = 0; i < n; ++i) {
          ai->grad[off] += self.grad[i];
          for (int64_t d = static_cast<int64_t>(out_copy.size()) - 1; d >= 0; --d) {
            if (++idx[d] < out_copy[d]) {
              off += perm_strides[d];
              break;
            }
            idx[d] = 0;
            off -= perm_strides[d] * (out_copy[d] - 1);
          }
        }
      });
}

Tensor narrow(const Tensor& a, int64_t dim, int64_t start, int64_t length) {
  if (dim < 0) dim += a.dim();
  RI_CHECK(dim >= 0 && dim < a.dim(), "narrow: dim out of range");
  RI_CHECK(start >= 0 && start + length <= a.size(dim), "narrow: slice out of range");
  Shape out = a.shape();
  out[dim] = length;
  const int64_t outer = std::accumulate(a.shape().begin(), a.shape().begin() + dim,
                                        int64_t{1}, std::multiplies<>());
  const int64_t inner = std::accumulate(a.shape().begin() + dim + 1, a.shape().end(),
                                        int64_t{1}, std::multiplies<>());
  const int64_t in_dim = a.size(dim);
  std::vector<double> data(shape_numel(out));
  const double* p = a.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(data.data() + o * length * inner,
                p + (o * in_dim + start) * inner,
                sizeof(double) * static_cast<size_t>(length * inner));
  auto ai = a.impl();
  return detail::make_result(out, std::move(data), {a},
                             [ai, outer, inner, in_dim, start, length](TensorImpl& self) {
                               for (int64_t o = 0; o < outer; ++o) {
                                 double* gdst = ai->grad.data() + (o * in_dim + start) * inner;
                                 const double* gsrc = self.grad.data() + o * length * inner;
                                 for (int64_t i = 0; i < length * inner; ++i) gdst[i] += gsrc[i];
                               }
                             });
}

Tensor select(const Tensor& a, int64_t dim, int64_t index) {
  Tensor sliced = narrow(a, dim, index, 1);
  Shape out = sliced.shape();
  if (dim < 0) dim += a.dim();
  out.erase(out.begin() + dim);
  return reshape(sliced, out);
}

Tensor cat(const std::vector<Tensor>& ts, int64_t dim) {
  RI_CHECK(!ts.empty(), "cat: empty input");
  if (dim < 0) dim += ts[0].dim();
  Shape out = ts[0].shape();
  int64_t total = 0;
  for (const auto& t : ts) {
    RI_CHECK(t.dim() == ts[0].dim(), "cat: rank mismatch");
    for (int64_t d = 0; d < t.dim(); ++d)
      RI_CHECK(d == dim || t.size(d) == out[d], "cat: shape mismatch");
    total += t.size(dim);
  }
  out[dim] = total;
  const int64_t outer = std::accumulate(out.begin(), out.begin() + dim, int64_t{1},
                                        std::multiplies<>());
  const int64_t inner = std::accumulate(out.begin() + dim + 1, out.end(), int64_t{1},
                                        std::multiplies<>());
  std::vector<double> data(shape_numel(out));
  int64_t offset = 0;
  std::vector<int64_t> part_sizes;
  for (const auto& t : ts) {
    const int64_t len = t.size(dim);
    part_sizes.push_back(len);
    const double* p = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(data.data() + (o * total + offset) * inner, p + o * len * inner,
                  sizeof(double) * static_cast<size_t>(len * inner));
    offset += len;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& t : ts) impls.push_back(t.impl());
  return detail::make_result(out, std::move(data), ts,
                             [impls, part_sizes, outer, inner, total](TensorImpl& self) {
                               int64_t offset = 0;
                               for (size_t pi = 0; pi < impls.size(); ++pi) {
                                 const int64_t len = part_sizes[pi];
                                 auto& gi = impls[pi]->grad;
                                 if (!gi.empty()) {
                                   for (int64_t o = 0; o < outer; ++o) {
                                     const double* gsrc =
                                         self.grad.data() + (o * total + offset) * inner;
                                     double* gdst = gi.data() + o * len * inner;
                                     for (int64_t i = 0; i < len * inner; ++i)
                                       gdst[i] += gsrc[i];
                                   }
                                 }
                                 offset += len;
                               }
                             });
}

Tensor stack(const std::vector<Tensor>& ts, int64_t dim) {
  RI_CHECK(!ts.empty(), "stack: empty input");
  std::vector<Tensor> expanded;
  expanded.reserve(ts.size());
  for (const auto& t : ts) {
    Shape s = t.shape();
    s.insert(s.begin() + dim, 1);
    expanded.push_back(reshape(t, s));
  }
  return cat(expanded, dim);
}

Tensor repeat_leading(const Tensor& a, int64_t times) {
  RI_CHECK(times >= 1, "repeat_leading: times must be >= 1");
  Shape out = a.shape();
  out.insert(out.begin(), times);
  const int64_t n = a.numel();
  std::vector<double> data(static_cast<size_t>(times * n));
  for (int64_t r = 0; r < times; ++r)
    std::memcpy(data.data() + r * n, a.data(), sizeof(double) * static_cast<size_t>(n));
  auto ai = a.impl();
  return detail::make_result(out, std::move(data), {a}, [ai, times, n](TensorImpl& self) {
    for (int64_t r = 0; r < times; ++r) {
      const double* g = self.grad.data() + r * n;
      for (int64_t i = 0; i < n; ++i) ai->grad[i] += g[i];
    }
  });
}

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& a, int64_t dim, bool keepdim) {
  if (dim < 0) dim += a.dim();
  RI_CHECK(dim >= 0 && dim < a.dim(), "sum: dim out of range");
  const int64_t outer = std::accumulate(a.shape().begin(), a.shape().begin() + dim,
                                        int64_t{1}, std::multiplies<>());
  const int64_t len = a.size(dim);
  const int64_t inner = std::accumulate(a.shape().begin() + dim + 1, a.shape().end(),
                                        int64_t{1}, std::multiplies<>());
  Shape out = a.shape();
  if (keepdim)
    out[dim] = 1;
  else
    out.erase(out.begin() + dim);
  if (out.empty()) out = {1};
  std::vector<double> data(static_cast<size_t>(outer * inner), 0.0);
  const double* p = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t l = 0; l < len; ++l) {
      const double* src = p + (o * len + l) * inner;
      double* dst = data.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  auto ai = a.impl();
  return detail::make_result(out, std::move(data), {a},
                             [ai, outer, len, inner](TensorImpl& self) {
                               for (int64_t o = 0; o < outer; ++o)
                                 for (int64_t l = 0; l < len; ++l) {
                                   double* gdst = ai->grad.data() + (o * len + l) * inner;
                                   const double* gsrc = self.grad.data() + o * inner;
                                   for (int64_t i = 0; i < inner; ++i) gdst[i] += gsrc[i];
                                 }
                             });
}

Tensor mean(const Tensor& a, int64_t dim, bool keepdim) {
  if (dim < 0) dim += a.dim();
  return mul_scalar(sum(a, dim, keepdim), 1.0 / static_cast<double>(a.size(dim)));
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  const double* p = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += p[i];
  auto ai = a.impl();
  return detail::make_result({1}, {acc}, {a}, [ai](TensorImpl& self) {
    const double g = self.grad[0];
    for (auto& gi : ai->grad) gi += g;
  });
}

Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor max_detached(const Tensor& a, int64_t dim, bool keepdim) {
  if (dim < 0) dim += a.dim();
  const int64_t outer = std::accumulate(a.shape().begin(), a.shape().begin() + dim,
                                        int64_t{1}, std::multiplies<>());
  const int64_t len = a.size(dim);
  const int64_t inner = std::accumulate(a.shape().begin() + dim + 1, a.shape().end(),
                                        int64_t{1}, std::multiplies<>());
  Shape out = a.shape();
  if (keepdim)
    out[dim] = 1;
  else
    out.erase(out.begin() + dim);
  if (out.empty()) out = {1};
  std::vector<double> data(static_cast<size_t>(outer * inner),
                           -std::numeric_limits<double>::infinity());
  const double* p = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t l = 0; l < len; ++l) {
      const double* src = p + (o * len + l) * inner;
      double* dst = data.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] = std::max(dst[i], src[i]);
    }
  return Tensor::from_vector(out, std::move(data));
}

Tensor softmax(const Tensor& a, int64_t dim) {
  if (dim < 0) dim += a.dim();
  const int64_t outer = std::accumulate(a.shape().begin(), a.shape().begin() + dim,
                                        int64_t{1}, std::multiplies<>());
  const int64_t len = a.size(dim);
  const int64_t inner = std::accumulate(a.shape().begin() + dim + 1, a.shape().end(),
                                        int64_t{1}, std::multiplies<>());
  std::vector<double> data(a.numel());
  const double* p = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t l = 0; l < len; ++l) mx = std::max(mx, p[(o * len + l) * inner + i]);
      double z = 0.0;
      for (int64_t l = 0; l < len; ++l) {
        double e = std::exp(p[(o * len + l) * inner + i] - mx);
        data[(o * len + l) * inner + i] = e;
        z += e;
      }
      for (int64_t l = 0; l < len; ++l) data[(o * len + l) * inner + i] /= z;
    }
  auto ai = a.impl();
  return detail::make_result(
      a.shape(), std::move(data), {a}, [ai, outer, len, inner](TensorImpl& self) {
        // dx = y * (dy - sum(dy * y))
        const double* y = self.data.data();
        const double* dy = self.grad.data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < inner; ++i) {
            double dot = 0.0;
            for (int64_t l = 0; l < len; ++l) {
              const int64_t k = (o * len + l) * inner + i;
              dot += dy[k] * y[k];
            }
            for (int64_t l = 0; l < len; ++l) {
              const int64_t k = (o * len + l) * inner + i;
              ai->grad[k] += y[k] * (dy[k] - dot);
            }
          }
      });
}

// ---- convolution ---------------------------------------------------------------

namespace {

// im2col: x [Cin,H,W] -> cols [Cin*kh*kw, outH*outW]
void im2col(const double* x, int64_t cin, int64_t h, int64_t w, int64_t k,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, double* cols) {
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ki = 0; ki < k; ++ki)
      for (int64_t kj = 0; kj < k; ++kj) {
        double* row = cols + ((c * k + ki) * k + kj) * oh * ow;
        for (int64_t oi = 0; oi < oh; ++oi) {
          const int64_t ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) {
            std::fill(row + oi * ow, row + (oi + 1) * ow, 0.0);
            continue;
          }
          for (int64_t oj = 0; oj < ow; ++oj) {
            const int64_t jj = oj * stride + kj - pad;
            row[oi * ow + oj] = (jj < 0 || jj >= w) ? 0.0 : x[(c * h + ii) * w + jj];
          }
        }
      }
}

// col2im: accumulate cols back into dx
void col2im(const double* cols, int64_t cin, int64_t h, int64_t w, int64_t k,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, double* dx) {
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ki = 0; ki < k; ++ki)
      for (int64_t kj = 0; kj < k; ++kj) {
        const double* row = cols + ((c * k + ki) * k + kj) * oh * ow;
        for (int64_t oi = 0; oi < oh; ++oi) {
          const int64_t ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) continue;
          for (int64_t oj = 0; oj < ow; ++oj) {
            const int64_t jj = oj * stride + kj - pad;
            if (jj >= 0 && jj < w) dx[(c * h + ii) * w + jj] += row[oi * ow + oj];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t pad) {
  RI_CHECK(x.dim() == 4 && w.dim() == 4, "conv2d: expected x[B,C,H,W], w[O,C,k,k]");
  const int64_t B = x.size(0), cin = x.size(1), h = x.size(2), wd = x.size(3);
  const int64_t cout = w.size(0), k = w.size(2);
  RI_CHECK(w.size(1) == cin && w.size(3) == k, "conv2d: weight shape mismatch");
  const int64_t oh = (h + 2 * pad - k) / stride + 1;
  const int64_t ow = (wd + 2 * pad - k) / stride + 1;
  RI_CHECK(oh > 0 && ow > 0, "conv2d: empty output");
  const bool has_bias = b.defined() && b.numel() > 0;
  if (has_bias) RI_CHECK(b.numel() == cout, "conv2d: bias size mismatch");

  const int64_t ck = cin * k * k;
  std::vector<double> out(static_cast<size_t>(B * cout * oh * ow));
  std::vector<double> cols(static_cast<size_t>(ck * oh * ow));
  for (int64_t n = 0; n < B; ++n) {
    im2col(x.data() + n * cin * h * wd, cin, h, wd, k, stride, pad, oh, ow, cols.data());
    double* dst = out.data() + n * cout * oh * ow;
    gemm_into(w.data(), cols.data(), dst, cout, ck, oh * ow, false, false, false);
    if (has_bias) {
      for (int64_t c = 0; c < cout; ++c)
        for (int64_t i = 0; i < oh * ow; ++i) dst[c * oh * ow + i] += b.data()[c];
    }
  }

  auto xi = x.impl();
  auto wi = w.impl();
  auto bi = has_bias ? b.impl() : nullptr;
  Tensor xd = x, wdd = w;
  std::vector<Tensor> parents = {x, w};
  if (has_bias) parents.push_back(b);
  return detail::make_result(
      {B, cout, oh, ow}, std::move(out), parents,
      [xi, wi, bi, xd, wdd, B, cin, h, wd, cout, k, stride, pad, oh, ow,
       ck](TensorImpl& self) {
        std::vector<double> cols(static_cast<size_t>(ck * oh * ow));
        std::vector<double> dcols(static_cast<size_t>(ck * oh * ow));
        for (int64_t n = 0; n < B; ++n) {
          const double* g = self.grad.data() + n * cout * oh * ow;
          if (!wi->grad.empty()) {
            im2col(xd.data() + n * cin * h * wd, cin, h, wd, k, stride, pad, oh, ow,
                   cols.data());
            gemm_into(g, cols.data(), wi->grad.data(), cout, oh * ow, ck, false,
                      true, true);
          }
          if (!xi->grad.empty()) {
            gemm_into(wdd.data(), g, dcols.data(), ck, cout, oh * ow, true, false,
                      false);
            col2im(dcols.data(), cin, h, wd, k, stride, pad, oh, ow,
                   xi->grad.data() + n * cin * h * wd);
          }
          if (bi && !bi->grad.empty()) {
            for (int64_t c = 0; c < cout; ++c) {
              double acc = 0.0;
              for (int64_t i = 0; i < oh * ow; ++i) acc += g[c * oh * ow + i];
              bi->grad[c] += acc;
            }
          }
        }
      });
}

Tensor max_pool2d(const Tensor& x, int64_t kernel, int64_t stride, int64_t pad) {
  RI_CHECK(x.dim() == 4, "max_pool2d: expected [B,C,H,W]");
  const int64_t B = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const int64_t oh = (h + 2 * pad - kernel) / stride + 1;
  const int64_t ow = (w + 2 * pad - kernel) / stride + 1;
  std::vector<double> out(static_cast<size_t>(B * c * oh * ow));
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  const double* p = x.data();
  for (int64_t n = 0; n < B * c; ++n)
    for (int64_t oi = 0; oi < oh; ++oi)
      for (int64_t oj = 0; oj < ow; ++oj) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t best_idx = -1;
        for (int64_t ki = 0; ki < kernel; ++ki)
          for (int64_t kj = 0; kj < kernel; ++kj) {
            const int64_t ii = oi * stride + ki - pad;
            const int64_t jj = oj * stride + kj - pad;
            if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
            const int64_t idx = (n * h + ii) * w + jj;
            if (p[idx] > best) {
              best = p[idx];
              best_idx = idx;
            }
          }
        const int64_t o = (n * oh + oi) * ow + oj;
        out[o] = best;
        (*argmax)[o] = best_idx;
      }
  auto xi = x.impl();
  return detail::make_result({B, c, oh, ow}, std::move(out), {x},
                             [xi, argmax](TensorImpl& self) {
                               for (size_t i = 0; i < self.grad.size(); ++i) {
                                 const int64_t idx = (*argmax)[i];
                                 if (idx >= 0) xi->grad[idx] += self.grad[i];
                               }
                             });
}

Tensor roi_align(const Tensor& feat, double x1, double y1, double x2, double y2,
                 int64_t out_h, int64_t out_w) {
  RI_CHECK(feat.dim() == 3, "roi_align: expected [C,H,W] feature map");
  const int64_t c = feat.size(0), h = feat.size(1), w = feat.size(2);
  const double bw = (x2 - x1) / static_cast<double>(out_w);
  const double bh = (y2 - y1) / static_cast<double>(out_h);
  std::vector<double> out(static_cast<size_t>(c * out_h * out_w));
  // One bilinear sample at each bin centre.
  struct Sample {
    int64_t i0, j0;
    double wy, wx;
  };
  auto samples = std::make_shared<std::vector<Sample>>(
      static_cast<size_t>(out_h * out_w));
  for (int64_t oi = 0; oi < out_h; ++oi)
    for (int64_t oj = 0; oj < out_w; ++oj) {
      double sy = y1 + (oi + 0.5) * bh - 0.5;
      double sx = x1 + (oj + 0.5) * bw - 0.5;
      sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
      sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
      int64_t i0 = std::min(static_cast<int64_t>(sy), h - 2 >= 0 ? h - 2 : 0);
      int64_t j0 = std::min(static_cast<int64_t>(sx), w - 2 >= 0 ? w - 2 : 0);
      (*samples)[oi * out_w + oj] = {i0, j0, sy - i0, sx - j0};
    }
  const double* p = feat.data();
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t s = 0; s < out_h * out_w; ++s) {
      const auto& sm = (*samples)[s];
      const int64_t i1 = std::min(sm.i0 + 1, h - 1), j1 = std::min(sm.j0 + 1, w - 1);
      const double v00 = p[(ch * h + sm.i0) * w + sm.j0];
      const double v01 = p[(ch * h + sm.i0) * w + j1];
      const double v10 = p[(ch * h + i1) * w + sm.j0];
      const double v11 = p[(ch * h + i1) * w + j1];
      out[ch * out_h * out_w + s] = (1 - sm.wy) * ((1 - sm.wx) * v00 + sm.wx * v01) +
                                    sm.wy * ((1 - sm.wx) * v10 + sm.wx * v11);
    }
  auto fi = feat.impl();
  return detail::make_result(
      {c, out_h, out_w}, std::move(out), {feat},
      [fi, samples, c, h, w, out_h, out_w](TensorImpl& self) {
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t s = 0; s < out_h * out_w; ++s) {
            const auto& sm = (*samples)[s];
            const int64_t i1 = std::min(sm.i0 + 1, h - 1), j1 = std::min(sm.j0 + 1, w - 1);
            const double g = self.grad[ch * out_h * out_w + s];
            fi->grad[(ch * h + sm.i0) * w + sm.j0] += g * (1 - sm.wy) * (1 - sm.wx);
            fi->grad[(ch * h + sm.i0) * w + j1] += g * (1 - sm.wy) * sm.wx;
            fi->grad[(ch * h + i1) * w + sm.j0] += g * sm.wy * (1 - sm.wx);
            fi->grad[(ch * h + i1) * w + j1] += g * sm.wy * sm.wx;
          }
      });
}

Tensor adaptive_avg_pool2d(const Tensor& x, int64_t out_h, int64_t out_w) {
  RI_CHECK(x.dim() == 4, "adaptive_avg_pool2d: expected [B,C,H,W]");
  const int64_t B = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto lo = [](int64_t o, int64_t in, int64_t out) { return (o * in) / out; };
  auto hi = [](int64_t o, int64_t in, int64_t out) {
    return ((o + 1) * in + out - 1) / out;
  };
  std::vector<double> out(static_cast<size_t>(B * c * out_h * out_w));
  const double* p = x.data();
  for (int64_t n = 0; n < B * c; ++n)
    for (int64_t oi = 0; oi < out_h; ++oi)
      for (int64_t oj = 0; oj < out_w; ++oj) {
        const int64_t i0 = lo(oi, h, out_h), i1 = hi(oi, h, out_h);
        const int64_t j0 = lo(oj, w, out_w), j1 = hi(oj, w, out_w);
        double acc = 0.0;
        for (int64_t i = i0; i < i1; ++i)
          for (int64_t j = j0; j < j1; ++j) acc += p[(n * h + i) * w + j];
        out[(n * out_h + oi) * out_w + oj] =
            acc / static_cast<double>((i1 - i0) * (j1 - j0));
      }
  auto xi = x.impl();
  return detail::make_result(
      {B, c, out_h, out_w}, std::move(out), {x},
      [xi, B, c, h, w, out_h, out_w, lo, hi](TensorImpl& self) {
        for (int64_t n = 0; n < B * c; ++n)
          for (int64_t oi = 0; oi < out_h; ++oi)
            for (int64_t oj = 0; oj < out_w; ++oj) {
              const int64_t i0 = lo(oi, h, out_h), i1 = hi(oi, h, out_h);
              const int64_t j0 = lo(oj, w, out_w), j1 = hi(oj, w, out_w);
              const double g = self.grad[(n * out_h + oi) * out_w + oj] /
                               static_cast<double>((i1 - i0) * (j1 - j0));
              for (int64_t i = i0; i < i1; ++i)
                for (int64_t j = j0; j < j1; ++j) xi->grad[(n * h + i) * w + j] += g;
            }
      });
}

}  // namespace roadimp
