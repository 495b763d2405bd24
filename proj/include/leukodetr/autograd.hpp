#pragma once

#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "leukodetr/tensor.hpp"

namespace leukodetr {

// Reverse-mode autodiff over Tensor<T>. Every op builds a node holding the
// forward value plus a closure that scatters the node's gradient into its
// parents. Graphs are DAGs rooted at parameter/input leaves; backward() runs
// the closures in reverse topological order. When no input requires a
// gradient an op returns a detached leaf, so inference builds no graph.
template <class T>
struct AgNode {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<AgNode>> parents;
  std::function<void(AgNode&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false)
      : node_(std::make_shared<AgNode<T>>()) {
    node_->value = std::move(v);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& val() const { return node_->value; }
  Tensor<T>& grad() const { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<AgNode<T>>& node() const { return node_; }

  const std::vector<int64_t>& shape() const { return node_->value.shape(); }
  int64_t size(int i) const { return node_->value.size(i); }
  int64_t numel() const { return node_->value.numel(); }

  void zero_grad() {
    if (node_ && node_->grad.defined()) node_->grad.zero_();
  }

  // Backpropagate from a scalar.
  void backward() const;

 private:
  explicit Var(std::shared_ptr<AgNode<T>> n) : node_(std::move(n)) {}
  std::shared_ptr<AgNode<T>> node_;

  template <class U>
  friend Var<U> make_op(Tensor<U> value, const std::vector<Var<U>>& parents,
                        std::function<void(AgNode<U>&)> backward_fn);
};

template <class T>
Var<T> make_op(Tensor<T> value, const std::vector<Var<T>>& parents,
               std::function<void(AgNode<T>&)> backward_fn) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  if (!rg) return Var<T>(std::move(value), false);
  auto n = std::make_shared<AgNode<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  for (const auto& p : parents) n->parents.push_back(p.node());
  n->backward_fn = std::move(backward_fn);
  return Var<T>(std::move(n));
}

using VarF = Var<float>;
using VarD = Var<double>;

namespace ag {

// -------- elementwise (shapes must match) --------
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> minimum(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> maximum(const Var<T>& a, const Var<T>& b);

template <class T> Var<T> scalar_mul(const Var<T>& a, T c);
template <class T> Var<T> scalar_add(const Var<T>& a, T c);

template <class T> Var<T> relu(const Var<T>& a);
template <class T> Var<T> sigmoid(const Var<T>& a);
template <class T> Var<T> logsigmoid(const Var<T>& a);
template <class T> Var<T> exp_(const Var<T>& a);
template <class T> Var<T> log_(const Var<T>& a);
template <class T> Var<T> sqrt_(const Var<T>& a);
template <class T> Var<T> abs_(const Var<T>& a);
// d/dx x^p = p x^(p-1); x must be positive unless p is a nonnegative integer.
template <class T> Var<T> pow_scalar(const Var<T>& a, T p);
// Clamp to [lo, hi]; gradient passes through inside the range only.
template <class T> Var<T> clamp_scalar(const Var<T>& a, T lo, T hi);

// -------- reductions --------
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);

// -------- linear algebra --------
template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);  // [M,K]x[K,N]
// x [N,K] * w^T [K,D] + b -> [N,D]; pass undefined b for no bias.
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <class T> Var<T> transpose2d(const Var<T>& a);

// -------- shape --------
template <class T> Var<T> reshape(const Var<T>& a, std::vector<int64_t> shape);
template <class T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <class T> Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <class T> Var<T> slice_rows(const Var<T>& a, int64_t begin, int64_t len);
template <class T> Var<T> slice_cols(const Var<T>& a, int64_t begin, int64_t len);
template <class T> Var<T> gather_rows(const Var<T>& a, const std::vector<int64_t>& idx);

// -------- broadcast helpers --------
template <class T> Var<T> add_rowvec(const Var<T>& x, const Var<T>& v);  // [N,D]+[D]
template <class T> Var<T> mul_rowvec(const Var<T>& x, const Var<T>& v);  // [N,D]*[D]
template <class T> Var<T> mul_colvec(const Var<T>& x, const Var<T>& v);  // [N,D]*[N]

// -------- rows of [N,D] --------
template <class T> Var<T> softmax_rows(const Var<T>& a);
template <class T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                                     T eps);

// -------- conv / spatial, NCHW --------
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
// w layout [IC,OC,kh,kw]; out = (H-1)*stride - 2*pad + kh + out_pad.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad,
                        int out_pad);
template <class T> Var<T> maxpool2d(const Var<T>& x, int kernel, int stride, int pad);
// Frozen per-channel affine y = x*scale[c] + shift[c]; scale/shift carry no grad.
template <class T>
Var<T> channel_affine(const Var<T>& x, const Tensor<T>& scale, const Tensor<T>& shift);
// x [N,C,H,W] scaled per (n,c) by s [N,C].
template <class T> Var<T> scale_channels(const Var<T>& x, const Var<T>& s);
template <class T> Var<T> bilinear_resize(const Var<T>& x, int64_t out_h, int64_t out_w);
// mask [N,H,W], nonzero = padded/invalid. Pools ignore masked cells; a fully
// masked image is an error.
template <class T> Var<T> masked_avgpool(const Var<T>& x, const TensorB& mask);
template <class T> Var<T> masked_maxpool(const Var<T>& x, const TensorB& mask);

template <class T> Var<T> dropout(const Var<T>& x, double p, std::mt19937_64& gen);

// Plain helpers used by op implementations and by oracle tests.
template <class T>
void im2col(const T* src, int64_t c, int64_t h, int64_t w, int kh, int kw, int stride, int pad,
            T* col);
template <class T>
void col2im(const T* col, int64_t c, int64_t h, int64_t w, int kh, int kw, int stride, int pad,
            T* dst);
inline int64_t conv_out_size(int64_t in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace ag
}  // namespace leukodetr
