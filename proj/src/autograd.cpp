#include "leukodetr/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace leukodetr {

template <class T>
void Var<T>::backward() const {
  check_arg(defined() && node_->value.numel() == 1, "backward: root must be a defined scalar");
  if (!node_->requires_grad) return;

  // Reverse topological order via iterative post-order DFS over parent edges.
  std::vector<AgNode<T>*> order;
  std::unordered_set<AgNode<T>*> seen;
  std::vector<std::pair<AgNode<T>*, size_t>> stack;
  stack.push_back({node_.get(), 0});
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      AgNode<T>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

namespace ag {

namespace {

// Reused uninitialized scratch for im2col/col2im lowering; every entry is
// written before it is read, so no zeroing is needed.
template <class T>
T* scratch(size_t n) {
  thread_local std::unique_ptr<T[]> buf;
  thread_local size_t cap = 0;
  if (n > cap) {
    buf = std::make_unique_for_overwrite<T[]>(n);
    cap = n;
  }
  return buf.get();
}

template <class T>
void axpy(int64_t n, T alpha, const T* x, T* y) {
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
Tensor<T>& pgrad(const std::shared_ptr<AgNode<T>>& n) {
  return n->ensure_grad();
}

template <class T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  check_arg(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  int64_t total = out.numel();
#pragma omp parallel for schedule(static) if (total > 65536)
  for (int64_t i = 0; i < total; ++i) po[i] = pa[i] + pb[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](AgNode<T>& n) {
    if (an->requires_grad) axpy(n.grad.numel(), T(1), n.grad.data(), pgrad(an).data());
    if (bn->requires_grad) axpy(n.grad.numel(), T(1), n.grad.data(), pgrad(bn).data());
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] - b.val()[i];
  auto an = a.node(), bn = b.node();
  return make_op<T>(std::move(out), {a, b}, [an, bn](AgNode<T>& n) {
    if (an->requires_grad) axpy(n.grad.numel(), T(1), n.grad.data(), pgrad(an).data());
    if (bn->requires_grad) axpy(n.grad.numel(), T(-1), n.grad.data(), pgrad(bn).data());
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
  auto an = a.node(), bn = b.node();
  Tensor<T> av = a.val(), bv = b.val();
  return make_op<T>(std::move(out), {a, b}, [an, bn, av, bv](AgNode<T>& n) {
    if (an->requires_grad) {
      T* g = pgrad(an).data();
      for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (bn->requires_grad) {
      T* g = pgrad(bn).data();
      for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "div");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] / b.val()[i];
  auto an = a.node(), bn = b.node();
  Tensor<T> av = a.val(), bv = b.val();
  return make_op<T>(std::move(out), {a, b}, [an, bn, av, bv](AgNode<T>& n) {
    if (an->requires_grad) {
      T* g = pgrad(an).data();
      for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] / bv[i];
    }
    if (bn->requires_grad) {
      T* g = pgrad(bn).data();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        g[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <class T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "minimum");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(a.val()[i], b.val()[i]);
  auto an = a.node(), bn = b.node();
  Tensor<T> av = a.val(), bv = b.val();
  return make_op<T>(std::move(out), {a, b}, [an, bn, av, bv](AgNode<T>& n) {
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      if (av[i] <= bv[i]) {
        if (an->requires_grad) pgrad(an)[i] += n.grad[i];
      } else if (bn->requires_grad) {
        pgrad(bn)[i] += n.grad[i];
      }
    }
  });
}

template <class T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "maximum");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(a.val()[i], b.val()[i]);
  auto an = a.node(), bn = b.node();
  Tensor<T> av = a.val(), bv = b.val();
  return make_op<T>(std::move(out), {a, b}, [an, bn, av, bv](AgNode<T>& n) {
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      if (av[i] >= bv[i]) {
        if (an->requires_grad) pgrad(an)[i] += n.grad[i];
      } else if (bn->requires_grad) {
        pgrad(bn)[i] += n.grad[i];
      }
    }
  });
}

template <class T>
Var<T> scalar_mul(const Var<T>& a, T c) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * c;
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, c](AgNode<T>& n) {
    axpy(n.grad.numel(), c, n.grad.data(), pgrad(an).data());
  });
}

template <class T>
Var<T> scalar_add(const Var<T>& a, T c) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] + c;
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an](AgNode<T>& n) {
    axpy(n.grad.numel(), T(1), n.grad.data(), pgrad(an).data());
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const T* pa = a.val().data();
  T* po = out.data();
  int64_t total = out.numel();
#pragma omp parallel for schedule(static) if (total > 65536)
  for (int64_t i = 0; i < total; ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  auto an = a.node();
  Tensor<T> y = out;
  return make_op<T>(std::move(out), {a}, [an, y](AgNode<T>& n) {
    T* g = pgrad(an).data();
    const T* gy = n.grad.data();
    const T* yv = y.data();
    int64_t total = n.grad.numel();
#pragma omp parallel for schedule(static) if (total > 65536)
    for (int64_t i = 0; i < total; ++i)
      if (yv[i] > T(0)) g[i] += gy[i];
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    T x = a.val()[i];
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                       : std::exp(x) / (T(1) + std::exp(x));
  }
  auto an = a.node();
  Tensor<T> y = out;
  return make_op<T>(std::move(out), {a}, [an, y](AgNode<T>& n) {
    T* g = pgrad(an).data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * y[i] * (T(1) - y[i]);
  });
}

// log(sigmoid(x)) = -softplus(-x), numerically stable for both tails.
template <class T>
Var<T> logsigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    T x = a.val()[i];
    out[i] = x >= T(0) ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
  }
  auto an = a.node();
  Tensor<T> av = a.val();
  return make_op<T>(std::move(out), {a}, [an, av](AgNode<T>& n) {
    T* g = pgrad(an).data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      T x = av[i];
      T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      g[i] += n.grad[i] * (T(1) - s);
    }
  });
}

template <class T>
Var<T> exp_(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(a.val()[i]);
  auto an = a.node();
  Tensor<T> y = out;
  return make_op<T>(std::move(out), {a}, [an, y](AgNode<T>& n) {
    T* g = pgrad(an).data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * y[i];
  });
}

template <class T>
Var<T> log_(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(a.val()[i]);
  auto an = a.node();
  Tensor<T> av = a.val();
  return make_op<T>(std::move(out), {a}, [an, av](AgNode<T>& n) {
    T* g = pgrad(an).data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] / av[i];
  });
}

template <class T>
Var<T> sqrt_(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(a.val()[i]);
  auto an = a.node();
  Tensor<T> y = out;
  return make_op<T>(std::move(out), {a}, [an, y](AgNode<T>& n) {
    T* g = pgrad(an).data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] / (T(2) * y[i]);
  });
}

template <class T>
Var<T> abs_(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(a.val()[i]);
  auto an = a.node();
  Tensor<T> av = a.val();
  return make_op<T>(std::move(out), {a}, [an, av](AgNode<T>& n) {
    T* g = pgrad(an).data();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      g[i] += av[i] >= T(0) ? n.grad[i] : -n.grad[i];
  });
}

template <class T>
Var<T> pow_scalar(const Var<T>& a, T p) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::pow(a.val()[i], p);
  auto an = a.node();
  Tensor<T> av = a.val();
  return make_op<T>(std::move(out), {a}, [an, av, p](AgNode<T>& n) {
    T* g = pgrad(an).data();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      g[i] += n.grad[i] * p * std::pow(av[i], p - T(1));
  });
}

template <class T>
Var<T> clamp_scalar(const Var<T>& a, T lo, T hi) {
  check_arg(lo < hi, "clamp_scalar: lo must be < hi");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(std::max(a.val()[i], lo), hi);
  auto an = a.node();
  Tensor<T> av = a.val();
  return make_op<T>(std::move(out), {a}, [an, av, lo, hi](AgNode<T>& n) {
    T* g = pgrad(an).data();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (av[i] > lo && av[i] < hi) g[i] += n.grad[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a.val()[i];
  auto an = a.node();
  return make_op<T>(Tensor<T>::scalar(s), {a}, [an](AgNode<T>& n) {
    T g = n.grad[0];
    T* pg = pgrad(an).data();
    for (int64_t i = 0; i < an->value.numel(); ++i) pg[i] += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  check_arg(a.numel() > 0, "mean: empty tensor");
  return scalar_mul(sum(a), T(1) / T(a.numel()));
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check_arg(a.shape().size() == 2 && b.shape().size() == 2 && a.size(1) == b.size(0),
            "matmul: bad shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t m = a.size(0), k = a.size(1), nn = b.size(1);
  Tensor<T> out({m, nn});
  gemm(false, false, m, nn, k, T(1), a.val().data(), b.val().data(), T(0), out.data());
  auto an = a.node(), bn = b.node();
  Tensor<T> av = a.val(), bv = b.val();
  return make_op<T>(std::move(out), {a, b}, [an, bn, av, bv, m, k, nn](AgNode<T>& n) {
    if (an->requires_grad)
      gemm(false, true, m, k, nn, T(1), n.grad.data(), bv.data(), T(1), pgrad(an).data());
    if (bn->requires_grad)
      gemm(true, false, k, nn, m, T(1), av.data(), n.grad.data(), T(1), pgrad(bn).data());
  });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  check_arg(x.shape().size() == 2 && w.shape().size() == 2 && x.size(1) == w.size(1),
            "linear: bad shapes " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  int64_t n = x.size(0), k = x.size(1), d = w.size(0);
  Tensor<T> out({n, d});
  gemm(false, true, n, d, k, T(1), x.val().data(), w.val().data(), T(0), out.data());
  bool has_bias = b.defined();
  if (has_bias) {
    check_arg(b.numel() == d, "linear: bias size mismatch");
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) out.at(i, j) += b.val()[j];
  }
  std::vector<Var<T>> parents = {x, w};
  if (has_bias) parents.push_back(b);
  auto xn = x.node(), wn = w.node();
  auto bnn = has_bias ? b.node() : nullptr;
  Tensor<T> xv = x.val(), wv = w.val();
  return make_op<T>(std::move(out), parents, [xn, wn, bnn, xv, wv, n, k, d](AgNode<T>& g) {
    if (xn->requires_grad)
      gemm(false, false, n, k, d, T(1), g.grad.data(), wv.data(), T(1), pgrad(xn).data());
    if (wn->requires_grad)
      gemm(true, false, d, k, n, T(1), g.grad.data(), xv.data(), T(1), pgrad(wn).data());
    if (bnn && bnn->requires_grad) {
      T* gb = pgrad(bnn).data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) gb[j] += g.grad.at(i, j);
    }
  });
}

template <class T>
Var<T> transpose2d(const Var<T>& a) {
  check_arg(a.shape().size() == 2, "transpose2d: need 2-d");
  int64_t m = a.size(0), n = a.size(1);
  Tensor<T> out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(j, i) = a.val().at(i, j);
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, m, n](AgNode<T>& g) {
    Tensor<T>& pg = pgrad(an);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) pg.at(i, j) += g.grad.at(j, i);
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, std::vector<int64_t> shape) {
  Tensor<T> out = a.val().clone().reshape(std::move(shape));
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an](AgNode<T>& g) {
    axpy(g.grad.numel(), T(1), g.grad.data(), pgrad(an).data());
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  check_arg(!parts.empty(), "concat_rows: empty");
  int64_t cols = parts[0].size(1), rows = 0;
  for (const auto& p : parts) {
    check_arg(p.shape().size() == 2 && p.size(1) == cols, "concat_rows: column mismatch");
    rows += p.size(0);
  }
  Tensor<T> out({rows, cols});
  int64_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.val().data(), p.val().data() + p.numel(), out.data() + r * cols);
    r += p.size(0);
  }
  std::vector<std::shared_ptr<AgNode<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op<T>(std::move(out), parts, [nodes, cols](AgNode<T>& g) {
    int64_t r = 0;
    for (const auto& pn : nodes) {
      int64_t nr = pn->value.size(0);
      if (pn->requires_grad)
        axpy(nr * cols, T(1), g.grad.data() + r * cols, pgrad(pn).data());
      r += nr;
    }
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  check_arg(!parts.empty(), "concat_cols: empty");
  int64_t rows = parts[0].size(0), cols = 0;
  for (const auto& p : parts) {
    check_arg(p.shape().size() == 2 && p.size(0) == rows, "concat_cols: row mismatch");
    cols += p.size(1);
  }
  Tensor<T> out({rows, cols});
  int64_t c0 = 0;
  for (const auto& p : parts) {
    int64_t pc = p.size(1);
    for (int64_t i = 0; i < rows; ++i)
      std::copy(p.val().data() + i * pc, p.val().data() + (i + 1) * pc,
                out.data() + i * cols + c0);
    c0 += pc;
  }
  std::vector<std::shared_ptr<AgNode<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op<T>(std::move(out), parts, [nodes, rows, cols](AgNode<T>& g) {
    int64_t c0 = 0;
    for (const auto& pn : nodes) {
      int64_t pc = pn->value.size(1);
      if (pn->requires_grad) {
        T* pg = pgrad(pn).data();
        for (int64_t i = 0; i < rows; ++i)
          axpy(pc, T(1), g.grad.data() + i * cols + c0, pg + i * pc);
      }
      c0 += pc;
    }
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, int64_t begin, int64_t len) {
  check_arg(a.shape().size() == 2 && begin >= 0 && begin + len <= a.size(0),
            "slice_rows: out of range");
  int64_t cols = a.size(1);
  Tensor<T> out({len, cols});
  std::copy(a.val().data() + begin * cols, a.val().data() + (begin + len) * cols, out.data());
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, begin, cols, len](AgNode<T>& g) {
    axpy(len * cols, T(1), g.grad.data(), pgrad(an).data() + begin * cols);
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, int64_t begin, int64_t len) {
  check_arg(a.shape().size() == 2 && begin >= 0 && begin + len <= a.size(1),
            "slice_cols: out of range");
  int64_t rows = a.size(0), cols = a.size(1);
  Tensor<T> out({rows, len});
  for (int64_t i = 0; i < rows; ++i)
    std::copy(a.val().data() + i * cols + begin, a.val().data() + i * cols + begin + len,
              out.data() + i * len);
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, begin, rows, cols, len](AgNode<T>& g) {
    T* pg = pgrad(an).data();
    for (int64_t i = 0; i < rows; ++i)
      axpy(len, T(1), g.grad.data() + i * len, pg + i * cols + begin);
  });
}

template <class T>
Var<T> gather_rows(const Var<T>& a, const std::vector<int64_t>& idx) {
  check_arg(a.shape().size() == 2, "gather_rows: need 2-d");
  int64_t cols = a.size(1), rows = a.size(0);
  Tensor<T> out({(int64_t)idx.size(), cols});
  for (size_t i = 0; i < idx.size(); ++i) {
    check_arg(idx[i] >= 0 && idx[i] < rows, "gather_rows: index out of range");
    std::copy(a.val().data() + idx[i] * cols, a.val().data() + (idx[i] + 1) * cols,
              out.data() + i * cols);
  }
  auto an = a.node();
  return make_op<T>(std::move(out), {a}, [an, idx, cols](AgNode<T>& g) {
    T* pg = pgrad(an).data();
    for (size_t i = 0; i < idx.size(); ++i)
      axpy(cols, T(1), g.grad.data() + i * cols, pg + idx[i] * cols);
  });
}

template <class T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& v) {
  check_arg(x.shape().size() == 2 && v.numel() == x.size(1), "add_rowvec: shape mismatch");
  int64_t n = x.size(0), d = x.size(1);
  Tensor<T> out({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out.at(i, j) = x.val().at(i, j) + v.val()[j];
  auto xn = x.node(), vn = v.node();
  return make_op<T>(std::move(out), {x, v}, [xn, vn, n, d](AgNode<T>& g) {
    if (xn->requires_grad) axpy(n * d, T(1), g.grad.data(), pgrad(xn).data());
    if (vn->requires_grad) {
      T* pg = pgrad(vn).data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) pg[j] += g.grad.at(i, j);
    }
  });
}

template <class T>
Var<T> mul_rowvec(const Var<T>& x, const Var<T>& v) {
  check_arg(x.shape().size() == 2 && v.numel() == x.size(1), "mul_rowvec: shape mismatch");
  int64_t n = x.size(0), d = x.size(1);
  Tensor<T> out({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out.at(i, j) = x.val().at(i, j) * v.val()[j];
  auto xn = x.node(), vn = v.node();
  Tensor<T> xv = x.val(), vv = v.val();
  return make_op<T>(std::move(out), {x, v}, [xn, vn, xv, vv, n, d](AgNode<T>& g) {
    if (xn->requires_grad) {
      T* pg = pgrad(xn).data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) pg[i * d + j] += g.grad.at(i, j) * vv[j];
    }
    if (vn->requires_grad) {
      T* pg = pgrad(vn).data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) pg[j] += g.grad.at(i, j) * xv.at(i, j);
    }
  });
}

template <class T>
Var<T> mul_colvec(const Var<T>& x, const Var<T>& v) {
  check_arg(x.shape().size() == 2 && v.numel() == x.size(0), "mul_colvec: shape mismatch");
  int64_t n = x.size(0), d = x.size(1);
  Tensor<T> out({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out.at(i, j) = x.val().at(i, j) * v.val()[i];
  auto xn = x.node(), vn = v.node();
  Tensor<T> xv = x.val(), vv = v.val();
  return make_op<T>(std::move(out), {x, v}, [xn, vn, xv, vv, n, d](AgNode<T>& g) {
    if (xn->requires_grad) {
      T* pg = pgrad(xn).data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) pg[i * d + j] += g.grad.at(i, j) * vv[i];
    }
    if (vn->requires_grad) {
      T* pg = pgrad(vn).data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) pg[i] += g.grad.at(i, j) * xv.at(i, j);
    }
  });
}

template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  check_arg(a.shape().size() == 2, "softmax_rows: need 2-d");
  int64_t n = a.size(0), d = a.size(1);
  Tensor<T> out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    T mx = a.val().at(i, 0);
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, a.val().at(i, j));
    T z = 0;
    for (int64_t j = 0; j < d; ++j) {
      out.at(i, j) = std::exp(a.val().at(i, j) - mx);
      z += out.at(i, j);
    }
    for (int64_t j = 0; j < d; ++j) out.at(i, j) /= z;
  }
  auto an = a.node();
  Tensor<T> y = out;
  return make_op<T>(std::move(out), {a}, [an, y, n, d](AgNode<T>& g) {
    T* pg = pgrad(an).data();
    for (int64_t i = 0; i < n; ++i) {
      T dot = 0;
      for (int64_t j = 0; j < d; ++j) dot += g.grad.at(i, j) * y.at(i, j);
      for (int64_t j = 0; j < d; ++j)
        pg[i * d + j] += y.at(i, j) * (g.grad.at(i, j) - dot);
    }
  });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  check_arg(x.shape().size() == 2, "layer_norm: need 2-d");
  int64_t n = x.size(0), d = x.size(1);
  check_arg(gamma.numel() == d && beta.numel() == d, "layer_norm: affine size mismatch");
  Tensor<T> out({n, d}), xhat({n, d}), inv_std({n});
  for (int64_t i = 0; i < n; ++i) {
    T mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += x.val().at(i, j);
    mu /= T(d);
    T var = 0;
    for (int64_t j = 0; j < d; ++j) {
      T c = x.val().at(i, j) - mu;
      var += c * c;
    }
    var /= T(d);
    T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (int64_t j = 0; j < d; ++j) {
      xhat.at(i, j) = (x.val().at(i, j) - mu) * is;
      out.at(i, j) = xhat.at(i, j) * gamma.val()[j] + beta.val()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  Tensor<T> gv = gamma.val();
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [xn, gn, bn, gv, xhat, inv_std, n, d](AgNode<T>& g) {
    for (int64_t i = 0; i < n; ++i) {
      if (xn->requires_grad) {
        T m1 = 0, m2 = 0;
        for (int64_t j = 0; j < d; ++j) {
          T dxh = g.grad.at(i, j) * gv[j];
          m1 += dxh;
          m2 += dxh * xhat.at(i, j);
        }
        m1 /= T(d);
        m2 /= T(d);
        T* pg = pgrad(xn).data() + i * d;
        for (int64_t j = 0; j < d; ++j) {
          T dxh = g.grad.at(i, j) * gv[j];
          pg[j] += inv_std[i] * (dxh - m1 - xhat.at(i, j) * m2);
        }
      }
      if (gn->requires_grad) {
        T* pg = pgrad(gn).data();
        for (int64_t j = 0; j < d; ++j) pg[j] += g.grad.at(i, j) * xhat.at(i, j);
      }
      if (bn->requires_grad) {
        T* pg = pgrad(bn).data();
        for (int64_t j = 0; j < d; ++j) pg[j] += g.grad.at(i, j);
      }
    }
  });
}

template <class T>
void im2col(const T* src, int64_t c, int64_t h, int64_t w, int kh, int kw, int stride, int pad,
            T* col) {
  int64_t oh = conv_out_size(h, kh, stride, pad), ow = conv_out_size(w, kw, stride, pad);
#pragma omp parallel for schedule(static) if (c * oh * ow > 16384)
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* dst = col + ((ch * kh + ki) * kw + kj) * oh * ow;
        for (int64_t oi = 0; oi < oh; ++oi) {
          int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) {
            std::fill(dst + oi * ow, dst + (oi + 1) * ow, T(0));
            continue;
          }
          const T* srow = src + (ch * h + ii) * w;
          for (int64_t oj = 0; oj < ow; ++oj) {
            int64_t jj = oj * stride - pad + kj;
            dst[oi * ow + oj] = (jj >= 0 && jj < w) ? srow[jj] : T(0);
          }
        }
      }
    }
  }
}

// Accumulates into dst (caller zeroes it first).
template <class T>
void col2im(const T* col, int64_t c, int64_t h, int64_t w, int kh, int kw, int stride, int pad,
            T* dst) {
  int64_t oh = conv_out_size(h, kh, stride, pad), ow = conv_out_size(w, kw, stride, pad);
#pragma omp parallel for schedule(static) if (c * oh * ow > 16384)
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* srow = col + ((ch * kh + ki) * kw + kj) * oh * ow;
        for (int64_t oi = 0; oi < oh; ++oi) {
          int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          T* drow = dst + (ch * h + ii) * w;
          for (int64_t oj = 0; oj < ow; ++oj) {
            int64_t jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < w) drow[jj] += srow[oi * ow + oj];
          }
        }
      }
    }
  }
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  check_arg(x.shape().size() == 4 && w.shape().size() == 4, "conv2d: need NCHW x and OIHW w");
  int64_t n = x.size(0), ic = x.size(1), h = x.size(2), ww = x.size(3);
  int64_t oc = w.size(0);
  int kh = (int)w.size(2), kw = (int)w.size(3);
  check_arg(w.size(1) == ic, "conv2d: channel mismatch");
  int64_t oh = conv_out_size(h, kh, stride, pad), ow = conv_out_size(ww, kw, stride, pad);
  check_arg(oh >= 1 && ow >= 1, "conv2d: input spatial size too small");
  bool is_1x1 = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
  int64_t ck = ic * kh * kw, sp = oh * ow;

  Tensor<T> out({n, oc, oh, ow});
  T* col = is_1x1 ? nullptr : scratch<T>(ck * sp);
  for (int64_t im = 0; im < n; ++im) {
    const T* src = x.val().data() + im * ic * h * ww;
    const T* cc = src;
    if (!is_1x1) {
      im2col(src, ic, h, ww, kh, kw, stride, pad, col);
      cc = col;
    }
    gemm(false, false, oc, sp, ck, T(1), w.val().data(), cc, T(0),
         out.data() + im * oc * sp);
  }
  bool has_bias = b.defined();
  if (has_bias) {
    check_arg(b.numel() == oc, "conv2d: bias size mismatch");
    for (int64_t im = 0; im < n; ++im)
      for (int64_t c = 0; c < oc; ++c) {
        T bv = b.val()[c];
        T* dst = out.data() + (im * oc + c) * sp;
        for (int64_t i = 0; i < sp; ++i) dst[i] += bv;
      }
  }

  std::vector<Var<T>> parents = {x, w};
  if (has_bias) parents.push_back(b);
  auto xn = x.node(), wn = w.node();
  auto bn = has_bias ? b.node() : nullptr;
  Tensor<T> xv = x.val(), wv = w.val();
  int64_t dims[6] = {n, ic, h, ww, oc, sp};
  return make_op<T>(std::move(out), parents,
                    [xn, wn, bn, xv, wv, dims, kh, kw, stride, pad, ck, is_1x1](AgNode<T>& g) {
    auto [n, ic, h, ww, oc, sp] = std::tuple(dims[0], dims[1], dims[2], dims[3], dims[4], dims[5]);
    T* col = is_1x1 ? nullptr : scratch<T>(ck * sp);
    for (int64_t im = 0; im < n; ++im) {
      const T* gy = g.grad.data() + im * oc * sp;
      const T* src = xv.data() + im * ic * h * ww;
      if (wn->requires_grad) {
        const T* cc = src;
        if (!is_1x1) {
          im2col(src, ic, h, ww, kh, kw, stride, pad, col);
          cc = col;
        }
        gemm(false, true, oc, ck, sp, T(1), gy, cc, T(1), pgrad(wn).data());
      }
      if (xn->requires_grad) {
        T* gx = pgrad(xn).data() + im * ic * h * ww;
        if (is_1x1) {
          gemm(true, false, ck, sp, oc, T(1), wv.data(), gy, T(1), gx);
        } else {
          gemm(true, false, ck, sp, oc, T(1), wv.data(), gy, T(0), col);
          col2im(col, ic, h, ww, kh, kw, stride, pad, gx);
        }
      }
      if (bn && bn->requires_grad) {
        T* gb = pgrad(bn).data();
        for (int64_t c = 0; c < oc; ++c) {
          T s = 0;
          for (int64_t i = 0; i < sp; ++i) s += gy[c * sp + i];
          gb[c] += s;
        }
      }
    }
  });
}

template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad,
                        int out_pad) {
  check_arg(x.shape().size() == 4 && w.shape().size() == 4,
            "conv_transpose2d: need NCHW x and IOHW w");
  int64_t n = x.size(0), ic = x.size(1), h = x.size(2), ww = x.size(3);
  check_arg(w.size(0) == ic, "conv_transpose2d: channel mismatch");
  int64_t oc = w.size(1);
  int kh = (int)w.size(2), kw = (int)w.size(3);
  check_arg(out_pad < stride, "conv_transpose2d: out_pad must be < stride");
  int64_t oh = (h - 1) * stride - 2 * pad + kh + out_pad;
  int64_t ow = (ww - 1) * stride - 2 * pad + kw + out_pad;
  check_arg(oh >= 1 && ow >= 1, "conv_transpose2d: degenerate output");
  // The forward pass is the input-gradient of a conv whose input is the
  // transpose output: conv_out_size(oh) == h holds for any out_pad < stride,
  // so the plain im2col/col2im geometry applies with (oh, ow) as the image.
  int64_t ck = oc * kh * kw, sp_in = h * ww, sp_out = oh * ow;
  Tensor<T> out({n, oc, oh, ow});
  out.zero_();
  T* col = scratch<T>(ck * sp_in);
  for (int64_t im = 0; im < n; ++im) {
    const T* src = x.val().data() + im * ic * sp_in;
    gemm(true, false, ck, sp_in, ic, T(1), w.val().data(), src, T(0), col);
    col2im(col, oc, oh, ow, kh, kw, stride, pad, out.data() + im * oc * sp_out);
  }
  bool has_bias = b.defined();
  if (has_bias) {
    check_arg(b.numel() == oc, "conv_transpose2d: bias size mismatch");
    for (int64_t im = 0; im < n; ++im)
      for (int64_t c = 0; c < oc; ++c) {
        T bv = b.val()[c];
        T* dst = out.data() + (im * oc + c) * sp_out;
        for (int64_t i = 0; i < sp_out; ++i) dst[i] += bv;
      }
  }

  std::vector<Var<T>> parents = {x, w};
  if (has_bias) parents.push_back(b);
  auto xn = x.node(), wn = w.node();
  auto bn = has_bias ? b.node() : nullptr;
  Tensor<T> xv = x.val(), wv = w.val();
  int64_t dims[7] = {n, ic, h, ww, oc, oh, ow};
  return make_op<T>(std::move(out), parents,
                    [xn, wn, bn, xv, wv, dims, kh, kw, stride, pad, ck](AgNode<T>& g) {
    auto [n, ic, h, ww, oc, oh, ow] =
        std::tuple(dims[0], dims[1], dims[2], dims[3], dims[4], dims[5], dims[6]);
    int64_t sp_in = h * ww, sp_out = oh * ow;
    T* col = scratch<T>(ck * sp_in);
    for (int64_t im = 0; im < n; ++im) {
      const T* gy = g.grad.data() + im * oc * sp_out;
      im2col(gy, oc, oh, ow, kh, kw, stride, pad, col);
      if (xn->requires_grad)
        gemm(false, false, ic, sp_in, ck, T(1), wv.data(), col, T(1),
             pgrad(xn).data() + im * ic * sp_in);
      if (wn->requires_grad)
        gemm(false, true, ic, ck, sp_in, T(1), xv.data() + im * ic * sp_in, col, T(1),
             pgrad(wn).data());
      if (bn && bn->requires_grad) {
        T* gb = pgrad(bn).data();
        for (int64_t c = 0; c < oc; ++c) {
          T s = 0;
          for (int64_t i = 0; i < sp_out; ++i) s += gy[c * sp_out + i];
          gb[c] += s;
        }
      }
    }
  });
}

template <class T>
Var<T> maxpool2d(const Var<T>& x, int kernel, int stride, int pad) {
  check_arg(x.shape().size() == 4, "maxpool2d: need NCHW");
  int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  int64_t oh = conv_out_size(h, kernel, stride, pad), ow = conv_out_size(w, kernel, stride, pad);
  check_arg(oh >= 1 && ow >= 1, "maxpool2d: input too small");
  Tensor<T> out({n, c, oh, ow});
  Tensor<int64_t> arg({n, c, oh, ow});
#pragma omp parallel for schedule(static) collapse(2)
  for (int64_t im = 0; im < n; ++im)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = x.val().data() + (im * c + ch) * h * w;
      for (int64_t oi = 0; oi < oh; ++oi)
        for (int64_t oj = 0; oj < ow; ++oj) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t bidx = -1;
          for (int ki = 0; ki < kernel; ++ki) {
            int64_t ii = oi * stride - pad + ki;
            if (ii < 0 || ii >= h) continue;
            for (int kj = 0; kj < kernel; ++kj) {
              int64_t jj = oj * stride - pad + kj;
              if (jj < 0 || jj >= w) continue;
              if (src[ii * w + jj] > best) {
                best = src[ii * w + jj];
                bidx = ii * w + jj;
              }
            }
          }
          out.at(im, ch, oi, oj) = bidx < 0 ? T(0) : best;
          arg.at(im, ch, oi, oj) = bidx;
        }
    }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, arg, n, c, h, w](AgNode<T>& g) {
    T* pg = pgrad(xn).data();
    int64_t sp = g.grad.size(2) * g.grad.size(3);
    for (int64_t im = 0; im < n; ++im)
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t* ai = arg.data() + (im * c + ch) * sp;
        const T* gy = g.grad.data() + (im * c + ch) * sp;
        T* gx = pg + (im * c + ch) * h * w;
        for (int64_t i = 0; i < sp; ++i)
          if (ai[i] >= 0) gx[ai[i]] += gy[i];
      }
  });
}

template <class T>
Var<T> channel_affine(const Var<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  check_arg(x.shape().size() == 4, "channel_affine: need NCHW");
  int64_t n = x.size(0), c = x.size(1), sp = x.size(2) * x.size(3);
  check_arg(scale.numel() == c && shift.numel() == c, "channel_affine: size mismatch");
  Tensor<T> out(x.shape());
#pragma omp parallel for schedule(static) collapse(2)
  for (int64_t im = 0; im < n; ++im)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = x.val().data() + (im * c + ch) * sp;
      T* dst = out.data() + (im * c + ch) * sp;
      T s = scale[ch], sh = shift[ch];
      for (int64_t i = 0; i < sp; ++i) dst[i] = src[i] * s + sh;
    }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, scale, n, c, sp](AgNode<T>& g) {
    T* pg = pgrad(xn).data();
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t im = 0; im < n; ++im)
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* gy = g.grad.data() + (im * c + ch) * sp;
        T* gx = pg + (im * c + ch) * sp;
        T s = scale[ch];
        for (int64_t i = 0; i < sp; ++i) gx[i] += gy[i] * s;
      }
  });
}

template <class T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s) {
  check_arg(x.shape().size() == 4 && s.shape().size() == 2 && s.size(0) == x.size(0) &&
                s.size(1) == x.size(1),
            "scale_channels: shape mismatch");
  int64_t n = x.size(0), c = x.size(1), sp = x.size(2) * x.size(3);
  Tensor<T> out(x.shape());
  for (int64_t im = 0; im < n; ++im)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = x.val().data() + (im * c + ch) * sp;
      T* dst = out.data() + (im * c + ch) * sp;
      T sc = s.val().at(im, ch);
      for (int64_t i = 0; i < sp; ++i) dst[i] = src[i] * sc;
    }
  auto xn = x.node(), sn = s.node();
  Tensor<T> xv = x.val(), sv = s.val();
  return make_op<T>(std::move(out), {x, s}, [xn, sn, xv, sv, n, c, sp](AgNode<T>& g) {
    for (int64_t im = 0; im < n; ++im)
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* gy = g.grad.data() + (im * c + ch) * sp;
        if (xn->requires_grad) {
          T* gx = pgrad(xn).data() + (im * c + ch) * sp;
          T sc = sv.at(im, ch);
          for (int64_t i = 0; i < sp; ++i) gx[i] += gy[i] * sc;
        }
        if (sn->requires_grad) {
          const T* src = xv.data() + (im * c + ch) * sp;
          T acc = 0;
          for (int64_t i = 0; i < sp; ++i) acc += gy[i] * src[i];
          pgrad(sn).at(im, ch) += acc;
        }
      }
  });
}

namespace {

// Half-pixel source coordinates with edge clamping; identical sizes map to
// the identity.
template <class T>
void bilinear_axis(int64_t in, int64_t out, std::vector<int64_t>& i0, std::vector<int64_t>& i1,
                   std::vector<T>& w1) {
  i0.resize(out);
  i1.resize(out);
  w1.resize(out);
  for (int64_t o = 0; o < out; ++o) {
    double s = (o + 0.5) * double(in) / double(out) - 0.5;
    s = std::min(std::max(s, 0.0), double(in - 1));
    int64_t a = (int64_t)std::floor(s);
    i0[o] = a;
    i1[o] = std::min(a + 1, in - 1);
    w1[o] = T(s - a);
  }
}

}  // namespace

template <class T>
Var<T> bilinear_resize(const Var<T>& x, int64_t out_h, int64_t out_w) {
  check_arg(x.shape().size() == 4, "bilinear_resize: need NCHW");
  check_arg(out_h >= 1 && out_w >= 1, "bilinear_resize: bad target size");
  int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  std::vector<int64_t> y0, y1, x0, x1;
  std::vector<T> wy, wx;
  bilinear_axis<T>(h, out_h, y0, y1, wy);
  bilinear_axis<T>(w, out_w, x0, x1, wx);
  Tensor<T> out({n, c, out_h, out_w});
#pragma omp parallel for schedule(static) collapse(2)
  for (int64_t im = 0; im < n; ++im)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = x.val().data() + (im * c + ch) * h * w;
      T* dst = out.data() + (im * c + ch) * out_h * out_w;
      for (int64_t oi = 0; oi < out_h; ++oi)
        for (int64_t oj = 0; oj < out_w; ++oj) {
          T a = src[y0[oi] * w + x0[oj]], b2 = src[y0[oi] * w + x1[oj]];
          T cc = src[y1[oi] * w + x0[oj]], d = src[y1[oi] * w + x1[oj]];
          T top = a + (b2 - a) * wx[oj], bot = cc + (d - cc) * wx[oj];
          dst[oi * out_w + oj] = top + (bot - top) * wy[oi];
        }
    }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x},
                    [xn, y0, y1, x0, x1, wy, wx, n, c, h, w, out_h, out_w](AgNode<T>& g) {
    T* pg = pgrad(xn).data();
    for (int64_t im = 0; im < n; ++im)
      for (int64_t ch = 0; ch < c; ++ch) {
        T* gx = pg + (im * c + ch) * h * w;
        const T* gy = g.grad.data() + (im * c + ch) * out_h * out_w;
        for (int64_t oi = 0; oi < out_h; ++oi)
          for (int64_t oj = 0; oj < out_w; ++oj) {
            T gv = gy[oi * out_w + oj];
            T v1 = wy[oi], v0 = T(1) - v1, u1 = wx[oj], u0 = T(1) - u1;
            gx[y0[oi] * w + x0[oj]] += gv * v0 * u0;
            gx[y0[oi] * w + x1[oj]] += gv * v0 * u1;
            gx[y1[oi] * w + x0[oj]] += gv * v1 * u0;
            gx[y1[oi] * w + x1[oj]] += gv * v1 * u1;
          }
      }
  });
}

template <class T>
Var<T> masked_avgpool(const Var<T>& x, const TensorB& mask) {
  check_arg(x.shape().size() == 4, "masked_avgpool: need NCHW");
  int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  check_arg(mask.shape() == std::vector<int64_t>({n, h, w}), "masked_avgpool: mask shape");
  std::vector<int64_t> cnt(n, 0);
  for (int64_t im = 0; im < n; ++im) {
    for (int64_t i = 0; i < h * w; ++i)
      if (!mask[im * h * w + i]) ++cnt[im];
    check_arg(cnt[im] > 0, "masked_avgpool: image " + std::to_string(im) + " is fully masked");
  }
  Tensor<T> out({n, c});
  for (int64_t im = 0; im < n; ++im)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = x.val().data() + (im * c + ch) * h * w;
      const uint8_t* m = mask.data() + im * h * w;
      T acc = 0;
      for (int64_t i = 0; i < h * w; ++i)
        if (!m[i]) acc += src[i];
      out.at(im, ch) = acc / T(cnt[im]);
    }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, mask, cnt, n, c, h, w](AgNode<T>& g) {
    T* pg = pgrad(xn).data();
    for (int64_t im = 0; im < n; ++im) {
      const uint8_t* m = mask.data() + im * h * w;
      for (int64_t ch = 0; ch < c; ++ch) {
        T gv = g.grad.at(im, ch) / T(cnt[im]);
        T* gx = pg + (im * c + ch) * h * w;
        for (int64_t i = 0; i < h * w; ++i)
          if (!m[i]) gx[i] += gv;
      }
    }
  });
}

template <class T>
Var<T> masked_maxpool(const Var<T>& x, const TensorB& mask) {
  check_arg(x.shape().size() == 4, "masked_maxpool: need NCHW");
  int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  check_arg(mask.shape() == std::vector<int64_t>({n, h, w}), "masked_maxpool: mask shape");
  Tensor<T> out({n, c});
  Tensor<int64_t> arg({n, c});
  for (int64_t im = 0; im < n; ++im) {
    const uint8_t* m = mask.data() + im * h * w;
    bool any = false;
    for (int64_t i = 0; i < h * w; ++i) any = any || !m[i];
    check_arg(any, "masked_maxpool: image " + std::to_string(im) + " is fully masked");
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = x.val().data() + (im * c + ch) * h * w;
      T best = -std::numeric_limits<T>::infinity();
      int64_t bidx = -1;
      for (int64_t i = 0; i < h * w; ++i)
        if (!m[i] && src[i] > best) {
          best = src[i];
          bidx = i;
        }
      out.at(im, ch) = best;
      arg.at(im, ch) = bidx;
    }
  }
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, arg, n, c, h, w](AgNode<T>& g) {
    T* pg = pgrad(xn).data();
    for (int64_t im = 0; im < n; ++im)
      for (int64_t ch = 0; ch < c; ++ch)
        pg[(im * c + ch) * h * w + arg.at(im, ch)] += g.grad.at(im, ch);
  });
}

template <class T>
Var<T> dropout(const Var<T>& x, double p, std::mt19937_64& gen) {
  if (p <= 0.0) return x;
  check_arg(p < 1.0, "dropout: p must be < 1");
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Tensor<T> keep(x.shape());
  T scale = T(1.0 / (1.0 - p));
  for (int64_t i = 0; i < keep.numel(); ++i) keep[i] = dist(gen) < p ? T(0) : scale;
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.val()[i] * keep[i];
  auto xn = x.node();
  return make_op<T>(std::move(out), {x}, [xn, keep](AgNode<T>& g) {
    T* pg = pgrad(xn).data();
    for (int64_t i = 0; i < g.grad.numel(); ++i) pg[i] += g.grad[i] * keep[i];
  });
}

#define LEUKODETR_INSTANTIATE_OPS(T)                                                        \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> div<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> minimum<T>(const Var<T>&, const Var<T>&);                                 \
  template Var<T> maximum<T>(const Var<T>&, const Var<T>&);                                 \
  template Var<T> scalar_mul<T>(const Var<T>&, T);                                          \
  template Var<T> scalar_add<T>(const Var<T>&, T);                                          \
  template Var<T> relu<T>(const Var<T>&);                                                   \
  template Var<T> sigmoid<T>(const Var<T>&);                                                \
  template Var<T> logsigmoid<T>(const Var<T>&);                                             \
  template Var<T> exp_<T>(const Var<T>&);                                                   \
  template Var<T> log_<T>(const Var<T>&);                                                   \
  template Var<T> sqrt_<T>(const Var<T>&);                                                  \
  template Var<T> abs_<T>(const Var<T>&);                                                   \
  template Var<T> pow_scalar<T>(const Var<T>&, T);                                          \
  template Var<T> clamp_scalar<T>(const Var<T>&, T, T);                                      \
  template Var<T> sum<T>(const Var<T>&);                                                    \
  template Var<T> mean<T>(const Var<T>&);                                                   \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                  \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                   \
  template Var<T> transpose2d<T>(const Var<T>&);                                            \
  template Var<T> reshape<T>(const Var<T>&, std::vector<int64_t>);                          \
  template Var<T> concat_rows<T>(const std::vector<Var<T>>&);                               \
  template Var<T> concat_cols<T>(const std::vector<Var<T>>&);                               \
  template Var<T> slice_rows<T>(const Var<T>&, int64_t, int64_t);                           \
  template Var<T> slice_cols<T>(const Var<T>&, int64_t, int64_t);                           \
  template Var<T> gather_rows<T>(const Var<T>&, const std::vector<int64_t>&);               \
  template Var<T> add_rowvec<T>(const Var<T>&, const Var<T>&);                              \
  template Var<T> mul_rowvec<T>(const Var<T>&, const Var<T>&);                              \
  template Var<T> mul_colvec<T>(const Var<T>&, const Var<T>&);                              \
  template Var<T> softmax_rows<T>(const Var<T>&);                                           \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);            \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);         \
  template Var<T> conv_transpose2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int,    \
                                      int, int);                                           \
  template Var<T> maxpool2d<T>(const Var<T>&, int, int, int);                               \
  template Var<T> channel_affine<T>(const Var<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Var<T> scale_channels<T>(const Var<T>&, const Var<T>&);                          \
  template Var<T> bilinear_resize<T>(const Var<T>&, int64_t, int64_t);                      \
  template Var<T> masked_avgpool<T>(const Var<T>&, const TensorB&);                         \
  template Var<T> masked_maxpool<T>(const Var<T>&, const TensorB&);                         \
  template Var<T> dropout<T>(const Var<T>&, double, std::mt19937_64&);                      \
  template void im2col<T>(const T*, int64_t, int64_t, int64_t, int, int, int, int, T*);     \
  template void col2im<T>(const T*, int64_t, int64_t, int64_t, int, int, int, int, T*);

LEUKODETR_INSTANTIATE_OPS(float)
LEUKODETR_INSTANTIATE_OPS(double)

}  // namespace ag

template void Var<float>::backward() const;
template void Var<double>::backward() const;

}  // namespace leukodetr
