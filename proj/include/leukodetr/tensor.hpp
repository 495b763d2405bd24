#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace leukodetr {

[[noreturn]] void fail(const std::string& msg);

inline void check_arg(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::string shape_str(const std::vector<int64_t>& shape);

// Dense row-major contiguous n-d array. Copies are shallow (shared storage);
// use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) { allocate(std::move(shape)); }

  static Tensor zeros(std::vector<int64_t> shape) {
    Tensor t(std::move(shape));
    t.zero_();
    return t;
  }

  static Tensor full(std::vector<int64_t> shape, T v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from(std::vector<int64_t> shape, const std::vector<T>& vals) {
    Tensor t(std::move(shape));
    check_arg(t.numel() == (int64_t)vals.size(), "Tensor::from: value count does not match shape");
    std::copy(vals.begin(), vals.end(), t.data());
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  int64_t numel() const { return numel_; }
  int rank() const { return (int)shape_.size(); }
  const std::vector<int64_t>& shape() const { return shape_; }

  int64_t size(int i) const {
    int r = rank();
    if (i < 0) i += r;
    check_arg(i >= 0 && i < r, "Tensor::size: axis out of range");
    return shape_[i];
  }

  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }

  T& operator[](int64_t i) { return data_.get()[i]; }
  const T& operator[](int64_t i) const { return data_.get()[i]; }

  T& at(int64_t i, int64_t j) { return data_.get()[i * shape_[1] + j]; }
  const T& at(int64_t i, int64_t j) const { return data_.get()[i * shape_[1] + j]; }
  T& at(int64_t i, int64_t j, int64_t k) {
    return data_.get()[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(int64_t i, int64_t j, int64_t k) const {
    return data_.get()[(i * shape_[1] + j) * shape_[2] + k];
  }
  T& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data_.get()[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  const T& at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data_.get()[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  // Shares storage; total element count must match. One axis may be -1.
  Tensor reshape(std::vector<int64_t> shape) const {
    int64_t known = 1;
    int infer = -1;
    for (int i = 0; i < (int)shape.size(); ++i) {
      if (shape[i] == -1) {
        check_arg(infer == -1, "reshape: at most one -1 axis");
        infer = i;
      } else {
        known *= shape[i];
      }
    }
    if (infer >= 0) {
      check_arg(known > 0 && numel_ % known == 0, "reshape: cannot infer axis");
      shape[infer] = numel_ / known;
      known *= shape[infer];
    }
    check_arg(known == numel_, "reshape: element count mismatch, have " + shape_str(shape_) +
                                   " want " + shape_str(shape));
    Tensor t;
    t.data_ = data_;
    t.shape_ = std::move(shape);
    t.numel_ = numel_;
    return t;
  }

  Tensor clone() const {
    Tensor t(shape_);
    std::copy(data(), data() + numel_, t.data());
    return t;
  }

  void fill(T v) {
    for (int64_t i = 0; i < numel_; ++i) data_.get()[i] = v;
  }
  void zero_() { fill(T(0)); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> t(shape_);
    for (int64_t i = 0; i < numel_; ++i) t[i] = static_cast<U>(data_.get()[i]);
    return t;
  }

 private:
  void allocate(std::vector<int64_t> shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      check_arg(d >= 0, "Tensor: negative dimension");
      n *= d;
    }
    shape_ = std::move(shape);
    numel_ = n;
    data_ = std::shared_ptr<T[]>(new T[std::max<int64_t>(n, 1)]);
  }

  std::shared_ptr<T[]> data_;
  std::vector<int64_t> shape_;
  int64_t numel_ = 0;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorB = Tensor<uint8_t>;

// C = alpha * op(A) [m,k] * op(B) [k,n] + beta * C, row-major.
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha,
          const float* a, const float* b, float beta, float* c);
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, double alpha,
          const double* a, const double* b, double beta, double* c);

}  // namespace leukodetr
