#pragma once

#include <random>
#include <string>
#include <vector>

#include "leukodetr/autograd.hpp"

namespace leukodetr {

// Deterministic seed tree: every consumer derives its generator from the run
// seed plus a path of names, so adding a consumer never shifts another's
// stream.
class SeedTree {
 public:
  explicit SeedTree(uint64_t seed) : seed_(seed) {}
  SeedTree child(const std::string& name) const;
  std::mt19937_64 generator() const { return std::mt19937_64(seed_); }
  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
};

namespace init {
template <class T> void constant_(Tensor<T>& t, T v);
template <class T> void normal_(Tensor<T>& t, T mean, T stddev, std::mt19937_64& gen);
template <class T> void uniform_(Tensor<T>& t, T lo, T hi, std::mt19937_64& gen);
template <class T> void xavier_uniform_(Tensor<T>& t, int64_t fan_in, int64_t fan_out,
                                        std::mt19937_64& gen);
template <class T> void kaiming_normal_(Tensor<T>& t, int64_t fan_in, std::mt19937_64& gen);
}  // namespace init

template <class T>
struct NamedParam {
  std::string name;
  Var<T>* var;
  // Optimizer group tag, filled by the detector ("backbone"/"fpn"/"transformer").
  std::string group;
};

template <class T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

template <class T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  void collect_parameters(const std::string& prefix, std::vector<NamedParam<T>>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out);
  std::vector<NamedParam<T>> named_parameters() {
    std::vector<NamedParam<T>> out;
    collect_parameters("", out);
    return out;
  }
  std::vector<NamedBuffer<T>> named_buffers() {
    std::vector<NamedBuffer<T>> out;
    collect_buffers("", out);
    return out;
  }
  int64_t parameter_count();

  void set_train(bool train);
  bool training() const { return training_; }

 protected:
  void register_parameter(const std::string& name, Var<T>& v);
  void register_buffer(const std::string& name, Tensor<T>& t);
  void register_child(const std::string& name, Module<T>& m);

 private:
  std::vector<std::pair<std::string, Var<T>*>> params_;
  std::vector<std::pair<std::string, Tensor<T>*>> buffers_;
  std::vector<std::pair<std::string, Module<T>*>> children_;
  bool training_ = false;
};

// Per-forward mutable context: train flag plus the RNG that feeds dropout.
struct ForwardCtx {
  bool train = false;
  std::mt19937_64* rng = nullptr;
};

template <class T>
class Linear : public Module<T> {
 public:
  Linear(int64_t in, int64_t out, bool bias, const SeedTree& seeds);
  Var<T> forward(const Var<T>& x) const { return ag::linear(x, weight, bias); }
  Var<T> weight, bias;
};

template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int64_t in, int64_t out, int kernel, int stride, int pad, bool bias,
         const SeedTree& seeds);
  Var<T> forward(const Var<T>& x) const { return ag::conv2d(x, weight, bias, stride_, pad_); }
  Var<T> weight, bias;

 private:
  int stride_, pad_;
};

template <class T>
class ConvTranspose2d : public Module<T> {
 public:
  ConvTranspose2d(int64_t in, int64_t out, int kernel, int stride, int pad, int out_pad,
                  bool bias, const SeedTree& seeds);
  Var<T> forward(const Var<T>& x) const {
    return ag::conv_transpose2d(x, weight, bias, stride_, pad_, out_pad_);
  }
  Var<T> weight, bias;

 private:
  int stride_, pad_, out_pad_;
};

// Batch norm with permanently frozen statistics and affine terms. Stats are
// plain buffers: they load from checkpoints but never train.
template <class T>
class FrozenBatchNorm2d : public Module<T> {
 public:
  explicit FrozenBatchNorm2d(int64_t channels);
  Var<T> forward(const Var<T>& x) const;
  Tensor<T> weight, bias, running_mean, running_var;
};

template <class T>
class LayerNorm : public Module<T> {
 public:
  explicit LayerNorm(int64_t dim);
  Var<T> forward(const Var<T>& x) const { return ag::layer_norm(x, gamma, beta, T(1e-5)); }
  Var<T> gamma, beta;
};

template <class T>
class Embedding : public Module<T> {
 public:
  Embedding(int64_t count, int64_t dim, const SeedTree& seeds);
  Var<T> weight;
};

// linear -> relu -> ... -> linear
template <class T>
class Mlp : public Module<T> {
 public:
  Mlp(int64_t in, int64_t hidden, int64_t out, int num_layers, const SeedTree& seeds);
  Var<T> forward(const Var<T>& x) const;
  std::vector<std::unique_ptr<Linear<T>>> layers;
};

}  // namespace leukodetr
