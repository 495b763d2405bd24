#include "leukodetr/nn.hpp"

#include <cmath>

namespace leukodetr {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

SeedTree SeedTree::child(const std::string& name) const {
  return SeedTree(splitmix64(seed_ ^ fnv1a(name)));
}

namespace init {

template <class T>
void constant_(Tensor<T>& t, T v) {
  t.fill(v);
}

template <class T>
void normal_(Tensor<T>& t, T mean, T stddev, std::mt19937_64& gen) {
  std::normal_distribution<double> dist(mean, stddev);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(dist(gen));
}

template <class T>
void uniform_(Tensor<T>& t, T lo, T hi, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(dist(gen));
}

template <class T>
void xavier_uniform_(Tensor<T>& t, int64_t fan_in, int64_t fan_out, std::mt19937_64& gen) {
  T bound = T(std::sqrt(6.0 / double(fan_in + fan_out)));
  uniform_(t, -bound, bound, gen);
}

template <class T>
void kaiming_normal_(Tensor<T>& t, int64_t fan_in, std::mt19937_64& gen) {
  normal_(t, T(0), T(std::sqrt(2.0 / double(fan_in))), gen);
}

#define LEUKODETR_INSTANTIATE_INIT(T)                                           \
  template void constant_<T>(Tensor<T>&, T);                                    \
  template void normal_<T>(Tensor<T>&, T, T, std::mt19937_64&);                 \
  template void uniform_<T>(Tensor<T>&, T, T, std::mt19937_64&);                \
  template void xavier_uniform_<T>(Tensor<T>&, int64_t, int64_t, std::mt19937_64&); \
  template void kaiming_normal_<T>(Tensor<T>&, int64_t, std::mt19937_64&);

LEUKODETR_INSTANTIATE_INIT(float)
LEUKODETR_INSTANTIATE_INIT(double)

}  // namespace init

template <class T>
void Module<T>::collect_parameters(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  for (auto& [name, var] : params_) out.push_back({prefix + name, var, ""});
  for (auto& [name, child] : children_) child->collect_parameters(prefix + name + ".", out);
}

template <class T>
void Module<T>::collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) {
  for (auto& [name, t] : buffers_) out.push_back({prefix + name, t});
  for (auto& [name, child] : children_) child->collect_buffers(prefix + name + ".", out);
}

template <class T>
int64_t Module<T>::parameter_count() {
  int64_t n = 0;
  for (const auto& p : named_parameters()) n += p.var->numel();
  return n;
}

template <class T>
void Module<T>::set_train(bool train) {
  training_ = train;
  for (auto& [name, child] : children_) child->set_train(train);
}

template <class T>
void Module<T>::register_parameter(const std::string& name, Var<T>& v) {
  params_.push_back({name, &v});
}

template <class T>
void Module<T>::register_buffer(const std::string& name, Tensor<T>& t) {
  buffers_.push_back({name, &t});
}

template <class T>
void Module<T>::register_child(const std::string& name, Module<T>& m) {
  children_.push_back({name, &m});
}

template <class T>
Linear<T>::Linear(int64_t in, int64_t out, bool bias, const SeedTree& seeds) {
  auto gen = seeds.generator();
  Tensor<T> w({out, in});
  init::xavier_uniform_(w, in, out, gen);
  weight = Var<T>(w, true);
  this->register_parameter("weight", weight);
  if (bias) {
    this->bias = Var<T>(Tensor<T>::zeros({out}), true);
    this->register_parameter("bias", this->bias);
  }
}

template <class T>
Conv2d<T>::Conv2d(int64_t in, int64_t out, int kernel, int stride, int pad, bool bias,
                  const SeedTree& seeds)
    : stride_(stride), pad_(pad) {
  auto gen = seeds.generator();
  Tensor<T> w({out, in, kernel, kernel});
  init::kaiming_normal_(w, in * kernel * kernel, gen);
  weight = Var<T>(w, true);
  this->register_parameter("weight", weight);
  if (bias) {
    this->bias = Var<T>(Tensor<T>::zeros({out}), true);
    this->register_parameter("bias", this->bias);
  }
}

template <class T>
ConvTranspose2d<T>::ConvTranspose2d(int64_t in, int64_t out, int kernel, int stride, int pad,
                                    int out_pad, bool bias, const SeedTree& seeds)
    : stride_(stride), pad_(pad), out_pad_(out_pad) {
  auto gen = seeds.generator();
  Tensor<T> w({in, out, kernel, kernel});
  init::kaiming_normal_(w, in * kernel * kernel, gen);
  weight = Var<T>(w, true);
  this->register_parameter("weight", weight);
  if (bias) {
    this->bias = Var<T>(Tensor<T>::zeros({out}), true);
    this->register_parameter("bias", this->bias);
  }
}

template <class T>
FrozenBatchNorm2d<T>::FrozenBatchNorm2d(int64_t channels) {
  weight = Tensor<T>::full({channels}, T(1));
  bias = Tensor<T>::zeros({channels});
  running_mean = Tensor<T>::zeros({channels});
  running_var = Tensor<T>::full({channels}, T(1));
  this->register_buffer("weight", weight);
  this->register_buffer("bias", bias);
  this->register_buffer("running_mean", running_mean);
  this->register_buffer("running_var", running_var);
}

template <class T>
Var<T> FrozenBatchNorm2d<T>::forward(const Var<T>& x) const {
  int64_t c = weight.numel();
  Tensor<T> scale({c}), shift({c});
  for (int64_t i = 0; i < c; ++i) {
    scale[i] = weight[i] / std::sqrt(running_var[i] + T(1e-5));
    shift[i] = bias[i] - running_mean[i] * scale[i];
  }
  return ag::channel_affine(x, scale, shift);
}

template <class T>
LayerNorm<T>::LayerNorm(int64_t dim) {
  gamma = Var<T>(Tensor<T>::full({dim}, T(1)), true);
  beta = Var<T>(Tensor<T>::zeros({dim}), true);
  this->register_parameter("weight", gamma);
  this->register_parameter("bias", beta);
}

template <class T>
Embedding<T>::Embedding(int64_t count, int64_t dim, const SeedTree& seeds) {
  auto gen = seeds.generator();
  Tensor<T> w({count, dim});
  init::normal_(w, T(0), T(1), gen);
  weight = Var<T>(w, true);
  this->register_parameter("weight", weight);
}

template <class T>
Mlp<T>::Mlp(int64_t in, int64_t hidden, int64_t out, int num_layers, const SeedTree& seeds) {
  check_arg(num_layers >= 1, "Mlp: need at least one layer");
  for (int i = 0; i < num_layers; ++i) {
    int64_t li = i == 0 ? in : hidden;
    int64_t lo = i == num_layers - 1 ? out : hidden;
    layers.push_back(
        std::make_unique<Linear<T>>(li, lo, true, seeds.child("l" + std::to_string(i))));
    this->register_child("l" + std::to_string(i), *layers.back());
  }
}

template <class T>
Var<T> Mlp<T>::forward(const Var<T>& x) const {
  Var<T> h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = layers[i]->forward(h);
    if (i + 1 < layers.size()) h = ag::relu(h);
  }
  return h;
}

#define LEUKODETR_INSTANTIATE_NN(T)   \
  template class Module<T>;           \
  template class Linear<T>;           \
  template class Conv2d<T>;           \
  template class ConvTranspose2d<T>;  \
  template class FrozenBatchNorm2d<T>; \
  template class LayerNorm<T>;        \
  template class Embedding<T>;        \
  template class Mlp<T>;

LEUKODETR_INSTANTIATE_NN(float)
LEUKODETR_INSTANTIATE_NN(double)

}  // namespace leukodetr
