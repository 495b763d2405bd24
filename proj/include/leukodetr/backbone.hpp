#pragma once

#include "leukodetr/nn.hpp"

namespace leukodetr {

template <class T>
struct BackboneOutput {
  std::vector<Var<T>> levels;     // strides {8,16,32,64}, channels {512,1024,2048,2048}
  std::vector<TensorB> masks;     // input mask nearest-downsampled per level
  std::vector<int64_t> strides;   // {8, 16, 32, 64}
};

template <class T>
class Bottleneck : public Module<T> {
 public:
  Bottleneck(int64_t in, int64_t mid, int64_t out, int stride, bool project,
             const SeedTree& seeds);
  Var<T> forward(const Var<T>& x) const;

  Conv2d<T> conv1, conv2, conv3;
  FrozenBatchNorm2d<T> bn1, bn2, bn3;
  std::unique_ptr<Conv2d<T>> proj;
  std::unique_ptr<FrozenBatchNorm2d<T>> proj_bn;
};

// 50-layer residual network extended with one extra bottleneck stage, so the
// hierarchy reaches stride 64 for deeper semantics. Emits C3..C6.
template <class T>
class ResNetBackbone : public Module<T> {
 public:
  explicit ResNetBackbone(const SeedTree& seeds);

  // pixels [B,3,H,W] with H,W >= 64 and finite values; mask [B,H,W] nonzero
  // at padding. Masked pixels are zeroed before the stem, which makes padded
  // content indistinguishable from zeros everywhere downstream.
  BackboneOutput<T> forward(const Tensor<T>& pixels, const TensorB& mask) const;

  static TensorB downsample_mask(const TensorB& mask, int64_t stride);

  Conv2d<T> stem_conv;
  FrozenBatchNorm2d<T> stem_bn;
  std::vector<std::vector<std::unique_ptr<Bottleneck<T>>>> stages;
};

}  // namespace leukodetr
