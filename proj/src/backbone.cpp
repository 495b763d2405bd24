#include "leukodetr/backbone.hpp"

#include <cmath>

namespace leukodetr {

template <class T>
Bottleneck<T>::Bottleneck(int64_t in, int64_t mid, int64_t out, int stride, bool project,
                          const SeedTree& seeds)
    : conv1(in, mid, 1, 1, 0, false, seeds.child("conv1")),
      conv2(mid, mid, 3, stride, 1, false, seeds.child("conv2")),
      conv3(mid, out, 1, 1, 0, false, seeds.child("conv3")),
      bn1(mid),
      bn2(mid),
      bn3(out) {
  this->register_child("conv1", conv1);
  this->register_child("bn1", bn1);
  this->register_child("conv2", conv2);
  this->register_child("bn2", bn2);
  this->register_child("conv3", conv3);
  this->register_child("bn3", bn3);
  if (project) {
    proj = std::make_unique<Conv2d<T>>(in, out, 1, stride, 0, false, seeds.child("proj"));
    proj_bn = std::make_unique<FrozenBatchNorm2d<T>>(out);
    this->register_child("proj", *proj);
    this->register_child("proj_bn", *proj_bn);
  }
}

template <class T>
Var<T> Bottleneck<T>::forward(const Var<T>& x) const {
  using namespace ag;
  Var<T> h = relu(bn1.forward(conv1.forward(x)));
  h = relu(bn2.forward(conv2.forward(h)));
  h = bn3.forward(conv3.forward(h));
  Var<T> skip = proj ? proj_bn->forward(proj->forward(x)) : x;
  return relu(add(h, skip));
}

template <class T>
ResNetBackbone<T>::ResNetBackbone(const SeedTree& seeds)
    : stem_conv(3, 64, 7, 2, 3, false, seeds.child("stem")), stem_bn(64) {
  this->register_child("stem.conv", stem_conv);
  this->register_child("stem.bn", stem_bn);

  struct StageSpec {
    int64_t mid, out;
    int blocks, stride;
  };
  // layer1..layer4 follow the standard 50-layer plan; layer5 is the extra
  // stride-64 block (1x1 reduce, 3x3 stride-2, 1x1 expand, projection skip).
  const StageSpec plan[5] = {
      {64, 256, 3, 1}, {128, 512, 4, 2}, {256, 1024, 6, 2}, {512, 2048, 3, 2},
      {512, 2048, 1, 2}};
  int64_t in = 64;
  for (int s = 0; s < 5; ++s) {
    std::vector<std::unique_ptr<Bottleneck<T>>> blocks;
    for (int b = 0; b < plan[s].blocks; ++b) {
      int stride = b == 0 ? plan[s].stride : 1;
      bool project = b == 0 && (in != plan[s].out || stride != 1);
      std::string name = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
      blocks.push_back(std::make_unique<Bottleneck<T>>(in, plan[s].mid, plan[s].out, stride,
                                                       project, seeds.child(name)));
      this->register_child(name, *blocks.back());
      in = plan[s].out;
    }
    stages.push_back(std::move(blocks));
  }
}

template <class T>
TensorB ResNetBackbone<T>::downsample_mask(const TensorB& mask, int64_t stride) {
  int64_t b = mask.size(0), h = mask.size(1), w = mask.size(2);
  int64_t oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
  TensorB out({b, oh, ow});
  for (int64_t n = 0; n < b; ++n)
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j)
        out[(n * oh + i) * ow + j] = mask[(n * h + i * stride) * w + j * stride];
  return out;
}

template <class T>
BackboneOutput<T> ResNetBackbone<T>::forward(const Tensor<T>& pixels,
                                             const TensorB& mask) const {
  check_arg(pixels.rank() == 4 && pixels.size(1) == 3, "backbone: pixels must be [B,3,H,W]");
  int64_t b = pixels.size(0), h = pixels.size(2), w = pixels.size(3);
  check_arg(h >= 64 && w >= 64, "backbone: input must be at least 64x64, got " +
                                    std::to_string(h) + "x" + std::to_string(w));
  check_arg(mask.shape() == std::vector<int64_t>({b, h, w}), "backbone: mask shape mismatch");
  for (int64_t i = 0; i < pixels.numel(); ++i)
    check_arg(std::isfinite((double)pixels[i]), "backbone: non-finite pixel value");

  Tensor<T> zeroed = pixels.clone();
  for (int64_t n = 0; n < b; ++n)
    for (int64_t i = 0; i < h * w; ++i)
      if (mask[n * h * w + i])
        for (int64_t c = 0; c < 3; ++c) zeroed[(n * 3 + c) * h * w + i] = T(0);

  using namespace ag;
  Var<T> x = relu(stem_bn.forward(stem_conv.forward(Var<T>(zeroed, false))));
  x = maxpool2d(x, 3, 2, 1);

  BackboneOutput<T> out;
  out.strides = {8, 16, 32, 64};
  for (size_t s = 0; s < stages.size(); ++s) {
    for (const auto& block : stages[s]) x = block->forward(x);
    if (s >= 1) out.levels.push_back(x);
  }
  for (int64_t stride : out.strides) out.masks.push_back(downsample_mask(mask, stride));
  for (size_t l = 0; l < out.levels.size(); ++l) {
    check_arg(out.levels[l].size(2) == out.masks[l].size(1) &&
                  out.levels[l].size(3) == out.masks[l].size(2),
              "backbone: level/mask size disagreement");
  }
  return out;
}

template class Bottleneck<float>;
template class Bottleneck<double>;
template class ResNetBackbone<float>;
template class ResNetBackbone<double>;

}  // namespace leukodetr
