#pragma once

#include "leukodetr/backbone.hpp"

namespace leukodetr {

enum class FpnMode { kBilinear, kTconvBilinear };
enum class FpnVariant { kFpn, kBiFpn, kPaFpn, kFaPn, kHsFpn };

FpnMode fpn_mode_from_string(const std::string& s);
FpnVariant fpn_variant_from_string(const std::string& s);
std::string to_string(FpnMode m);
std::string to_string(FpnVariant v);

template <class T>
struct FusedPyramid {
  std::vector<Var<T>> levels;  // 4 maps, 256 channels, strides {8,16,32,64}
  std::vector<TensorB> masks;
};

// Global average + max pooling through one shared two-layer transform,
// sigmoid-gated per channel.
template <class T>
class ChannelAttention : public Module<T> {
 public:
  ChannelAttention(int64_t channels, int64_t reduction, const SeedTree& seeds);
  // [B, C] gates, every entry strictly in (0,1); pooling skips masked cells.
  Var<T> weights(const Var<T>& x, const TensorB& mask) const;
  Var<T> screen(const Var<T>& x, const TensorB& mask) const;
  Linear<T> fc1, fc2;
};

// 1x1 convolution unifying a pyramid level to 256 channels.
template <class T>
class DimensionMatch : public Module<T> {
 public:
  DimensionMatch(int64_t in_channels, const SeedTree& seeds);
  Var<T> forward(const Var<T>& x) const;
  static constexpr int64_t kOut = 256;
  Conv2d<T> conv;
};

// Selective feature fusion: resized high-level features gate the low-level
// map per channel, then add back in.
template <class T>
class SffFusion : public Module<T> {
 public:
  SffFusion(FpnMode mode, const SeedTree& seeds);
  Var<T> forward(const Var<T>& f_high, const Var<T>& f_low, const TensorB& low_mask) const;
  // The resized high-level feature f_att at the target grid.
  Var<T> attention_input(const Var<T>& f_high, int64_t target_h, int64_t target_w) const;

  FpnMode mode;
  ChannelAttention<T> ca;
  std::unique_ptr<ConvTranspose2d<T>> tconv;
};

template <class T>
class HsFpn : public Module<T> {
 public:
  HsFpn(FpnMode mode, FpnVariant variant, const SeedTree& seeds);
  FusedPyramid<T> forward(const BackboneOutput<T>& backbone) const;

  FpnMode mode;
  FpnVariant variant;
  std::vector<std::unique_ptr<ChannelAttention<T>>> select_ca;  // per level
  std::vector<std::unique_ptr<DimensionMatch<T>>> dm;
  std::vector<std::unique_ptr<SffFusion<T>>> sff;  // finest-first junctions
};

}  // namespace leukodetr
