#include "leukodetr/hs_fpn.hpp"

namespace leukodetr {

FpnMode fpn_mode_from_string(const std::string& s) {
  if (s == "bl") return FpnMode::kBilinear;
  if (s == "tconv_bl") return FpnMode::kTconvBilinear;
  throw std::invalid_argument("fpn.mode must be 'bl' or 'tconv_bl', got '" + s + "'");
}

FpnVariant fpn_variant_from_string(const std::string& s) {
  if (s == "fpn") return FpnVariant::kFpn;
  if (s == "bifpn") return FpnVariant::kBiFpn;
  if (s == "pafpn") return FpnVariant::kPaFpn;
  if (s == "fapn") return FpnVariant::kFaPn;
  if (s == "hsfpn") return FpnVariant::kHsFpn;
  throw std::invalid_argument("unknown fpn.variant '" + s + "'");
}

std::string to_string(FpnMode m) { return m == FpnMode::kBilinear ? "bl" : "tconv_bl"; }

std::string to_string(FpnVariant v) {
  switch (v) {
    case FpnVariant::kFpn: return "fpn";
    case FpnVariant::kBiFpn: return "bifpn";
    case FpnVariant::kPaFpn: return "pafpn";
    case FpnVariant::kFaPn: return "fapn";
    default: return "hsfpn";
  }
}

template <class T>
ChannelAttention<T>::ChannelAttention(int64_t channels, int64_t reduction,
                                      const SeedTree& seeds)
    : fc1(channels, std::max<int64_t>(channels / reduction, 1), true, seeds.child("fc1")),
      fc2(std::max<int64_t>(channels / reduction, 1), channels, true, seeds.child("fc2")) {
  this->register_child("fc1", fc1);
  this->register_child("fc2", fc2);
}

template <class T>
Var<T> ChannelAttention<T>::weights(const Var<T>& x, const TensorB& mask) const {
  using namespace ag;
  Var<T> avg = masked_avgpool(x, mask);
  Var<T> mx = masked_maxpool(x, mask);
  auto transform = [&](const Var<T>& v) { return fc2.forward(relu(fc1.forward(v))); };
  return sigmoid(add(transform(avg), transform(mx)));
}

template <class T>
Var<T> ChannelAttention<T>::screen(const Var<T>& x, const TensorB& mask) const {
  return ag::scale_channels(x, weights(x, mask));
}

template <class T>
DimensionMatch<T>::DimensionMatch(int64_t in_channels, const SeedTree& seeds)
    : conv(in_channels, kOut, 1, 1, 0, true, seeds.child("conv")) {
  check_arg(in_channels == 256 || in_channels == 512 || in_channels == 1024 ||
                in_channels == 2048,
            "DimensionMatch: unexpected channel count " + std::to_string(in_channels));
  this->register_child("conv", conv);
}

template <class T>
Var<T> DimensionMatch<T>::forward(const Var<T>& x) const {
  check_arg(x.size(1) == conv.weight.size(1),
            "DimensionMatch: input has " + std::to_string(x.size(1)) + " channels, expected " +
                std::to_string(conv.weight.size(1)));
  return conv.forward(x);
}

template <class T>
SffFusion<T>::SffFusion(FpnMode m, const SeedTree& seeds)
    : mode(m), ca(DimensionMatch<T>::kOut, 4, seeds.child("ca")) {
  this->register_child("ca", ca);
  if (mode == FpnMode::kTconvBilinear) {
    tconv = std::make_unique<ConvTranspose2d<T>>(DimensionMatch<T>::kOut,
                                                 DimensionMatch<T>::kOut, 3, 2, 1, 1, true,
                                                 seeds.child("tconv"));
    this->register_child("tconv", *tconv);
  }
}

template <class T>
Var<T> SffFusion<T>::attention_input(const Var<T>& f_high, int64_t target_h,
                                     int64_t target_w) const {
  Var<T> up = mode == FpnMode::kTconvBilinear ? tconv->forward(f_high) : f_high;
  return ag::bilinear_resize(up, target_h, target_w);
}

template <class T>
Var<T> SffFusion<T>::forward(const Var<T>& f_high, const Var<T>& f_low,
                             const TensorB& low_mask) const {
  check_arg(f_high.size(1) == f_low.size(1), "SffFusion: channel mismatch");
  Var<T> f_att = attention_input(f_high, f_low.size(2), f_low.size(3));
  return ag::add(ag::scale_channels(f_low, ca.weights(f_att, low_mask)), f_att);
}

template <class T>
HsFpn<T>::HsFpn(FpnMode m, FpnVariant v, const SeedTree& seeds) : mode(m), variant(v) {
  if (variant == FpnVariant::kBiFpn || variant == FpnVariant::kPaFpn ||
      variant == FpnVariant::kFaPn) {
    throw std::invalid_argument("fpn.variant '" + to_string(variant) +
                                "' is an interface slot without an implementation; use "
                                "'hsfpn' or 'fpn'");
  }
  const int64_t in_channels[4] = {512, 1024, 2048, 2048};
  for (int l = 0; l < 4; ++l) {
    if (variant == FpnVariant::kHsFpn) {
      select_ca.push_back(std::make_unique<ChannelAttention<T>>(
          in_channels[l], 4, seeds.child("ca" + std::to_string(l))));
      this->register_child("ca" + std::to_string(l), *select_ca.back());
    }
    dm.push_back(
        std::make_unique<DimensionMatch<T>>(in_channels[l], seeds.child("dm" + std::to_string(l))));
    this->register_child("dm" + std::to_string(l), *dm.back());
  }
  if (variant == FpnVariant::kHsFpn) {
    for (int l = 0; l < 3; ++l) {
      sff.push_back(std::make_unique<SffFusion<T>>(mode, seeds.child("sff" + std::to_string(l))));
      this->register_child("sff" + std::to_string(l), *sff.back());
    }
  }
}

template <class T>
FusedPyramid<T> HsFpn<T>::forward(const BackboneOutput<T>& backbone) const {
  check_arg(backbone.levels.size() == 4, "HsFpn: expected 4 backbone levels");
  FusedPyramid<T> out;
  out.masks = backbone.masks;
  std::vector<Var<T>> matched(4);
  for (int l = 0; l < 4; ++l) {
    Var<T> x = backbone.levels[l];
    if (variant == FpnVariant::kHsFpn) x = select_ca[l]->screen(x, backbone.masks[l]);
    matched[l] = dm[l]->forward(x);
  }
  out.levels.resize(4);
  out.levels[3] = matched[3];
  for (int l = 2; l >= 0; --l) {
    if (variant == FpnVariant::kHsFpn) {
      out.levels[l] = sff[l]->forward(out.levels[l + 1], matched[l], backbone.masks[l]);
    } else {
      Var<T> up = ag::bilinear_resize(out.levels[l + 1], matched[l].size(2), matched[l].size(3));
      out.levels[l] = ag::add(matched[l], up);
    }
  }
  return out;
}

#define LEUKODETR_INSTANTIATE_FPN(T)  \
  template class ChannelAttention<T>; \
  template class DimensionMatch<T>;   \
  template class SffFusion<T>;        \
  template class HsFpn<T>;

LEUKODETR_INSTANTIATE_FPN(float)
LEUKODETR_INSTANTIATE_FPN(double)

}  // namespace leukodetr
