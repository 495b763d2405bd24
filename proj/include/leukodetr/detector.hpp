#pragma once

#include "leukodetr/backbone.hpp"
#include "leukodetr/evaluation.hpp"
#include "leukodetr/transformer.hpp"

namespace leukodetr {

struct ModelConfig {
  TransformerConfig transformer;
  FpnMode fpn_mode = FpnMode::kTconvBilinear;
  FpnVariant fpn_variant = FpnVariant::kHsFpn;
};

// Full detection pipeline: multi-scale backbone, screening pyramid, encoder,
// decoder with per-layer classification and box heads.
template <class T>
class LeukoDetector : public Module<T> {
 public:
  LeukoDetector(const ModelConfig& cfg, uint64_t seed);

  // [dec_layers][batch] predictions
  std::vector<std::vector<Prediction<T>>> forward(const Tensor<T>& pixels, const TensorB& mask,
                                                  ForwardCtx& ctx) const;

  // Parameters tagged with their learning-rate group
  // ("backbone" / "fpn" / "transformer").
  std::vector<NamedParam<T>> grouped_parameters();

  ModelConfig cfg;
  ResNetBackbone<T> backbone;
  HsFpn<T> fpn;
  Transformer<T> transformer;
};

// One image's final-layer prediction as pixel-space detections: per query the
// argmax class with its sigmoid score, kept when the score clears the
// threshold.
template <class T>
std::vector<Detection> extract_detections(const Prediction<T>& pred, int64_t height,
                                          int64_t width, double threshold);

}  // namespace leukodetr
