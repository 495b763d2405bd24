#include "leukodetr/detector.hpp"

#include <cmath>

namespace leukodetr {

template <class T>
LeukoDetector<T>::LeukoDetector(const ModelConfig& c, uint64_t seed)
    : cfg(c),
      backbone(SeedTree(seed).child("backbone")),
      fpn(c.fpn_mode, c.fpn_variant, SeedTree(seed).child("fpn")),
      transformer(c.transformer, SeedTree(seed).child("transformer")) {
  this->register_child("backbone", backbone);
  this->register_child("fpn", fpn);
  this->register_child("transformer", transformer);
}

template <class T>
std::vector<std::vector<Prediction<T>>> LeukoDetector<T>::forward(const Tensor<T>& pixels,
                                                                  const TensorB& mask,
                                                                  ForwardCtx& ctx) const {
  BackboneOutput<T> features = backbone.forward(pixels, mask);
  FusedPyramid<T> pyramid = fpn.forward(features);
  return transformer.forward(pyramid, ctx);
}

template <class T>
std::vector<NamedParam<T>> LeukoDetector<T>::grouped_parameters() {
  std::vector<NamedParam<T>> params = this->named_parameters();
  for (auto& p : params) {
    if (p.name.rfind("backbone.", 0) == 0) {
      p.group = "backbone";
    } else if (p.name.rfind("fpn.", 0) == 0) {
      p.group = "fpn";
    } else {
      p.group = "transformer";
    }
  }
  return params;
}

template <class T>
std::vector<Detection> extract_detections(const Prediction<T>& pred, int64_t height,
                                          int64_t width, double threshold) {
  int64_t q = pred.logits.size(0), c = pred.logits.size(1);
  std::vector<Detection> out;
  for (int64_t i = 0; i < q; ++i) {
    int best = 0;
    double best_logit = pred.logits.val().at(i, 0);
    for (int64_t j = 1; j < c; ++j) {
      if (pred.logits.val().at(i, j) > best_logit) {
        best_logit = pred.logits.val().at(i, j);
        best = (int)j;
      }
    }
    double conf = 1.0 / (1.0 + std::exp(-best_logit));
    if (conf < threshold) continue;
    double cx = pred.boxes.val().at(i, 0) * width, cy = pred.boxes.val().at(i, 1) * height;
    double w = pred.boxes.val().at(i, 2) * width, h = pred.boxes.val().at(i, 3) * height;
    Detection d;
    d.class_id = best;
    d.confidence = conf;
    d.x1 = std::clamp(cx - w / 2, 0.0, double(width));
    d.y1 = std::clamp(cy - h / 2, 0.0, double(height));
    d.x2 = std::clamp(cx + w / 2, 0.0, double(width));
    d.y2 = std::clamp(cy + h / 2, 0.0, double(height));
    if (d.x2 <= d.x1 || d.y2 <= d.y1) continue;
    out.push_back(d);
  }
  return out;
}

template class LeukoDetector<float>;
template class LeukoDetector<double>;
template std::vector<Detection> extract_detections<float>(const Prediction<float>&, int64_t,
                                                          int64_t, double);
template std::vector<Detection> extract_detections<double>(const Prediction<double>&, int64_t,
                                                           int64_t, double);

}  // namespace leukodetr
