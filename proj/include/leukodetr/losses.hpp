#pragma once

#include <array>

#include "leukodetr/autograd.hpp"
#include "leukodetr/hungarian.hpp"

namespace leukodetr {

// One decoder layer's predictions for one image.
template <class T>
struct Prediction {
  Var<T> logits;  // [Q, C] raw class logits
  Var<T> boxes;   // [Q, 4] normalized (cx, cy, w, h)
};

template <class T>
struct ImageTargets {
  std::vector<int> class_ids;  // size G
  Tensor<T> boxes;             // [G, 4] normalized (cx, cy, w, h)
  int64_t count() const { return (int64_t)class_ids.size(); }
};

struct LossConfig {
  double class_weight = 2.0;
  double l1_weight = 5.0;
  double giou_weight = 2.0;
  double gamma = 2.0;
  // Per-class positive weights; negatives get (1 - alpha). Empty disables
  // alpha balancing (both weights 1).
  std::vector<double> alpha;
  bool use_l1 = true;
  bool use_giou = true;
  bool aux = true;
};

// Scalar geometry on (cx, cy, w, h) boxes.
double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);
// GIoU = IoU - (enclosing - union) / enclosing, in (-1, 1]. Requires w, h > 0.
double box_giou(const std::array<double, 4>& a, const std::array<double, 4>& b);

// Differentiable GIoU for row-aligned pairs: [M,4] x [M,4] -> [M,1].
template <class T>
Var<T> giou_pairs(const Var<T>& a, const Var<T>& b);

// Sigmoid focal loss over [Q, C]. target[q] is a class id or -1 for
// background. normalizer <= 0 derives it from the matched count (>= 1).
template <class T>
Var<T> focal_loss(const Var<T>& logits, const std::vector<int>& target,
                  const std::vector<double>& alpha, T gamma, T normalizer = T(0));

// Sum over row pairs of l1_weight * |pred - gt|_1 + giou_weight * (1 - GIoU).
template <class T>
Var<T> box_loss(const Var<T>& pred, const Var<T>& gt, T giou_weight, T l1_weight);

// Assignment cost [Q, G] combining the focal-style class cost with the box
// terms, same weights as the loss.
template <class T>
TensorD matching_cost(const Tensor<T>& logits, const Tensor<T>& boxes,
                      const ImageTargets<T>& targets, const LossConfig& cfg);

template <class T>
struct LossBreakdown {
  struct Layer {
    double class_loss = 0, l1_loss = 0, giou_loss = 0;
    double sum() const { return class_loss + l1_loss + giou_loss; }
  };
  std::vector<Layer> layers;
  double total = 0;
  Var<T> total_var;                               // graph root for backward
  std::vector<std::vector<MatchResult>> matches;  // [layer][image]
};

// Joint loss: per-layer Hungarian matching, focal classification, L1 + GIoU
// regression, summed over decoder layers (all layers when aux, else the
// final layer only).
template <class T>
class SetCriterion {
 public:
  explicit SetCriterion(LossConfig cfg) : cfg_(std::move(cfg)) {}

  LossBreakdown<T> compute(const std::vector<std::vector<Prediction<T>>>& layers,
                           const std::vector<ImageTargets<T>>& targets) const;
  // Same loss with externally pinned matches; gradient checks use this to
  // keep the discrete matching step fixed.
  LossBreakdown<T> compute_with_matches(
      const std::vector<std::vector<Prediction<T>>>& layers,
      const std::vector<ImageTargets<T>>& targets,
      const std::vector<std::vector<MatchResult>>& matches) const;

  const LossConfig& config() const { return cfg_; }

 private:
  LossConfig cfg_;
};

}  // namespace leukodetr
