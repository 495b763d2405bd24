#include "leukodetr/losses.hpp"

#include <algorithm>
#include <cmath>

namespace leukodetr {

namespace {

struct Xyxy {
  double x1, y1, x2, y2;
  double area() const { return (x2 - x1) * (y2 - y1); }
};

Xyxy to_xyxy(const std::array<double, 4>& b) {
  return {b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2};
}

double intersection(const Xyxy& a, const Xyxy& b) {
  double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return w > 0 && h > 0 ? w * h : 0.0;
}

}  // namespace

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  check_arg(a[2] > 0 && a[3] > 0 && b[2] > 0 && b[3] > 0, "box_iou: non-positive extent");
  Xyxy ra = to_xyxy(a), rb = to_xyxy(b);
  double inter = intersection(ra, rb);
  return inter / (ra.area() + rb.area() - inter);
}

double box_giou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  check_arg(a[2] > 0 && a[3] > 0 && b[2] > 0 && b[3] > 0, "box_giou: non-positive extent");
  Xyxy ra = to_xyxy(a), rb = to_xyxy(b);
  double inter = intersection(ra, rb);
  double uni = ra.area() + rb.area() - inter;
  Xyxy enc{std::min(ra.x1, rb.x1), std::min(ra.y1, rb.y1), std::max(ra.x2, rb.x2),
           std::max(ra.y2, rb.y2)};
  return inter / uni - (enc.area() - uni) / enc.area();
}

template <class T>
Var<T> giou_pairs(const Var<T>& a, const Var<T>& b) {
  using namespace ag;
  check_arg(a.shape() == b.shape() && a.shape().size() == 2 && a.size(1) == 4,
            "giou_pairs: need matching [M,4] inputs");
  auto corners = [](const Var<T>& v) {
    Var<T> cx = slice_cols(v, 0, 1), cy = slice_cols(v, 1, 1);
    Var<T> hw = scalar_mul(slice_cols(v, 2, 1), T(0.5));
    Var<T> hh = scalar_mul(slice_cols(v, 3, 1), T(0.5));
    return std::array<Var<T>, 4>{sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
  };
  auto ca = corners(a), cb = corners(b);
  Var<T> zeros(Tensor<T>::zeros({a.size(0), 1}), false);
  Var<T> iw = maximum(sub(minimum(ca[2], cb[2]), maximum(ca[0], cb[0])), zeros);
  Var<T> ih = maximum(sub(minimum(ca[3], cb[3]), maximum(ca[1], cb[1])), zeros);
  Var<T> inter = mul(iw, ih);
  Var<T> area_a = mul(sub(ca[2], ca[0]), sub(ca[3], ca[1]));
  Var<T> area_b = mul(sub(cb[2], cb[0]), sub(cb[3], cb[1]));
  Var<T> uni = sub(add(area_a, area_b), inter);
  Var<T> ew = sub(maximum(ca[2], cb[2]), minimum(ca[0], cb[0]));
  Var<T> eh = sub(maximum(ca[3], cb[3]), minimum(ca[1], cb[1]));
  Var<T> enc = mul(ew, eh);
  return sub(div(inter, uni), div(sub(enc, uni), enc));
}

template <class T>
Var<T> focal_loss(const Var<T>& logits, const std::vector<int>& target,
                  const std::vector<double>& alpha, T gamma, T normalizer) {
  using namespace ag;
  check_arg(logits.shape().size() == 2, "focal_loss: logits must be [Q, C]");
  int64_t q = logits.size(0), c = logits.size(1);
  check_arg((int64_t)target.size() == q, "focal_loss: target size mismatch");
  check_arg(alpha.empty() || (int64_t)alpha.size() == c,
            "focal_loss: alpha must have one entry per class");

  Tensor<T> pos_w = Tensor<T>::zeros({q, c});
  Tensor<T> neg_w({q, c});
  for (int64_t i = 0; i < q; ++i) {
    for (int64_t j = 0; j < c; ++j) neg_w.at(i, j) = alpha.empty() ? T(1) : T(1 - alpha[j]);
    int t = target[i];
    if (t < 0) continue;
    check_arg(t < c, "focal_loss: target class out of range");
    pos_w.at(i, t) = alpha.empty() ? T(1) : T(alpha[t]);
    neg_w.at(i, t) = T(0);
  }
  if (normalizer <= T(0)) {
    int64_t matched = 0;
    for (int t : target) matched += t >= 0;
    normalizer = T(std::max<int64_t>(matched, 1));
  }

  Var<T> p = sigmoid(logits);
  Var<T> one_minus_p = scalar_add(scalar_mul(p, T(-1)), T(1));
  // -log p and -log(1-p) through logsigmoid for stability in both tails.
  Var<T> nlp = scalar_mul(logsigmoid(logits), T(-1));
  Var<T> nlq = scalar_mul(logsigmoid(scalar_mul(logits, T(-1))), T(-1));
  Var<T> pos = mul(Var<T>(pos_w), mul(pow_scalar(one_minus_p, gamma), nlp));
  Var<T> neg = mul(Var<T>(neg_w), mul(pow_scalar(p, gamma), nlq));
  return scalar_mul(ag::sum(add(pos, neg)), T(1) / normalizer);
}

template <class T>
Var<T> box_loss(const Var<T>& pred, const Var<T>& gt, T giou_weight, T l1_weight) {
  using namespace ag;
  Var<T> total(Tensor<T>::zeros({1}), false);
  if (l1_weight != T(0))
    total = add(total, scalar_mul(ag::sum(abs_(sub(pred, gt))), l1_weight));
  if (giou_weight != T(0)) {
    Var<T> ones(Tensor<T>::full({pred.size(0), 1}, T(1)), false);
    total = add(total, scalar_mul(ag::sum(sub(ones, giou_pairs(pred, gt))), giou_weight));
  }
  return total;
}

template <class T>
TensorD matching_cost(const Tensor<T>& logits, const Tensor<T>& boxes,
                      const ImageTargets<T>& targets, const LossConfig& cfg) {
  int64_t q = logits.size(0), g = targets.count();
  TensorD cost({q, g});
  double l1w = cfg.use_l1 ? cfg.l1_weight : 0.0;
  double giouw = cfg.use_giou ? cfg.giou_weight : 0.0;
  for (int64_t i = 0; i < q; ++i) {
    for (int64_t j = 0; j < g; ++j) {
      int cls = targets.class_ids[j];
      double x = logits.at(i, cls);
      double p = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      double aw = cfg.alpha.empty() ? 1.0 : cfg.alpha[cls];
      double nw = cfg.alpha.empty() ? 1.0 : 1.0 - cfg.alpha[cls];
      double eps = 1e-12;
      double pos = aw * std::pow(1.0 - p, cfg.gamma) * -std::log(p + eps);
      double neg = nw * std::pow(p, cfg.gamma) * -std::log(1.0 - p + eps);
      std::array<double, 4> pb{boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)};
      std::array<double, 4> tb{targets.boxes.at(j, 0), targets.boxes.at(j, 1),
                               targets.boxes.at(j, 2), targets.boxes.at(j, 3)};
      double l1 = 0;
      for (int k = 0; k < 4; ++k) l1 += std::abs(pb[k] - tb[k]);
      cost.at(i, j) =
          cfg.class_weight * (pos - neg) + l1w * l1 + giouw * (1.0 - box_giou(pb, tb));
    }
  }
  return cost;
}

template <class T>
LossBreakdown<T> SetCriterion<T>::compute(const std::vector<std::vector<Prediction<T>>>& layers,
                                          const std::vector<ImageTargets<T>>& targets) const {
  std::vector<std::vector<MatchResult>> matches;
  size_t first = cfg_.aux ? 0 : layers.size() - 1;
  for (size_t li = 0; li < layers.size(); ++li) {
    std::vector<MatchResult> layer_matches;
    if (li >= first) {
      for (size_t b = 0; b < targets.size(); ++b) {
        if (targets[b].count() == 0) {
          layer_matches.push_back({});
          continue;
        }
        layer_matches.push_back(hungarian_match(
            matching_cost(layers[li][b].logits.val(), layers[li][b].boxes.val(), targets[b],
                          cfg_)));
      }
    }
    matches.push_back(std::move(layer_matches));
  }
  return compute_with_matches(layers, targets, matches);
}

template <class T>
LossBreakdown<T> SetCriterion<T>::compute_with_matches(
    const std::vector<std::vector<Prediction<T>>>& layers,
    const std::vector<ImageTargets<T>>& targets,
    const std::vector<std::vector<MatchResult>>& matches) const {
  using namespace ag;
  check_arg(!layers.empty() && layers[0].size() == targets.size(),
            "SetCriterion: layer/target batch mismatch");
  LossBreakdown<T> out;
  out.matches = matches;
  out.layers.resize(layers.size());

  int64_t total_matched = 0;
  for (const auto& t : targets) total_matched += t.count();
  T normalizer = T(std::max<int64_t>(total_matched, 1));

  Var<T> total(Tensor<T>::zeros({1}), false);
  size_t first = cfg_.aux ? 0 : layers.size() - 1;
  for (size_t li = first; li < layers.size(); ++li) {
    Var<T> cls(Tensor<T>::zeros({1}), false);
    Var<T> l1(Tensor<T>::zeros({1}), false);
    Var<T> gi(Tensor<T>::zeros({1}), false);
    for (size_t b = 0; b < targets.size(); ++b) {
      const Prediction<T>& pred = layers[li][b];
      const ImageTargets<T>& tgt = targets[b];
      std::vector<int> per_query(pred.logits.size(0), -1);
      const MatchResult& m = matches[li][b];
      check_arg((int64_t)m.gt_to_query.size() == tgt.count(),
                "SetCriterion: match size mismatch");
      for (int64_t j = 0; j < tgt.count(); ++j)
        per_query[m.gt_to_query[j]] = tgt.class_ids[j];
      cls = add(cls, focal_loss(pred.logits, per_query, cfg_.alpha, T(cfg_.gamma), normalizer));
      if (tgt.count() == 0) continue;
      Var<T> matched = gather_rows(pred.boxes, m.gt_to_query);
      Var<T> gt_boxes(tgt.boxes, false);
      if (cfg_.use_l1)
        l1 = add(l1, scalar_mul(ag::sum(abs_(sub(matched, gt_boxes))), T(1) / normalizer));
      if (cfg_.use_giou) {
        Var<T> ones(Tensor<T>::full({tgt.count(), 1}, T(1)), false);
        gi = add(gi, scalar_mul(ag::sum(sub(ones, giou_pairs(matched, gt_boxes))),
                                T(1) / normalizer));
      }
    }
    cls = scalar_mul(cls, T(cfg_.class_weight));
    l1 = scalar_mul(l1, T(cfg_.use_l1 ? cfg_.l1_weight : 0.0));
    gi = scalar_mul(gi, T(cfg_.use_giou ? cfg_.giou_weight : 0.0));
    out.layers[li].class_loss = cls.val()[0];
    out.layers[li].l1_loss = l1.val()[0];
    out.layers[li].giou_loss = gi.val()[0];
    total = add(total, add(cls, add(l1, gi)));
  }
  out.total_var = total;
  out.total = total.val()[0];
  return out;
}

#define LEUKODETR_INSTANTIATE_LOSSES(T)                                                      \
  template Var<T> giou_pairs<T>(const Var<T>&, const Var<T>&);                               \
  template Var<T> focal_loss<T>(const Var<T>&, const std::vector<int>&,                      \
                                const std::vector<double>&, T, T);                           \
  template Var<T> box_loss<T>(const Var<T>&, const Var<T>&, T, T);                           \
  template TensorD matching_cost<T>(const Tensor<T>&, const Tensor<T>&,                      \
                                    const ImageTargets<T>&, const LossConfig&);              \
  template class SetCriterion<T>;

LEUKODETR_INSTANTIATE_LOSSES(float)
LEUKODETR_INSTANTIATE_LOSSES(double)

}  // namespace leukodetr
