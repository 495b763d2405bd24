#include "leukodetr/evaluation.hpp"

#include <algorithm>
#include <cmath>

namespace leukodetr {

double iou_xyxy(double ax1, double ay1, double ax2, double ay2, double bx1, double by1,
                double bx2, double by2) {
  double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  double ih = std::min(ay2, by2) - std::max(ay1, by1);
  if (iw <= 0 || ih <= 0) return 0.0;
  double inter = iw * ih;
  double uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return inter / uni;
}

const std::vector<double>& DetectionEvaluator::iou_thresholds() {
  static const std::vector<double> t = {0.50, 0.55, 0.60, 0.65, 0.70,
                                        0.75, 0.80, 0.85, 0.90, 0.95};
  return t;
}

DetectionEvaluator::DetectionEvaluator(int num_classes, int max_dets)
    : num_classes_(num_classes), max_dets_(max_dets) {
  check_arg(num_classes > 0, "DetectionEvaluator: need at least one class");
  dets_.resize(num_classes);
  gts_.resize(num_classes);
}

void DetectionEvaluator::add_image(const std::vector<Detection>& dets,
                                   const std::vector<GtBox>& gts) {
  for (int c = 0; c < num_classes_; ++c) {
    dets_[c].emplace_back();
    gts_[c].emplace_back();
  }
  std::vector<Detection> kept = dets;
  std::stable_sort(kept.begin(), kept.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  if ((int64_t)kept.size() > max_dets_) kept.resize(max_dets_);
  for (const Detection& d : kept) {
    check_arg(d.class_id >= 0 && d.class_id < num_classes_, "add_image: class out of range");
    check_arg(std::isfinite(d.confidence) && d.confidence >= 0 && d.confidence <= 1,
              "add_image: confidence must be in [0,1]");
    check_arg(d.x2 > d.x1 && d.y2 > d.y1, "add_image: degenerate detection box");
    dets_[d.class_id].back().push_back({d.confidence, next_order_++, d.x1, d.y1, d.x2, d.y2});
  }
  for (const GtBox& g : gts) {
    check_arg(g.class_id >= 0 && g.class_id < num_classes_, "add_image: gt class out of range");
    gts_[g.class_id].back().push_back(g);
  }
}

EvalResult DetectionEvaluator::evaluate() const {
  const auto& thresholds = iou_thresholds();
  constexpr int kRecallPoints = 101;
  EvalResult result;
  result.per_class_ap.assign(num_classes_, -1.0);

  std::vector<double> ap_sum_overall;  // per threshold, summed over classes with gt
  ap_sum_overall.assign(thresholds.size(), 0.0);
  int classes_with_gt = 0;

  for (int c = 0; c < num_classes_; ++c) {
    int64_t total_gt = 0;
    for (const auto& per_img : gts_[c]) total_gt += (int64_t)per_img.size();
    if (total_gt == 0) continue;
    ++classes_with_gt;

    double class_ap_sum = 0;
    for (size_t ti = 0; ti < thresholds.size(); ++ti) {
      double thr = thresholds[ti];
      // (confidence, order, is_tp) across images
      std::vector<std::tuple<double, int64_t, bool>> scored;
      for (size_t img = 0; img < dets_[c].size(); ++img) {
        std::vector<StoredDet> ds = dets_[c][img];
        std::sort(ds.begin(), ds.end(), [](const StoredDet& a, const StoredDet& b) {
          return a.conf != b.conf ? a.conf > b.conf : a.order < b.order;
        });
        const auto& gt = gts_[c][img];
        std::vector<char> taken(gt.size(), 0);
        for (const StoredDet& d : ds) {
          // best remaining gt with IoU >= threshold; lowest index wins ties
          double best = -1;
          int64_t best_g = -1;
          for (size_t g = 0; g < gt.size(); ++g) {
            if (taken[g]) continue;
            double v = iou_xyxy(d.x1, d.y1, d.x2, d.y2, gt[g].x1, gt[g].y1, gt[g].x2, gt[g].y2);
            if (v >= thr && v > best) {
              best = v;
              best_g = (int64_t)g;
            }
          }
          bool tp = best_g >= 0;
          if (tp) taken[best_g] = 1;
          scored.emplace_back(d.conf, d.order, tp);
        }
      }
      std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        return std::get<0>(a) != std::get<0>(b) ? std::get<0>(a) > std::get<0>(b)
                                                : std::get<1>(a) < std::get<1>(b);
      });
      std::vector<double> precision(scored.size()), recall(scored.size());
      int64_t tp_cum = 0;
      for (size_t k = 0; k < scored.size(); ++k) {
        tp_cum += std::get<2>(scored[k]) ? 1 : 0;
        precision[k] = double(tp_cum) / double(k + 1);
        recall[k] = double(tp_cum) / double(total_gt);
      }
      for (int64_t k = (int64_t)precision.size() - 2; k >= 0; --k)
        precision[k] = std::max(precision[k], precision[k + 1]);

      double ap = 0;
      size_t k = 0;
      for (int r = 0; r < kRecallPoints; ++r) {
        double want = double(r) / (kRecallPoints - 1);
        while (k < recall.size() && recall[k] < want) ++k;
        if (k < recall.size()) ap += precision[k];
      }
      ap /= kRecallPoints;
      class_ap_sum += ap;
      ap_sum_overall[ti] += ap;
    }
    result.per_class_ap[c] = class_ap_sum / thresholds.size();
  }

  result.ap_per_threshold.assign(thresholds.size(), 0.0);
  if (classes_with_gt == 0) return result;
  for (size_t ti = 0; ti < thresholds.size(); ++ti)
    result.ap_per_threshold[ti] = ap_sum_overall[ti] / classes_with_gt;
  for (int c = 0; c < num_classes_; ++c)
    if (result.per_class_ap[c] >= 0) result.ap += result.per_class_ap[c];
  result.ap /= classes_with_gt;
  result.ap50 = result.ap_per_threshold[0];
  result.ap75 = result.ap_per_threshold[5];
  return result;
}

}  // namespace leukodetr
