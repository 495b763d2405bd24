#pragma once

#include <string>
#include <vector>

#include "leukodetr/tensor.hpp"

namespace leukodetr {

struct Detection {
  int class_id = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // pixel xyxy
  double confidence = 0;                  // in [0, 1]
};

struct GtBox {
  int class_id = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

double iou_xyxy(double ax1, double ay1, double ax2, double ay2, double bx1, double by1,
                double bx2, double by2);

struct EvalResult {
  double ap = 0;    // mean over IoU 0.50:0.05:0.95 and classes with ground truth
  double ap50 = 0;  // IoU 0.50
  double ap75 = 0;  // IoU 0.75
  std::vector<double> per_class_ap;       // mean over thresholds; -1 when class has no gt
  std::vector<double> ap_per_threshold;   // class-mean AP at each IoU threshold
};

// COCO-style AP: per image and class, detections greedily match the best
// remaining ground truth at each IoU threshold in confidence order (ties
// broken by insertion index); precision is envelope-interpolated and sampled
// at 101 recall points. Classes without ground truth are excluded from the
// macro average. At most `max_dets` detections per image are scored.
class DetectionEvaluator {
 public:
  explicit DetectionEvaluator(int num_classes, int max_dets = 100);

  void add_image(const std::vector<Detection>& dets, const std::vector<GtBox>& gts);
  EvalResult evaluate() const;

  static const std::vector<double>& iou_thresholds();

 private:
  struct StoredDet {
    double conf;
    int64_t order;  // global insertion index, the deterministic tie-break
    double x1, y1, x2, y2;
  };
  int num_classes_;
  int max_dets_;
  int64_t next_order_ = 0;
  // per class, per image
  std::vector<std::vector<std::vector<StoredDet>>> dets_;
  std::vector<std::vector<std::vector<GtBox>>> gts_;
};

}  // namespace leukodetr
