#pragma once

#include <opencv2/core.hpp>

#include "leukodetr/data.hpp"
#include "leukodetr/evaluation.hpp"

namespace leukodetr {

struct OverlayStyle {
  std::vector<cv::Scalar> colors;  // BGR per class id
  std::vector<std::string> names;
};

// Leukocyte classes use the reporting palette (LYM green, NEU orange, EOS
// purple, BAS blue, MON yellow); other schemas get a fixed rotation.
OverlayStyle style_for_schema(const DatasetSchema& schema);

// Draws predictions with class/confidence labels; ground truth, when given,
// in black.
void draw_detections(cv::Mat& bgr, const std::vector<Detection>& dets,
                     const OverlayStyle& style, const std::vector<GtBox>* gt);

}  // namespace leukodetr
