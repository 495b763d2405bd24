#include "leukodetr/overlay.hpp"

#include <opencv2/imgproc.hpp>

namespace leukodetr {

OverlayStyle style_for_schema(const DatasetSchema& schema) {
  OverlayStyle style;
  style.names = schema.classes;
  const std::vector<std::pair<std::string, cv::Scalar>> fixed = {
      {"LYM", {0, 200, 0}},      // green
      {"NEU", {0, 140, 255}},    // orange
      {"EOS", {180, 0, 160}},    // purple
      {"BAS", {255, 80, 0}},     // blue
      {"MON", {0, 220, 255}},    // yellow
  };
  const cv::Scalar fallback[6] = {{0, 200, 0},   {0, 140, 255}, {180, 0, 160},
                                  {255, 80, 0},  {0, 220, 255}, {200, 200, 0}};
  for (size_t i = 0; i < schema.classes.size(); ++i) {
    cv::Scalar color = fallback[i % 6];
    for (const auto& [name, c] : fixed)
      if (schema.classes[i] == name) color = c;
    style.colors.push_back(color);
  }
  return style;
}

void draw_detections(cv::Mat& bgr, const std::vector<Detection>& dets,
                     const OverlayStyle& style, const std::vector<GtBox>* gt) {
  if (gt) {
    for (const auto& g : *gt)
      cv::rectangle(bgr, cv::Point2d(g.x1, g.y1), cv::Point2d(g.x2, g.y2), {0, 0, 0}, 2);
  }
  for (const auto& d : dets) {
    cv::Scalar color = style.colors[d.class_id % style.colors.size()];
    cv::rectangle(bgr, cv::Point2d(d.x1, d.y1), cv::Point2d(d.x2, d.y2), color, 2);
    char label[64];
    std::snprintf(label, sizeof(label), "%s %.2f", style.names[d.class_id].c_str(),
                  d.confidence);
    int baseline = 0;
    cv::Size ts = cv::getTextSize(label, cv::FONT_HERSHEY_SIMPLEX, 0.45, 1, &baseline);
    double ty = std::max(d.y1 - 4.0, (double)ts.height + 2.0);
    cv::rectangle(bgr, cv::Point2d(d.x1, ty - ts.height - 2),
                  cv::Point2d(d.x1 + ts.width + 2, ty + baseline - 2), color, cv::FILLED);
    cv::putText(bgr, label, cv::Point2d(d.x1 + 1, ty - 2), cv::FONT_HERSHEY_SIMPLEX, 0.45,
                {255, 255, 255}, 1, cv::LINE_AA);
  }
}

}  // namespace leukodetr
