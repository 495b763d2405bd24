#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "leukodetr/evaluation.hpp"

namespace leukodetr::testutil {

// Independent slow evaluator: same metric definition as DetectionEvaluator
// (greedy best-IoU matching in confidence order, 101 recall points) written
// as direct loops with no precomputed precision envelope.
struct OracleScene {
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
};

inline EvalResult oracle_evaluate(const std::vector<OracleScene>& scenes, int num_classes,
                                  int max_dets = 100) {
  const std::vector<double> thresholds = {0.50, 0.55, 0.60, 0.65, 0.70,
                                          0.75, 0.80, 0.85, 0.90, 0.95};
  EvalResult res;
  res.per_class_ap.assign(num_classes, -1.0);
  res.ap_per_threshold.assign(thresholds.size(), 0.0);
  int with_gt = 0;

  // global insertion order per detection, mirroring add_image
  struct Tagged {
    Detection d;
    int64_t order;
    size_t img;
  };
  std::vector<std::vector<Tagged>> tagged(scenes.size());
  int64_t next = 0;
  for (size_t s = 0; s < scenes.size(); ++s) {
    std::vector<Detection> sorted = scenes[s].dets;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const Detection& a, const Detection& b) {
                       return a.confidence > b.confidence;
                     });
    if ((int64_t)sorted.size() > max_dets) sorted.resize(max_dets);
    for (const auto& d : sorted) tagged[s].push_back({d, next++, s});
  }

  for (int c = 0; c < num_classes; ++c) {
    int64_t total_gt = 0;
    for (const auto& sc : scenes)
      for (const auto& g : sc.gts) total_gt += g.class_id == c;
    if (total_gt == 0) continue;
    ++with_gt;

    double class_sum = 0;
    for (size_t ti = 0; ti < thresholds.size(); ++ti) {
      // flatten this class's detections, globally ordered by (conf desc, order)
      std::vector<Tagged> all;
      for (const auto& per_img : tagged)
        for (const auto& t : per_img)
          if (t.d.class_id == c) all.push_back(t);
      std::sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) {
        return a.d.confidence != b.d.confidence ? a.d.confidence > b.d.confidence
                                                : a.order < b.order;
      });

      // greedy matching, per image, in that order
      std::vector<std::vector<char>> used(scenes.size());
      for (size_t s = 0; s < scenes.size(); ++s) used[s].assign(scenes[s].gts.size(), 0);
      std::vector<char> is_tp(all.size(), 0);
      for (size_t k = 0; k < all.size(); ++k) {
        const auto& t = all[k];
        double best = -1;
        int64_t best_g = -1;
        const auto& gts = scenes[t.img].gts;
        for (size_t g = 0; g < gts.size(); ++g) {
          if (gts[g].class_id != c || used[t.img][g]) continue;
          double v = iou_xyxy(t.d.x1, t.d.y1, t.d.x2, t.d.y2, gts[g].x1, gts[g].y1, gts[g].x2,
                              gts[g].y2);
          if (v >= thresholds[ti] && v > best) {
            best = v;
            best_g = (int64_t)g;
          }
        }
        if (best_g >= 0) {
          used[t.img][best_g] = 1;
          is_tp[k] = 1;
        }
      }

      // AP: for each recall level, the best raw precision at recall >= r
      double ap = 0;
      for (int r = 0; r <= 100; ++r) {
        double want = r / 100.0;
        double best_prec = 0;
        int64_t tp = 0;
        for (size_t k = 0; k < all.size(); ++k) {
          tp += is_tp[k];
          double rec = double(tp) / double(total_gt);
          double prec = double(tp) / double(k + 1);
          if (rec >= want - 1e-12) best_prec = std::max(best_prec, prec);
        }
        ap += best_prec;
      }
      ap /= 101.0;
      class_sum += ap;
      res.ap_per_threshold[ti] += ap;
    }
    res.per_class_ap[c] = class_sum / thresholds.size();
  }
  if (with_gt == 0) return res;
  for (auto& v : res.ap_per_threshold) v /= with_gt;
  for (int c = 0; c < num_classes; ++c)
    if (res.per_class_ap[c] >= 0) res.ap += res.per_class_ap[c];
  res.ap /= with_gt;
  res.ap50 = res.ap_per_threshold[0];
  res.ap75 = res.ap_per_threshold[5];
  return res;
}

inline std::vector<OracleScene> random_scenes(std::mt19937_64& gen, int n_scenes,
                                              int num_classes) {
  std::uniform_real_distribution<double> pos(0, 200), ext(5, 60), conf(0, 1);
  std::uniform_int_distribution<int> cls(0, num_classes - 1), ng(0, 4), nd(0, 8);
  std::vector<OracleScene> scenes(n_scenes);
  for (auto& sc : scenes) {
    int g = ng(gen);
    for (int i = 0; i < g; ++i) {
      double x = pos(gen), y = pos(gen);
      sc.gts.push_back({cls(gen), x, y, x + ext(gen), y + ext(gen)});
    }
    int d = nd(gen);
    for (int i = 0; i < d; ++i) {
      // mix of perturbed copies of gt boxes and spurious boxes
      if (!sc.gts.empty() && i % 2 == 0) {
        const GtBox& base = sc.gts[i % sc.gts.size()];
        std::uniform_real_distribution<double> jit(-12, 12);
        double x1 = base.x1 + jit(gen), y1 = base.y1 + jit(gen);
        double x2 = std::max(x1 + 1, base.x2 + jit(gen));
        double y2 = std::max(y1 + 1, base.y2 + jit(gen));
        sc.dets.push_back({base.class_id, x1, y1, x2, y2, conf(gen)});
      } else {
        double x = pos(gen), y = pos(gen);
        sc.dets.push_back({cls(gen), x, y, x + ext(gen), y + ext(gen), conf(gen)});
      }
    }
  }
  return scenes;
}

}  // namespace leukodetr::testutil
