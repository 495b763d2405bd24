#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "eval_oracle.hpp"
#include "leukodetr/evaluation.hpp"

using namespace leukodetr;
using namespace leukodetr::testutil;

TEST_CASE("iou hand geometry") {
  CHECK(iou_xyxy(0, 0, 1, 1, 0, 0, 1, 1) == doctest::Approx(1.0));
  CHECK(iou_xyxy(0, 0, 1, 1, 2, 2, 3, 3) == doctest::Approx(0.0));
  // unit squares overlapping in a 0.5 x 1 strip: 0.5 / 1.5
  CHECK(iou_xyxy(0, 0, 1, 1, 0.5, 0, 1.5, 1) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("perfect detector scores exactly 1.0") {
  DetectionEvaluator ev(3);
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> pos(0, 200), ext(10, 50);
  for (int img = 0; img < 10; ++img) {
    std::vector<GtBox> gts;
    std::vector<Detection> dets;
    for (int k = 0; k <= img % 3; ++k) {
      double x = pos(gen), y = pos(gen), w = ext(gen), h = ext(gen);
      int c = (img + k) % 3;
      gts.push_back({c, x, y, x + w, y + h});
      dets.push_back({c, x, y, x + w, y + h, 1.0});
    }
    ev.add_image(dets, gts);
  }
  EvalResult r = ev.evaluate();
  CHECK(r.ap == 1.0);
  CHECK(r.ap50 == 1.0);
  CHECK(r.ap75 == 1.0);
}

TEST_CASE("no detections scores zero") {
  DetectionEvaluator ev(2);
  ev.add_image({}, {{0, 10, 10, 50, 50}});
  EvalResult r = ev.evaluate();
  CHECK(r.ap == 0.0);
  CHECK(r.per_class_ap[0] == 0.0);
  CHECK(r.per_class_ap[1] == -1.0);  // no gt -> excluded
}

TEST_CASE("fp ranked below full recall does not hurt ap50") {
  DetectionEvaluator ev(1);
  std::vector<GtBox> gts = {{0, 10, 10, 60, 60}};
  std::vector<Detection> dets = {{0, 10, 10, 60, 60, 0.9},      // exact
                                 {0, 100, 100, 140, 140, 0.8}};  // disjoint
  ev.add_image(dets, gts);
  EvalResult r = ev.evaluate();
  CHECK(r.ap50 == doctest::Approx(1.0));
  CHECK(r.ap == doctest::Approx(1.0));  // exact box matches at every threshold
}

TEST_CASE("ap is non-increasing in the iou threshold") {
  std::mt19937_64 gen(17);
  auto scenes = random_scenes(gen, 12, 3);
  DetectionEvaluator ev(3);
  for (const auto& sc : scenes) ev.add_image(sc.dets, sc.gts);
  EvalResult r = ev.evaluate();
  for (size_t i = 1; i < r.ap_per_threshold.size(); ++i)
    CHECK(r.ap_per_threshold[i] <= r.ap_per_threshold[i - 1] + 1e-12);
  CHECK(r.ap50 >= r.ap75);
}

TEST_CASE("confidence ties break by insertion index") {
  // Two same-confidence detections; the first inserted is the exact match.
  // With index tie-break the TP ranks first: precision stays 1.0 at recall 1.
  DetectionEvaluator ev(1);
  ev.add_image({{0, 10, 10, 60, 60, 0.5}, {0, 200, 200, 220, 220, 0.5}},
               {{0, 10, 10, 60, 60}});
  EvalResult a = ev.evaluate();
  CHECK(a.ap50 == doctest::Approx(1.0));

  DetectionEvaluator ev2(1);
  ev2.add_image({{0, 200, 200, 220, 220, 0.5}, {0, 10, 10, 60, 60, 0.5}},
                {{0, 10, 10, 60, 60}});
  EvalResult b = ev2.evaluate();
  CHECK(b.ap50 == doctest::Approx(0.5));  // FP first: precision at recall 1 is 1/2
}

TEST_CASE("evaluator matches the independent oracle on random scenes") {
  std::mt19937_64 gen(2024);
  for (int rep = 0; rep < 5; ++rep) {
    auto scenes = random_scenes(gen, 8, 3);
    DetectionEvaluator ev(3);
    for (const auto& sc : scenes) ev.add_image(sc.dets, sc.gts);
    EvalResult fast = ev.evaluate();
    EvalResult slow = oracle_evaluate(scenes, 3);
    CHECK(fast.ap == doctest::Approx(slow.ap).epsilon(1e-9));
    CHECK(fast.ap50 == doctest::Approx(slow.ap50).epsilon(1e-9));
    CHECK(fast.ap75 == doctest::Approx(slow.ap75).epsilon(1e-9));
    for (int c = 0; c < 3; ++c)
      CHECK(fast.per_class_ap[c] == doctest::Approx(slow.per_class_ap[c]).epsilon(1e-9));
  }
}

TEST_CASE("max detections per image are capped") {
  DetectionEvaluator ev(1, 2);
  std::vector<Detection> dets;
  for (int i = 0; i < 5; ++i)
    dets.push_back({0, 200.0 + i, 200.0, 210.0 + i, 210.0, 0.9 - 0.1 * i});
  dets.push_back({0, 10, 10, 60, 60, 0.1});  // exact match but ranked below cap
  ev.add_image(dets, {{0, 10, 10, 60, 60}});
  CHECK(ev.evaluate().ap50 == doctest::Approx(0.0));
}

TEST_CASE("input validation") {
  DetectionEvaluator ev(1);
  CHECK_THROWS_AS(ev.add_image({{0, 10, 10, 5, 20, 0.9}}, {}), std::invalid_argument);
  CHECK_THROWS_AS(ev.add_image({{0, 0, 0, 5, 5, 1.5}}, {}), std::invalid_argument);
  CHECK_THROWS_AS(ev.add_image({{3, 0, 0, 5, 5, 0.5}}, {}), std::invalid_argument);
}
