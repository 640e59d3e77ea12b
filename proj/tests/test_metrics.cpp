#include <doctest.h>

#include <cmath>

#include "msdet/metrics.hpp"

using namespace msdet;

namespace {

Detection det(double cx, double cy, double w, double conf, int cls = 0) { return {{cx, cy, w, w}, conf, cls}; }
GroundTruth gt(double cx, double cy, double w, int cls = 0) { return {cls, {cx, cy, w, w}}; }

}  // namespace

TEST_CASE("IoU examples") {
  const BBox a = BBox::from_corners(0.0, 0.0, 0.2, 0.2);
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, BBox::from_corners(0.1, 0.0, 0.3, 0.2)) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(a, BBox::from_corners(0.5, 0.5, 0.6, 0.6)) == 0.0);
  CHECK(iou(a, BBox::from_corners(0.2, 0.0, 0.4, 0.2)) == 0.0);  // touching edges
  CHECK(iou(a, BBox::from_corners(0.05, 0.05, 0.15, 0.15)) == doctest::Approx(0.25));
  CHECK(iou(BBox{0.5, 0.5, 0.0, 0.0}, BBox{0.5, 0.5, 0.0, 0.0}) == 0.0);
}

TEST_CASE("NMS keeps the strongest of each overlapping same-class group") {
  const std::vector<Detection> dets{det(0.30, 0.3, 0.2, 0.6), det(0.31, 0.3, 0.2, 0.9), det(0.8, 0.8, 0.1, 0.5),
                                    det(0.30, 0.3, 0.2, 0.7, 1)};
  const auto kept = nms(dets, 0.5);
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].confidence == 0.9);
  CHECK(kept[1].confidence == 0.7);  // other class survives
  CHECK(kept[2].confidence == 0.5);
  CHECK(nms(dets, 1.0).size() == 4);
  CHECK(nms({}, 0.5).empty());
  // Equal confidences: the earlier input wins.
  const auto tie = nms({det(0.30, 0.3, 0.2, 0.5), det(0.31, 0.3, 0.2, 0.5)}, 0.5);
  REQUIRE(tie.size() == 1);
  CHECK(tie[0].box.cx == 0.30);
}

TEST_CASE("greedy matching is one-to-one by confidence") {
  const std::vector<GroundTruth> gts{gt(0.3, 0.3, 0.2)};
  const auto hits = match_detections({det(0.3, 0.3, 0.2, 0.4), det(0.31, 0.3, 0.2, 0.8)}, gts, 0.5);
  CHECK_FALSE(hits[0]);
  CHECK(hits[1]);
  CHECK_FALSE(match_detections({det(0.3, 0.3, 0.2, 0.8, 1)}, gts, 0.5)[0]);  // class must agree
  CHECK_FALSE(match_detections({det(0.38, 0.3, 0.2, 0.8)}, gts, 0.5)[0]);    // IoU 0.43
}

TEST_CASE("all-point average precision") {
  CHECK(average_precision({true, true}, 2) == doctest::Approx(1.0));
  CHECK(average_precision({false, true}, 1) == doctest::Approx(0.5));
  CHECK(average_precision({true, false, true}, 2) == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));
  CHECK(average_precision({true}, 2) == doctest::Approx(0.5));
  CHECK(average_precision({}, 3) == 0.0);
}

TEST_CASE("evaluate combines images and reports the operating point") {
  const std::vector<std::vector<GroundTruth>> gts{{gt(0.3, 0.3, 0.2)}, {gt(0.6, 0.6, 0.1), gt(0.2, 0.2, 0.1)}};
  const std::vector<std::vector<Detection>> dets{{det(0.3, 0.3, 0.2, 0.9), det(0.7, 0.7, 0.1, 0.95)},
                                                 {det(0.6, 0.6, 0.1, 0.8), det(0.2, 0.2, 0.1, 0.1)}};
  const Metrics m = evaluate(dets, gts);
  CHECK(m.num_gt == 3);
  CHECK(m.num_det == 4);
  // Operating conf 0.25 keeps three detections, two correct.
  CHECK(m.precision == doctest::Approx(2.0 / 3.0));
  CHECK(m.recall == doctest::Approx(2.0 / 3.0));
  CHECK(m.f1 == doctest::Approx(2.0 / 3.0));
  // Ranked: F T T T → envelope 0.75 on all three recall steps.
  CHECK(m.map == doctest::Approx(0.75));
}

TEST_CASE("metrics are invariant to detection order and monotone confidence maps") {
  const std::vector<std::vector<GroundTruth>> gts{{gt(0.3, 0.3, 0.2), gt(0.7, 0.7, 0.1)}};
  std::vector<std::vector<Detection>> dets{
      {det(0.3, 0.3, 0.2, 0.9), det(0.5, 0.5, 0.1, 0.6), det(0.71, 0.7, 0.1, 0.4)}};
  EvalOptions opts;
  opts.operating_conf = 0.0;
  const Metrics a = evaluate(dets, gts, opts);
  std::reverse(dets[0].begin(), dets[0].end());
  const Metrics b = evaluate(dets, gts, opts);
  for (auto& d : dets[0]) d.confidence = d.confidence * d.confidence;
  const Metrics c = evaluate(dets, gts, opts);
  CHECK(a.map == b.map);
  CHECK(a.map == c.map);
  CHECK(a.precision == c.precision);
}

TEST_CASE("vacuous and degenerate cases") {
  const Metrics none = evaluate({{}}, {{}});
  CHECK(none.precision == 1.0);
  CHECK(none.recall == 1.0);
  CHECK(none.map == 1.0);
  const Metrics only_dets = evaluate({{det(0.5, 0.5, 0.1, 0.9)}}, {{}});
  CHECK(only_dets.precision == 0.0);
  CHECK(only_dets.recall == 1.0);
  CHECK(only_dets.map == 0.0);
  const Metrics only_gts = evaluate({{}}, {{gt(0.5, 0.5, 0.1)}});
  CHECK(only_gts.precision == 0.0);
  CHECK(only_gts.recall == 0.0);
  CHECK(only_gts.map == 0.0);
  CHECK_THROWS(evaluate({{}}, {{}, {}}));
}

TEST_CASE("size buckets split ground truth into area terciles") {
  std::vector<std::vector<GroundTruth>> gts{{gt(0.2, 0.2, 0.04), gt(0.5, 0.5, 0.08), gt(0.8, 0.8, 0.16)}};
  std::vector<std::vector<Detection>> dets{{det(0.2, 0.2, 0.04, 0.9), det(0.8, 0.8, 0.16, 0.8)}};
  const Metrics m = evaluate(dets, gts);
  CHECK(m.ap_small == doctest::Approx(1.0));
  CHECK(m.ap_medium == 0.0);
  CHECK(m.ap_large == doctest::Approx(1.0));

  // Equal areas leave the lower buckets empty.
  const Metrics same = evaluate({{det(0.2, 0.2, 0.05, 0.9)}}, {{gt(0.2, 0.2, 0.05), gt(0.6, 0.6, 0.05)}});
  CHECK(std::isnan(same.ap_small));
  CHECK(std::isnan(same.ap_medium));
  CHECK(same.ap_large == doctest::Approx(0.5));
}

TEST_CASE("COCO thresholds and report formats") {
  const auto t = coco_thresholds();
  REQUIRE(t.size() == 10);
  CHECK(t.front() == doctest::Approx(0.5));
  CHECK(t.back() == doctest::Approx(0.95));
  EvalOptions opts;
  opts.iou_thresholds = t;
  const Metrics m = evaluate({{det(0.3, 0.3, 0.2, 0.9)}}, {{gt(0.3, 0.3, 0.2)}}, opts);
  CHECK(m.ap.size() == 10);
  CHECK(m.map == doctest::Approx(1.0));
  const std::string csv = format_metrics_csv(m, t);
  CHECK(csv.rfind("metric,value\n", 0) == 0);
  CHECK(csv.find("precision") != std::string::npos);
  CHECK(format_metrics_table(m, t).find("mAP") != std::string::npos);
}
