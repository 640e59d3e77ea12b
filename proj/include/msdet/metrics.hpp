#pragma once

#include <string>
#include <vector>

#include "msdet/box.hpp"

namespace msdet {

struct EvalOptions {
  std::vector<double> iou_thresholds{0.5};
  double operating_conf = 0.25;  // P / R / F1 use detections at or above this
  bool size_buckets = true;
};

struct Metrics {
  double precision = 0, recall = 0, f1 = 0;
  std::vector<double> ap;  // one per IoU threshold
  double map = 0;          // mean of ap
  // AP at the first threshold restricted to ground-truth area terciles;
  // NaN when a bucket holds no ground truth.
  double ap_small = 0, ap_medium = 0, ap_large = 0;
  std::size_t num_gt = 0, num_det = 0;
};

/// true-positive flag per detection (input order) after greedy one-to-one
/// matching by descending confidence; IoU ties go to the lower GT index.
std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                   double iou_threshold);

/// All-point AP from a ranked list (descending confidence) of hit flags.
double average_precision(const std::vector<bool>& ranked_hits, std::size_t num_gt);

Metrics evaluate(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<GroundTruth>>& gts,
                 const EvalOptions& opts = {});

std::vector<double> coco_thresholds();  // 0.50:0.05:0.95

std::string format_metrics_table(const Metrics& m, const std::vector<double>& thresholds);
std::string format_metrics_csv(const Metrics& m, const std::vector<double>& thresholds);

}  // namespace msdet
