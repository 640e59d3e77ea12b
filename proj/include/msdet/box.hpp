#pragma once

#include <vector>

namespace msdet {

/// Axis-aligned box in normalized image coordinates (center, size).
struct BBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
  bool valid() const { return w > 0.0 && h > 0.0; }

  static BBox from_corners(double x0, double y0, double x1, double y1);
  /// Corners clipped to [0,1].
  BBox clamped() const;

  bool operator==(const BBox&) const = default;
};

struct GroundTruth {
  int cls = 0;
  BBox box;
  bool operator==(const GroundTruth&) const = default;
};

struct Detection {
  BBox box;
  double confidence = 0.0;
  int cls = 0;
};

double iou(const BBox& a, const BBox& b);

/// Greedy suppression: visit detections by descending confidence (ties: lower
/// input index first) and keep one iff its IoU with every kept detection of
/// the same class is <= iou_threshold. Output is in visit order.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

}  // namespace msdet
