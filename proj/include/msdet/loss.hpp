#pragma once

#include <vector>

#include "msdet/model.hpp"

namespace msdet {

struct HeadSpec {
  std::size_t stride = 0;
  std::vector<Anchor> anchors;
};

std::vector<HeadSpec> head_specs(const ModelConfig& cfg);

struct Positive {
  std::size_t image = 0, anchor = 0, gy = 0, gx = 0;
  std::size_t gt = 0;  // index within the image's ground-truth list
  BBox box;            // normalized target
};

struct HeadTargets {
  std::size_t stride = 0, grid = 0, anchors = 0, batch = 0;
  std::vector<double> objectness;  // [N, A, G, G], 1 at assigned slots
  std::vector<Positive> positives;  // sorted by (image, anchor, gy, gx)
};

using Targets = std::vector<HeadTargets>;

/// Width/height IoU of two boxes sharing a center.
double shape_iou(double w0, double h0, double w1, double h1);

/// Per head, each ground truth takes the best shape-IoU anchor at its center
/// cell when that anchor's side ratios lie within [1/4, 4]. A ground truth
/// admissible on no head goes to the globally best anchor. When two ground
/// truths claim one slot the lower index keeps it.
Targets assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const std::vector<HeadSpec>& heads,
                       std::size_t image_size);
Targets assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const MSDetModel& model);

inline constexpr double kAnchorRatioLimit = 4.0;

enum class LossNorm {
  images,     // sums over the batch divided by the image count
  positives,  // box term over positives, objectness over slots
};

struct LossConfig {
  double lambda_box = 5.0;
  double lambda_obj = 1.0;
  LossNorm norm = LossNorm::images;
};

struct LossTerms {
  Tensor total;     // differentiable scalar
  double box = 0;   // weighted box contribution
  double obj = 0;   // weighted objectness contribution
  std::size_t positives = 0;
  double grad_norm = 0;  // pre-clip, filled in by train_step
};

/// λ_box·Σ_pos (1 - IoU(decoded, target)) + λ_obj·Σ BCE(objectness, target),
/// normalized per LossConfig::norm. One fused node with an analytic backward
/// into every head map. Throws TensorError on a non-finite value.
LossTerms detection_loss(const std::vector<RawPrediction>& preds, const Targets& targets, const LossConfig& cfg = {});

}  // namespace msdet
