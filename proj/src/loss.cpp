#include "msdet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

namespace msdet {

namespace {

double sigmoid_d(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Stable BCE with logits.
double bce(double x, double t) { return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x))); }

struct IouGrad {
  double iou = 0;
  double dcx = 0, dcy = 0, dw = 0, dh = 0;  // d IoU / d pred
};

// IoU of pred (center form, any units) against target and its gradient with
// respect to the predicted box.
IouGrad iou_with_grad(double cx, double cy, double w, double h, const BBox& t) {
  const double px0 = cx - w / 2, px1 = cx + w / 2, py0 = cy - h / 2, py1 = cy + h / 2;
  const double ix0 = std::max(px0, t.x0()), ix1 = std::min(px1, t.x1());
  const double iy0 = std::max(py0, t.y0()), iy1 = std::min(py1, t.y1());
  const double iw = ix1 - ix0, ih = iy1 - iy0;
  const double area_p = w * h;
  const double area_t = t.w * t.h;
  IouGrad g;
  double inter = 0, di_dx0 = 0, di_dx1 = 0, di_dy0 = 0, di_dy1 = 0;
  if (iw > 0 && ih > 0) {
    inter = iw * ih;
    di_dx1 = px1 < t.x1() ? ih : 0.0;
    di_dx0 = px0 > t.x0() ? -ih : 0.0;
    di_dy1 = py1 < t.y1() ? iw : 0.0;
    di_dy0 = py0 > t.y0() ? -iw : 0.0;
  }
  const double uni = area_p + area_t - inter;
  g.iou = inter / uni;
  // dIoU = (dI·U - I·dU)/U², dU = dA_p - dI
  const double a = (uni + inter) / (uni * uni);  // coefficient of dI
  const double b = -inter / (uni * uni);         // coefficient of dA_p
  const double dx0 = a * di_dx0, dx1 = a * di_dx1, dy0 = a * di_dy0, dy1 = a * di_dy1;
  g.dcx = dx0 + dx1;
  g.dcy = dy0 + dy1;
  g.dw = 0.5 * (dx1 - dx0) + b * h;
  g.dh = 0.5 * (dy1 - dy0) + b * w;
  return g;
}

}  // namespace

std::vector<HeadSpec> head_specs(const ModelConfig& cfg) {
  std::vector<HeadSpec> out;
  for (std::size_t s : cfg.head_strides()) out.push_back({s, cfg.anchors_for(s)});
  return out;
}

double shape_iou(double w0, double h0, double w1, double h1) {
  const double inter = std::min(w0, w1) * std::min(h0, h1);
  return inter / (w0 * h0 + w1 * h1 - inter);
}

Targets assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const std::vector<HeadSpec>& heads,
                       std::size_t image_size) {
  const double size = static_cast<double>(image_size);
  Targets out(heads.size());
  std::vector<std::map<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>, std::size_t>> taken(
      heads.size());
  for (std::size_t h = 0; h < heads.size(); ++h) {
    if (image_size % heads[h].stride != 0) throw TensorError("assign_targets: image size not divisible by stride");
    auto& t = out[h];
    t.stride = heads[h].stride;
    t.grid = image_size / t.stride;
    t.anchors = heads[h].anchors.size();
    t.batch = gts.size();
    t.objectness.assign(t.batch * t.anchors * t.grid * t.grid, 0.0);
  }

  auto place = [&](std::size_t h, std::size_t n, std::size_t a, std::size_t gi, const BBox& box) {
    auto& t = out[h];
    const auto cell = [&](double c) {
      const auto v = static_cast<long>(std::floor(c * size / static_cast<double>(t.stride)));
      return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(t.grid) - 1));
    };
    const std::size_t gx = cell(box.cx), gy = cell(box.cy);
    const auto key = std::make_tuple(n, a, gy, gx);
    if (taken[h].count(key)) return;
    taken[h][key] = gi;
    t.objectness[((n * t.anchors + a) * t.grid + gy) * t.grid + gx] = 1.0;
    t.positives.push_back({n, a, gy, gx, gi, box});
  };

  for (std::size_t n = 0; n < gts.size(); ++n) {
    for (std::size_t gi = 0; gi < gts[n].size(); ++gi) {
      const BBox& box = gts[n][gi].box;
      if (!box.valid()) throw TensorError("assign_targets: invalid ground-truth box");
      const double w = box.w * size, hgt = box.h * size;
      bool any = false;
      double global_best = -1;
      std::size_t gh = 0, ga = 0;
      for (std::size_t h = 0; h < heads.size(); ++h) {
        double best = -1;
        std::size_t best_a = 0;
        for (std::size_t a = 0; a < heads[h].anchors.size(); ++a) {
          const auto& an = heads[h].anchors[a];
          const double v = shape_iou(w, hgt, an.w, an.h);
          if (v > best) {
            best = v;
            best_a = a;
          }
          if (v > global_best) {
            global_best = v;
            gh = h;
            ga = a;
          }
        }
        const auto& an = heads[h].anchors[best_a];
        const double ratio = std::max({w / an.w, an.w / w, hgt / an.h, an.h / hgt});
        if (ratio <= kAnchorRatioLimit) {
          place(h, n, best_a, gi, box);
          any = true;
        }
      }
      if (!any) place(gh, n, ga, gi, box);
    }
  }
  for (auto& t : out) {
    std::sort(t.positives.begin(), t.positives.end(), [](const Positive& a, const Positive& b) {
      return std::tie(a.image, a.anchor, a.gy, a.gx) < std::tie(b.image, b.anchor, b.gy, b.gx);
    });
  }
  return out;
}

Targets assign_targets(const std::vector<std::vector<GroundTruth>>& gts, const MSDetModel& model) {
  return assign_targets(gts, head_specs(model.config()), model.config().input_size);
}

LossTerms detection_loss(const std::vector<RawPrediction>& preds, const Targets& targets, const LossConfig& cfg) {
  if (preds.size() != targets.size()) {
    throw TensorError("detection_loss: " + std::to_string(preds.size()) + " heads but " +
                      std::to_string(targets.size()) + " target sets");
  }
  std::size_t batch = 0, slots = 0, positives = 0;
  for (std::size_t h = 0; h < preds.size(); ++h) {
    const auto& p = preds[h];
    const auto& t = targets[h];
    const Shape want{t.batch, t.anchors * (5 + p.num_classes), t.grid, t.grid};
    if (p.map.shape() != want || p.stride != t.stride || p.anchors.size() != t.anchors) {
      throw TensorError("detection_loss: head " + std::to_string(h) + " map " + shape_str(p.map.shape()) +
                        " does not match targets " + shape_str(want));
    }
    batch = t.batch;
    slots += t.objectness.size();
    positives += t.positives.size();
  }
  if (batch == 0) throw TensorError("detection_loss: empty batch");
  const double box_den = cfg.norm == LossNorm::images ? static_cast<double>(batch)
                                                      : static_cast<double>(std::max<std::size_t>(1, positives));
  const double obj_den = cfg.norm == LossNorm::images ? static_cast<double>(batch) : static_cast<double>(slots);
  const double wb = cfg.lambda_box / box_den, wo = cfg.lambda_obj / obj_den;

  std::vector<std::vector<double>> grads(preds.size());
  double box_sum = 0, obj_sum = 0;
  for (std::size_t h = 0; h < preds.size(); ++h) {
    const auto& p = preds[h];
    const auto& t = targets[h];
    const auto v = p.map.values();
    auto& g = grads[h];
    g.assign(v.size(), 0.0);
    const std::size_t per = 5 + p.num_classes, gg = t.grid * t.grid;
    auto index = [&](std::size_t n, std::size_t a, std::size_t c, std::size_t y, std::size_t x) {
      return ((n * t.anchors * per + a * per + c) * t.grid + y) * t.grid + x;
    };
    for (std::size_t n = 0; n < t.batch; ++n) {
      for (std::size_t a = 0; a < t.anchors; ++a) {
        for (std::size_t cell = 0; cell < gg; ++cell) {
          const std::size_t i = index(n, a, 4, cell / t.grid, cell % t.grid);
          const double target = t.objectness[(n * t.anchors + a) * gg + cell];
          obj_sum += bce(v[i], target);
          g[i] = wo * (sigmoid_d(v[i]) - target);
        }
      }
    }
    const double s = static_cast<double>(t.stride);
    const double size = static_cast<double>(t.grid * t.stride);
    for (const auto& pos : t.positives) {
      const Anchor& an = p.anchors[pos.anchor];
      const std::size_t ix = index(pos.image, pos.anchor, 0, pos.gy, pos.gx);
      const std::size_t step = gg;  // channel stride
      const double sx = sigmoid_d(v[ix]), sy = sigmoid_d(v[ix + step]);
      const double sw = sigmoid_d(v[ix + 2 * step]), sh = sigmoid_d(v[ix + 3 * step]);
      const double cx = (2 * sx - 0.5 + static_cast<double>(pos.gx)) * s;
      const double cy = (2 * sy - 0.5 + static_cast<double>(pos.gy)) * s;
      const double w = an.w * 4 * sw * sw, hh = an.h * 4 * sh * sh;
      const BBox target{pos.box.cx * size, pos.box.cy * size, pos.box.w * size, pos.box.h * size};
      const IouGrad ig = iou_with_grad(cx, cy, w, hh, target);
      box_sum += 1.0 - ig.iou;
      g[ix] -= wb * ig.dcx * 2 * s * sx * (1 - sx);
      g[ix + step] -= wb * ig.dcy * 2 * s * sy * (1 - sy);
      g[ix + 2 * step] -= wb * ig.dw * 8 * an.w * sw * sw * (1 - sw);
      g[ix + 3 * step] -= wb * ig.dh * 8 * an.h * sh * sh * (1 - sh);
    }
  }

  LossTerms out;
  out.box = wb * box_sum;
  out.obj = wo * obj_sum;
  out.positives = positives;
  const double total = out.box + out.obj;
  if (!std::isfinite(total)) {
    throw TensorError("detection_loss: non-finite loss (box " + std::to_string(out.box) + ", obj " +
                      std::to_string(out.obj) + ")");
  }
  std::vector<Tensor> inputs;
  for (const auto& p : preds) inputs.push_back(p.map);
  out.total = detail::make_result("detection_loss", {1}, {total}, inputs,
                                  [grads = std::move(grads)](detail::Node& self) {
                                    const double up = self.grad[0];
                                    for (std::size_t h = 0; h < self.inputs.size(); ++h) {
                                      auto& in = *self.inputs[h];
                                      if (!in.requires_grad) continue;
                                      auto& dst = in.ensure_grad();
                                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += up * grads[h][i];
                                    }
                                  });
  return out;
}

}  // namespace msdet
