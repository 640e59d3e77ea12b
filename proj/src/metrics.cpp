#include "msdet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace msdet {

namespace {

enum class Hit { fp, tp, ignored };

std::vector<std::size_t> by_confidence(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  return order;
}

// ignored GTs absorb matches without counting; they are only used when no
// regular GT qualifies.
std::vector<Hit> match_core(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, double thr,
                            const std::vector<bool>& gt_ignored) {
  std::vector<Hit> out(dets.size(), Hit::fp);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d : by_confidence(dets)) {
    long best[2] = {-1, -1};
    double best_iou[2] = {-1.0, -1.0};
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].cls != dets[d].cls) continue;
      const double v = iou(dets[d].box, gts[g].box);
      if (v < thr) continue;
      const int slot = gt_ignored[g] ? 1 : 0;
      if (v > best_iou[slot]) {
        best_iou[slot] = v;
        best[slot] = static_cast<long>(g);
      }
    }
    if (best[0] >= 0) {
      taken[static_cast<std::size_t>(best[0])] = true;
      out[d] = Hit::tp;
    } else if (best[1] >= 0) {
      taken[static_cast<std::size_t>(best[1])] = true;
      out[d] = Hit::ignored;
    }
  }
  return out;
}

struct Ranked {
  double conf;
  std::size_t image, index;
  Hit hit;
};

double ranked_ap(std::vector<Ranked> items, std::size_t num_gt) {
  std::stable_sort(items.begin(), items.end(), [](const Ranked& a, const Ranked& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });
  std::vector<bool> hits;
  for (const auto& r : items) {
    if (r.hit != Hit::ignored) hits.push_back(r.hit == Hit::tp);
  }
  return average_precision(hits, num_gt);
}

}  // namespace

std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                   double iou_threshold) {
  const auto hits = match_core(dets, gts, iou_threshold, std::vector<bool>(gts.size(), false));
  std::vector<bool> out(hits.size());
  for (std::size_t i = 0; i < hits.size(); ++i) out[i] = hits[i] == Hit::tp;
  return out;
}

double average_precision(const std::vector<bool>& ranked_hits, std::size_t num_gt) {
  if (num_gt == 0) return ranked_hits.empty() ? 1.0 : 0.0;
  const std::size_t n = ranked_hits.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += ranked_hits[i] ? 1 : 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

Metrics evaluate(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<GroundTruth>>& gts,
                 const EvalOptions& opts) {
  if (dets.size() != gts.size()) throw std::invalid_argument("evaluate: detections and ground truths differ in image count");
  if (opts.iou_thresholds.empty()) throw std::invalid_argument("evaluate: no IoU thresholds");
  Metrics m;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    m.num_gt += gts[i].size();
    m.num_det += dets[i].size();
  }

  for (double thr : opts.iou_thresholds) {
    std::vector<Ranked> items;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      const auto hits = match_core(dets[i], gts[i], thr, std::vector<bool>(gts[i].size(), false));
      for (std::size_t d = 0; d < hits.size(); ++d) items.push_back({dets[i][d].confidence, i, d, hits[d]});
    }
    m.ap.push_back(ranked_ap(std::move(items), m.num_gt));
  }
  m.map = std::accumulate(m.ap.begin(), m.ap.end(), 0.0) / static_cast<double>(m.ap.size());

  // Operating point at the first threshold.
  const double thr0 = opts.iou_thresholds.front();
  std::size_t tp = 0, kept = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    std::vector<Detection> above;
    for (const auto& d : dets[i]) {
      if (d.confidence >= opts.operating_conf) above.push_back(d);
    }
    kept += above.size();
    for (bool h : match_detections(above, gts[i], thr0)) tp += h ? 1 : 0;
  }
  if (m.num_gt == 0) {
    m.recall = 1.0;
    m.precision = kept == 0 ? 1.0 : 0.0;
  } else {
    m.recall = static_cast<double>(tp) / static_cast<double>(m.num_gt);
    m.precision = kept == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(kept);
  }
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;

  const double nan = std::numeric_limits<double>::quiet_NaN();
  m.ap_small = m.ap_medium = m.ap_large = nan;
  if (opts.size_buckets && m.num_gt > 0) {
    std::vector<double> areas;
    for (const auto& g : gts) {
      for (const auto& b : g) areas.push_back(b.box.area());
    }
    std::sort(areas.begin(), areas.end());
    const std::size_t n = areas.size();
    const double inf = std::numeric_limits<double>::infinity();
    const double edges[4] = {-inf, areas[n / 3], areas[(2 * n) / 3], inf};
    double* out[3] = {&m.ap_small, &m.ap_medium, &m.ap_large};
    for (int b = 0; b < 3; ++b) {
      auto inside = [&](double a) { return a >= edges[b] && a < edges[b + 1]; };
      std::vector<Ranked> items;
      std::size_t bucket_gt = 0;
      for (std::size_t i = 0; i < dets.size(); ++i) {
        std::vector<bool> ignored(gts[i].size());
        for (std::size_t g = 0; g < gts[i].size(); ++g) {
          ignored[g] = !inside(gts[i][g].box.area());
          bucket_gt += ignored[g] ? 0 : 1;
        }
        auto hits = match_core(dets[i], gts[i], thr0, ignored);
        for (std::size_t d = 0; d < hits.size(); ++d) {
          if (hits[d] == Hit::fp && !inside(dets[i][d].box.area())) hits[d] = Hit::ignored;
          items.push_back({dets[i][d].confidence, i, d, hits[d]});
        }
      }
      if (bucket_gt > 0) *out[b] = ranked_ap(std::move(items), bucket_gt);
    }
  }
  return m;
}

std::string format_metrics_table(const Metrics& m, const std::vector<double>& thresholds) {
  std::string out;
  char buf[128];
  auto row = [&](const char* name, double v) {
    if (std::isnan(v)) {
      std::snprintf(buf, sizeof buf, "%-12s %8s\n", name, "n/a");
    } else {
      std::snprintf(buf, sizeof buf, "%-12s %8.4f\n", name, v);
    }
    out += buf;
  };
  row("precision", m.precision);
  row("recall", m.recall);
  row("f1", m.f1);
  for (std::size_t i = 0; i < m.ap.size() && i < thresholds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "AP@%.2f", thresholds[i]);
    row(name, m.ap[i]);
  }
  row("mAP", m.map);
  row("AP_S", m.ap_small);
  row("AP_M", m.ap_medium);
  row("AP_L", m.ap_large);
  std::snprintf(buf, sizeof buf, "%-12s %8zu\n%-12s %8zu\n", "gt", m.num_gt, "detections", m.num_det);
  out += buf;
  return out;
}

std::string format_metrics_csv(const Metrics& m, const std::vector<double>& thresholds) {
  std::string out = "metric,value\n";
  char buf[96];
  auto row = [&](const std::string& name, double v) {
    std::snprintf(buf, sizeof buf, "%s,%.6f\n", name.c_str(), v);
    out += buf;
  };
  row("precision", m.precision);
  row("recall", m.recall);
  row("f1", m.f1);
  for (std::size_t i = 0; i < m.ap.size() && i < thresholds.size(); ++i) {
    std::snprintf(buf, sizeof buf, "ap@%.2f", thresholds[i]);
    row(buf, m.ap[i]);
  }
  row("map", m.map);
  row("ap_small", m.ap_small);
  row("ap_medium", m.ap_medium);
  row("ap_large", m.ap_large);
  row("num_gt", static_cast<double>(m.num_gt));
  row("num_det", static_cast<double>(m.num_det));
  return out;
}

}  // namespace msdet
