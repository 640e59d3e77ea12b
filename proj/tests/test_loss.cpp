#include <doctest.h>

#include <cmath>

#include "msdet/loss.hpp"

using namespace msdet;

namespace {

std::vector<HeadSpec> desk_heads() { return head_specs(ModelConfig::desk()); }

GroundTruth square_px(double cx, double cy, double side, double image = 96) {
  return {0, {cx / image, cy / image, side / image, side / image}};
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Head maps with every box logit 0 and objectness / class logits fixed.
std::vector<RawPrediction> constant_preds(const std::vector<HeadSpec>& heads, std::size_t batch, double obj,
                                          std::size_t image = 96) {
  std::vector<RawPrediction> out;
  for (const auto& h : heads) {
    const std::size_t g = image / h.stride, a = h.anchors.size();
    std::vector<double> v(batch * a * 6 * g * g, 0.0);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t k = 0; k < a; ++k)
        for (std::size_t i = 0; i < g * g; ++i) {
          v[((n * a * 6) + k * 6 + 4) * g * g + i] = obj;
          v[((n * a * 6) + k * 6 + 5) * g * g + i] = 5.0;
        }
    out.push_back({Tensor::from_values({batch, a * 6, g, g}, v, true), h.stride, h.anchors, 1});
  }
  return out;
}

}  // namespace

TEST_CASE("shape IoU of concentric boxes") {
  CHECK(shape_iou(4, 4, 4, 4) == doctest::Approx(1.0));
  CHECK(shape_iou(2, 2, 4, 4) == doctest::Approx(0.25));
  CHECK(shape_iou(2, 4, 4, 2) == doctest::Approx(4.0 / 12.0));
}

TEST_CASE("a centered box is assigned on every admissible head") {
  const auto heads = desk_heads();
  const Targets t = assign_targets({{square_px(50, 50, 16)}}, heads, 96);
  REQUIRE(t.size() == heads.size());
  for (std::size_t h = 0; h < t.size(); ++h) {
    const auto& ht = t[h];
    INFO("stride " << ht.stride);
    REQUIRE(ht.positives.size() == 1);
    const Positive& p = ht.positives[0];
    CHECK(p.gx == 50 / ht.stride);
    CHECK(p.gy == 50 / ht.stride);
    // Best anchor is the one closest in side to 16 px.
    const double side = heads[h].anchors[p.anchor].w;
    for (const auto& a : heads[h].anchors) CHECK(std::abs(std::log(a.w / 16)) >= std::abs(std::log(side / 16)) - 1e-12);
    const std::size_t g = ht.grid;
    CHECK(ht.objectness[(p.anchor * g + p.gy) * g + p.gx] == 1.0);
    double ones = 0;
    for (double o : ht.objectness) ones += o;
    CHECK(ones == 1.0);
  }
}

TEST_CASE("empty images produce no positives") {
  const Targets t = assign_targets({{}, {}}, desk_heads(), 96);
  for (const auto& ht : t) {
    CHECK(ht.positives.empty());
    CHECK(ht.batch == 2);
    for (double o : ht.objectness) CHECK(o == 0.0);
  }
}

TEST_CASE("a box admissible nowhere falls back to the globally best anchor") {
  const auto heads = desk_heads();
  const Targets t = assign_targets({{square_px(20, 30, 1)}}, heads, 96);
  std::size_t total = 0;
  for (const auto& ht : t) {
    total += ht.positives.size();
    if (!ht.positives.empty()) {
      CHECK(ht.stride == 4);
      CHECK(ht.positives[0].anchor == 0);
      CHECK(ht.positives[0].gx == 5);
      CHECK(ht.positives[0].gy == 7);
    }
  }
  CHECK(total == 1);
}

TEST_CASE("slot collisions keep the lower ground-truth index") {
  const auto heads = desk_heads();
  const Targets t = assign_targets({{square_px(49, 49, 16), square_px(50, 50, 15)}}, heads, 96);
  for (const auto& ht : t) {
    REQUIRE(ht.positives.size() == 1);
    CHECK(ht.positives[0].gt == 0);
  }
  // Different images never collide, and positives are ordered by image.
  const Targets two = assign_targets({{square_px(50, 50, 16)}, {square_px(50, 50, 16)}}, heads, 96);
  for (const auto& ht : two) {
    REQUIRE(ht.positives.size() == 2);
    CHECK(ht.positives[0].image == 0);
    CHECK(ht.positives[1].image == 1);
  }
}

TEST_CASE("a perfect prediction has zero box loss and near-zero objectness loss") {
  const auto heads = desk_heads();
  const std::vector<std::vector<GroundTruth>> gts{{square_px(30, 40, 12), square_px(70, 60, 20)}};
  const Targets t = assign_targets(gts, heads, 96);
  auto preds = constant_preds(heads, 1, -20.0);
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const std::size_t g = t[h].grid;
    auto v = preds[h].map.mutable_values();
    for (const auto& p : t[h].positives) {
      const auto enc = encode_box(p.box, p.gx, p.gy, heads[h].stride, heads[h].anchors[p.anchor], 96);
      REQUIRE(enc.has_value());
      const double logits[5] = {enc->tx, enc->ty, enc->tw, enc->th, 20.0};
      for (std::size_t c = 0; c < 5; ++c) v[((p.anchor * 6 + c) * g + p.gy) * g + p.gx] = logits[c];
    }
  }
  const LossTerms l = detection_loss(preds, t);
  CHECK(l.positives >= 2);
  CHECK(l.box == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
  CHECK(l.obj < 1e-3);
  CHECK(l.total.item() == doctest::Approx(l.box + l.obj));
}

TEST_CASE("without positives the loss is the objectness BCE per image") {
  const auto heads = desk_heads();
  const Targets t = assign_targets({{}, {}}, heads, 96);
  const double logit = -1.3;
  const auto preds = constant_preds(heads, 2, logit);
  std::size_t slots = 0;
  for (const auto& ht : t) slots += ht.objectness.size();
  const LossTerms l = detection_loss(preds, t);
  CHECK(l.box == 0.0);
  CHECK(l.obj == doctest::Approx(static_cast<double>(slots) * softplus(logit) / 2.0).epsilon(1e-12));

  LossConfig per_slot;
  per_slot.norm = LossNorm::positives;
  per_slot.lambda_obj = 2.0;
  CHECK(detection_loss(preds, t, per_slot).obj == doctest::Approx(2.0 * softplus(logit)).epsilon(1e-12));
}

TEST_CASE("loss is non-negative and rejects bad input") {
  const auto heads = desk_heads();
  const Targets t = assign_targets({{square_px(40, 40, 10)}}, heads, 96);
  for (double obj : {-5.0, 0.0, 5.0}) {
    const LossTerms l = detection_loss(constant_preds(heads, 1, obj), t);
    CHECK(l.box >= 0.0);
    CHECK(l.obj >= 0.0);
    CHECK(l.total.item() >= 0.0);
  }
  auto preds = constant_preds(heads, 1, 0.0);
  CHECK_THROWS_AS(detection_loss({preds[0]}, t), TensorError);
  preds[0].map.mutable_values()[4 * preds[0].grid() * preds[0].grid()] = std::nan("");  // an objectness logit
  CHECK_THROWS_AS(detection_loss(preds, t), TensorError);
  CHECK_THROWS_AS(detection_loss(constant_preds(heads, 1, 0.0, 64), t), TensorError);
}

TEST_CASE("loss gradient flows into every head map") {
  const auto heads = desk_heads();
  const Targets t = assign_targets({{square_px(40, 40, 10)}}, heads, 96);
  const auto preds = constant_preds(heads, 1, 0.0);
  detection_loss(preds, t).total.backward();
  for (const auto& p : preds) {
    REQUIRE(p.map.has_grad());
    double norm = 0;
    for (double g : p.map.grad()) norm += g * g;
    CHECK(norm > 0);
  }
}
