#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "msdet/model.hpp"

using namespace msdet;

TEST_CASE("box encode inverts decode inside the reachable range") {
  const Anchor a{16, 32};
  for (double tx : {-2.0, 0.0, 1.3}) {
    for (double tw : {-1.5, 0.2, 2.0}) {
      const BoxLogits t{tx, -tx / 2, tw, -tw};
      const BBox b = decode_box(t, 3, 5, 8, a, 96);
      const auto back = encode_box(b, 3, 5, 8, a, 96);
      REQUIRE(back.has_value());
      CHECK(back->tx == doctest::Approx(t.tx).epsilon(1e-9));
      CHECK(back->ty == doctest::Approx(t.ty).epsilon(1e-9));
      CHECK(back->tw == doctest::Approx(t.tw).epsilon(1e-9));
      CHECK(back->th == doctest::Approx(t.th).epsilon(1e-9));
    }
  }
  // Zero logits put the center mid-cell and the size at the anchor.
  const BBox mid = decode_box({}, 2, 1, 16, {32, 32}, 64);
  CHECK(mid.cx == doctest::Approx(2.5 * 16 / 64.0));
  CHECK(mid.cy == doctest::Approx(1.5 * 16 / 64.0));
  CHECK(mid.w == doctest::Approx(0.5));
  CHECK_FALSE(encode_box({0.9, 0.1, 0.1, 0.1}, 0, 0, 8, a, 96).has_value());  // wrong cell
  CHECK_FALSE(encode_box({0.05, 0.05, 0.9, 0.1}, 0, 0, 8, a, 96).has_value());  // too large
}

TEST_CASE("heads sit at strides 16, 8 and 4 with the configured anchors") {
  ModelConfig mc = ModelConfig::desk();
  mc.input_size = 64;
  MSDetModel model(mc);
  NoGradGuard guard;
  const auto preds = model.forward(Tensor::zeros({2, 3, 64, 64}), Mode::eval);
  REQUIRE(preds.size() == 3);
  std::vector<std::size_t> strides;
  for (const auto& p : preds) {
    strides.push_back(p.stride);
    CHECK(p.map.shape() == Shape{2, mc.head_channels(), 64 / p.stride, 64 / p.stride});
    REQUIRE(p.anchors.size() == 3);
    CHECK(p.anchors[1].w == doctest::Approx(4.0 * p.stride));
    CHECK(p.anchors[0].w == doctest::Approx(2.0 * p.stride));
  }
  std::sort(strides.begin(), strides.end());
  CHECK(strides == std::vector<std::size_t>{4, 8, 16});

  mc.use_todb = false;
  MSDetModel no_todb(mc);
  CHECK(no_todb.forward(Tensor::zeros({1, 3, 64, 64}), Mode::eval).size() == 2);
  CHECK(mc.head_strides() == std::vector<std::size_t>{8, 16});
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 3, 60, 60}), Mode::eval), TensorError);
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 1, 64, 64}), Mode::eval), TensorError);
}

TEST_CASE("head biases encode the object prior and a constant class score") {
  const ModelConfig mc = ModelConfig::desk();
  MSDetModel model(mc);
  const auto named = model.named_tensors();
  for (const char* head : {"head4", "head8", "head16"}) {
    const std::size_t stride = head[4] == '4' ? 4 : head[4] == '8' ? 8 : 16;
    const double cells = static_cast<double>(mc.input_size / stride);
    const NamedTensor* bias = nullptr;
    const NamedTensor* weight = nullptr;
    for (const auto& n : named) {
      if (n.name == std::string(head) + ".bias") bias = &n;
      if (n.name == std::string(head) + ".weight") weight = &n;
    }
    REQUIRE(bias);
    REQUIRE(weight);
    const std::size_t cin = weight->tensor.dim(1);
    for (std::size_t a = 0; a < 3; ++a) {
      CHECK(bias->tensor[a * 6 + 4] == doctest::Approx(std::log(8.0 / (cells * cells))));
      CHECK(bias->tensor[a * 6 + 5] == doctest::Approx(std::log(0.6 / 0.01)));
      for (std::size_t i = 0; i < cin; ++i) CHECK(weight->tensor[(a * 6 + 5) * cin + i] == 0.0);
    }
  }
}

TEST_CASE("decode thresholds σ(obj)·σ(cls) and normalizes boxes") {
  RawPrediction p;
  p.stride = 8;
  p.anchors = {{16, 16}, {8, 8}};
  std::vector<double> v(2 * 6 * 4 * 4, -20.0);
  auto at = [&](std::size_t ch, std::size_t y, std::size_t x) -> double& { return v[(ch * 4 + y) * 4 + x]; };
  for (std::size_t ch = 0; ch < 4; ++ch) at(6 + ch, 2, 1) = 0.0;
  at(6 + 4, 2, 1) = 3.0;
  at(6 + 5, 2, 1) = 3.0;
  p.map = Tensor::from_values({1, 12, 4, 4}, v);
  const auto dets = decode({p}, 0.25);
  REQUIRE(dets.size() == 1);
  const double s = 1.0 / (1.0 + std::exp(-3.0));
  CHECK(dets[0].confidence == doctest::Approx(s * s));
  CHECK(dets[0].box.cx == doctest::Approx(1.5 * 8 / 32.0));
  CHECK(dets[0].box.cy == doctest::Approx(2.5 * 8 / 32.0));
  CHECK(dets[0].box.w == doctest::Approx(0.25));
  CHECK(decode({p}, 0.95).empty());
}

TEST_CASE("model config text round-trips through apply") {
  ModelConfig mc = ModelConfig::paper640();
  mc.use_pcam = false;
  mc.erd_rates = {1, 2};
  mc.anchor_scales = {0.75, 1.5};
  mc.pcam_fusion = PcamFusion::sequential;
  mc.seed = 99;
  ModelConfig back = ModelConfig::desk();
  back.apply(parse_config(mc.to_text()));
  // The profile name is a comment; every model.* line must survive.
  const auto body = [](const std::string& t) { return t.substr(t.find('\n') + 1); };
  CHECK(body(back.to_text()) == body(mc.to_text()));
  CHECK(back.input_size == 640);
  CHECK(back.width_neck == 128);
  CHECK_FALSE(back.use_pcam);
  CHECK_THROWS_AS(back.apply(parse_config("model.colour = red\n")), ConfigError);
  CHECK_THROWS_AS(ModelConfig::for_profile("huge"), ConfigError);
}

TEST_CASE("checkpoint restores an identical model") {
  ModelConfig mc = ModelConfig::desk();
  mc.input_size = 32;
  MSDetModel a(mc);
  mc.seed = 1234;
  MSDetModel b(mc);
  const Tensor x = Tensor::full({1, 3, 32, 32}, 0.3);
  NoGradGuard guard;
  const auto before = a.forward(x, Mode::eval);
  const auto differs = b.forward(x, Mode::eval);
  CHECK(differs[0].map[0] != before[0].map[0]);
  auto targets = b.named_tensors();
  restore_checkpoint(parse_checkpoint(serialize_checkpoint(a.named_tensors())), targets);
  const auto after = b.forward(x, Mode::eval);
  for (std::size_t h = 0; h < before.size(); ++h) {
    for (std::size_t i = 0; i < before[h].map.numel(); ++i) {
      CHECK(after[h].map[i] == doctest::Approx(before[h].map[i]).epsilon(1e-5).scale(1.0));
    }
  }
}
