#include <doctest.h>

#include <fstream>
#include <sstream>

#include "msdet/arch.hpp"
#include "msdet/model.hpp"

using namespace msdet;

namespace {

ArchConfig parse_arch(const std::string& text) { return arch_from_doc(parse_config(text)); }

const TapShape& find_tap(const std::vector<TapShape>& shapes, const std::string& name) {
  for (const auto& s : shapes) {
    if (s.name == name) return s;
  }
  FAIL("missing tap " << name);
  return shapes.front();
}

bool has_warning(const RFReport& r, const std::string& needle) {
  for (const auto& w : r.warnings) {
    if (w.find(needle) != std::string::npos) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("layer resolution examples") {
  CHECK(layer_resolution(640, LayerSpec::conv(3, 2, 1)) == 320);
  CHECK(layer_resolution(80, LayerSpec::conv(3, 1, 3, 3)) == 80);
  CHECK(layer_resolution(80, LayerSpec::upsample(2)) == 160);
  CHECK(layer_resolution(13, LayerSpec::pool(13, 1, 6)) == 13);
  CHECK(layer_resolution(7, LayerSpec::conv(3, 2, 0)) == 3);
  CHECK_THROWS_AS(layer_resolution(2, LayerSpec::conv(7, 1, 0)), ConfigError);
}

TEST_CASE("receptive fields compose through strides") {
  const ArchConfig cfg = parse_arch(
      "input = 64\n"
      "layer conv k=3 s=1 p=1\n"
      "layer conv k=3 s=2 p=1\n"
      "layer conv k=3 s=1 p=2 r=2\n"
      "layer pool k=2 s=2 p=0\n"
      "layer conv k=1 s=1 p=0\n");
  const RFReport r = compose_rf(cfg);
  REQUIRE(r.layers.size() == 5);
  CHECK(r.layers[0].rf_composed == 3);
  CHECK(r.layers[1].rf_composed == 5);
  CHECK(r.layers[2].rf_layer == 5);
  CHECK(r.layers[2].rf_composed == 13);  // 5 + 4·2
  CHECK(r.layers[3].rf_composed == 15);
  CHECK(r.layers[3].jump == 4.0);
  CHECK(r.layers[4].rf_composed == 15);
  CHECK(r.layers[4].h == 16);
}

TEST_CASE("ERD, SPP and merge layers report their branch fields") {
  const ArchConfig cfg = parse_arch(
      "input = 32\n"
      "channels = 8\n"
      "tap in\n"
      "layer erd rates=1,3,5\n"
      "tap e\n"
      "layer spp pools=5,9,13\n"
      "layer add with=e\n"
      "layer concat with=in\n");
  const RFReport r = compose_rf(cfg);
  CHECK(r.layers[0].branch_rfs == std::vector<std::size_t>{3, 7, 11, 1, 1});
  CHECK(r.layers[0].rf_composed == 11);
  CHECK(r.layers[1].rf_composed == 23);
  CHECK(r.layers[2].rf_composed == 23);
  CHECK(r.layers[3].channels == 16);
  CHECK(r.layers[3].rf_composed == 23);
}

TEST_CASE("analyzer warns about dropped borders and collapsed targets") {
  const ArchConfig cfg = parse_arch(
      "input = 32\n"
      "target = 3,40\n"
      "layer conv k=3 s=2 p=1\n"
      "layer conv k=3 s=2 p=1\n");
  const RFReport r = compose_rf(cfg);
  CHECK(has_warning(r, "not divisible by stride 2"));
  CHECK(has_warning(r, "target of 3 px collapses below one cell at layer 1"));
  CHECK_FALSE(has_warning(r, "target of 40"));
}

TEST_CASE("config errors carry their location") {
  auto message = [](const std::string& text) {
    try {
      trace_shapes(parse_arch(text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("layer conv k=3\n").find("input") != std::string::npos);
  CHECK(message("input = 8\nlayer conv s=1\n").find("line 2") != std::string::npos);
  CHECK(message("input = 8\nlayer warp k=3\n").find("unknown layer kind") != std::string::npos);
  CHECK(message("input = 8\nlayer pool k=3 c=4\n").find("does not apply") != std::string::npos);
  CHECK(message("input = 8\nlayer add with=nowhere\n").find("unknown tap") != std::string::npos);
  CHECK(message("input = 4\nlayer conv k=9 s=1 p=0\n").find("layer 0 (conv)") != std::string::npos);
  CHECK(message("input = 8\nlayer spp pools=4,9,13\n").find("odd") != std::string::npos);
  CHECK(message("input = 8\ntap a\nlayer conv k=3 s=2 p=1\nlayer add with=a\n").find("operand sizes differ") !=
        std::string::npos);
}

TEST_CASE("architecture text round-trips") {
  for (const auto& mc : {ModelConfig::desk(), ModelConfig::paper640()}) {
    const ArchConfig a = arch_for_model(mc);
    const std::string text = arch_to_text(a);
    const ArchConfig b = parse_arch(text);
    CHECK(arch_to_text(b) == text);
    const auto sa = trace_shapes(a), sb = trace_shapes(b);
    REQUIRE(sa.size() == sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
      CHECK(sa[i].name == sb[i].name);
      CHECK(sa[i].h == sb[i].h);
      CHECK(sa[i].channels == sb[i].channels);
    }
  }
}

TEST_CASE("symbolic trace of the desk model matches a real forward pass") {
  for (bool todb : {true, false}) {
    ModelConfig mc = ModelConfig::desk();
    mc.use_todb = todb;
    MSDetModel model(mc);
    ForwardTrace trace;
    NoGradGuard guard;
    model.forward(Tensor::zeros({1, mc.in_channels, mc.input_size, mc.input_size}), Mode::eval, &trace);
    const auto shapes = trace_shapes(arch_for_model(mc));
    CHECK(shapes.size() == trace.size());
    for (const auto& s : shapes) {
      INFO("tap " << s.name);
      REQUIRE(trace.count(s.name) == 1);
      CHECK(trace.at(s.name) == Shape{s.channels, s.h, s.w});
    }
  }
}

TEST_CASE("paper-640 profile reaches the published stage sizes") {
  const auto shapes = trace_shapes(arch_for_model(ModelConfig::paper640()));
  const auto& f1 = find_tap(shapes, "F1");
  CHECK(f1.h == 80);
  CHECK(f1.channels == 128);
  const auto& up = find_tap(shapes, "F1up");
  CHECK(up.h == 160);
  CHECK(up.channels == 64);
  const auto& f4 = find_tap(shapes, "F4");
  CHECK(f4.h == 160);
  CHECK(f4.channels == 18);
  CHECK(find_tap(shapes, "H16").h == 40);
}

TEST_CASE("shipped paper-640 architecture file matches the model") {
  std::ifstream is(std::string(MSDET_SOURCE_DIR) + "/configs/paper640.arch");
  REQUIRE(is);
  std::stringstream ss;
  ss << is.rdbuf();
  const ArchConfig shipped = parse_arch(ss.str());
  CHECK(arch_to_text(shipped) == arch_to_text(arch_for_model(ModelConfig::paper640())));
}
