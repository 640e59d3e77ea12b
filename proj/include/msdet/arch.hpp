#pragma once

#include <array>
#include <string>
#include <vector>

#include "msdet/config_text.hpp"

namespace msdet {

enum class LayerKind { conv, pool, upsample, erd, spp, pcam, add, concat };

const char* layer_kind_name(LayerKind kind);

/// One record of a symbolic pipeline. Only the fields relevant to `kind`
/// carry meaning; the parser rejects the rest.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::size_t k = 1;  // kernel (conv, pool)
  std::size_t s = 1;  // stride (conv, pool)
  std::size_t p = 0;  // padding (conv, pool)
  std::size_t r = 1;  // dilation (conv)
  std::size_t f = 1;  // upsample factor
  std::size_t channels = 0;                  // conv/erd/spp output channels, 0 = keep
  std::vector<std::size_t> rates;            // erd
  std::array<std::size_t, 3> pools{5, 9, 13};  // spp
  std::string from;                          // input tap, empty = previous layer
  std::string with;                          // second operand tap of add/concat

  static LayerSpec conv(std::size_t k, std::size_t s, std::size_t p, std::size_t r = 1, std::size_t channels = 0);
  static LayerSpec pool(std::size_t k, std::size_t s, std::size_t p);
  static LayerSpec upsample(std::size_t f);
};

struct Tap {
  std::string name;
  long layer = -1;  // -1 = network input
};

struct ArchConfig {
  std::size_t input_size = 0;
  std::size_t input_channels = 3;
  std::vector<LayerSpec> layers;
  std::vector<Tap> taps;
  std::vector<double> targets;  // object sizes in input pixels checked for collapse

  void validate() const;
  long tap_layer(const std::string& name) const;  // throws for unknown names
};

/// Output resolution: floor((h + 2p - RF)/s) + 1 for conv/pool, h·f for
/// upsample, h for shape-preserving blocks. Throws ConfigError when < 1.
std::size_t layer_resolution(std::size_t h, const LayerSpec& spec);

struct LayerReport {
  std::size_t idx = 0;
  LayerKind kind = LayerKind::conv;
  std::size_t k = 1, s = 1, p = 0, r = 1;
  std::size_t h = 0;          // output resolution
  std::size_t channels = 0;   // output channels
  std::size_t rf_layer = 1;   // equivalent per-layer RF (max branch for blocks)
  std::size_t rf_composed = 1;
  double jump = 1.0;          // cumulative stride at the output
  std::vector<std::size_t> branch_rfs;
};

struct RFReport {
  std::size_t input_size = 0;
  std::vector<LayerReport> layers;
  std::vector<std::string> warnings;
};

/// Walks the pipeline: RF_n = RF_{n-1} + (rf_layer - 1)·J_{n-1},
/// J_n = J_{n-1}·s or J_{n-1}/f. Layers read from their `from` tap when set.
/// add/concat take the larger RF of their two operands.
RFReport compose_rf(const ArchConfig& config);

struct TapShape {
  std::string name;
  long layer = -1;
  std::size_t h = 0, w = 0, channels = 0;
  double jump = 1.0;
};

/// Per-tap spatial and channel sizes without allocating tensors.
std::vector<TapShape> trace_shapes(const ArchConfig& config);

ArchConfig arch_from_doc(const ConfigDoc& doc);
std::string arch_to_text(const ArchConfig& config);

std::string format_report_table(const RFReport& report);
std::string format_report_csv(const RFReport& report);
std::string format_shape_table(const std::vector<TapShape>& shapes);

}  // namespace msdet
