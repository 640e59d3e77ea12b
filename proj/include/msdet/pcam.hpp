#pragma once

#include "msdet/nn.hpp"

namespace msdet {

/// Spatial self-attention over the N = H·W positions of a feature map.
///
/// Projections R and S (1×1 convs to max(1, C/8) channels) score every pair
/// of positions; row j of U = softmax_i(R_i · S_j) weights the projected
/// values T_i (1×1 conv, C channels). Output V_j = beta · Σ_i u_ji T_i + Q_j.
struct PositionAttention {
  Conv2d query;  // R
  Conv2d key;    // S
  Conv2d value;  // T
  Tensor beta;   // [1], starts at 0

  static PositionAttention make(std::size_t channels, Rng& rng);

  Tensor forward(const Tensor& q) const;
  /// U for a single [C,H,W] map, rows = output positions j.
  Tensor attention_map(const Tensor& q) const;
};

/// Channel self-attention: Z = softmax_rows(Q Qᵀ) over the C flattened
/// channels, V_j = gamma · Σ_i z_ji Q_i + Q_j. No projections.
struct ChannelAttention {
  Tensor gamma;  // [1], starts at 0

  static ChannelAttention make();

  Tensor forward(const Tensor& q) const;
  Tensor attention_map(const Tensor& q) const;
};

enum class PcamFusion { sum, sequential };

struct PCAMBlock {
  PositionAttention position;
  ChannelAttention channel;
  PcamFusion fusion = PcamFusion::sum;

  static PCAMBlock make(std::size_t channels, Rng& rng, PcamFusion fusion = PcamFusion::sum);

  Tensor forward(const Tensor& x) const;
  /// Writes `<prefix>.beta`, `<prefix>.gamma` and the projection weights.
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Projection width used for R and S.
std::size_t pcam_key_channels(std::size_t channels);

}  // namespace msdet
