#pragma once

#include <vector>

#include "msdet/nn.hpp"

namespace msdet {

/// Equivalent extent of a k-tap kernel with r-1 gaps between taps:
/// (r - 1)(k - 1) + k.
std::size_t effective_rf(std::size_t dilation, std::size_t kernel);

/// Same-size padding for a stride-1 dilated kernel: r(k-1)/2 (k odd).
std::size_t same_padding(std::size_t dilation, std::size_t kernel);

struct ERDBranch {
  Conv2d conv;
  BatchNormParams bn;
};

/// Extended receptive domain block: parallel 3×3 dilated branches,
/// a 1×1 branch and an identity branch, summed and activated once.
///
/// Branch sum order is dilated branches in rate order, then the 1×1 branch,
/// then the identity. Every branch keeps the input resolution.
struct ERDBlock {
  std::vector<std::size_t> rates;
  std::vector<ERDBranch> dilated;
  ERDBranch pointwise;
  bool identity = true;
  Activation act = Activation::silu;

  static ERDBlock make(std::size_t in_channels, std::size_t out_channels, Rng& rng,
                       std::vector<std::size_t> rates = {1, 3, 5}, bool identity = true);

  std::size_t in_channels() const { return pointwise.conv.in_channels(); }
  std::size_t out_channels() const { return pointwise.conv.out_channels(); }

  /// Output of one normalized branch before fusion (index < rates.size() is a
  /// dilated branch, rates.size() is the 1×1 branch).
  Tensor branch(std::size_t index, const Tensor& x, Mode mode);
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

}  // namespace msdet
