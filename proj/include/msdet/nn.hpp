#pragma once

#include <array>
#include <random>
#include <string>

#include "msdet/checkpoint.hpp"
#include "msdet/ops.hpp"

namespace msdet {

using Rng = std::mt19937_64;

enum class Activation { silu, leaky_relu, identity };

Tensor activate(const Tensor& x, Activation act);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, the usual conv default.
Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng);

struct Conv2d {
  Tensor weight;  // [C_out, C_in, k, k]
  Tensor bias;    // [C_out] or undefined
  Conv2dOptions opts;

  static Conv2d make(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Conv2dOptions opts,
                     Rng& rng, bool with_bias = true);

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t kernel() const { return weight.dim(2); }
  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, opts); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

void collect_batchnorm(const std::string& prefix, const BatchNormParams& bn, NamedTensors& out);

/// Conv (no bias) → batch norm → activation.
struct CBSBlock {
  Conv2d conv;
  BatchNormParams bn;
  Activation act = Activation::silu;

  static CBSBlock make(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                       std::size_t padding, Rng& rng, std::size_t dilation = 1);

  std::size_t out_channels() const { return conv.out_channels(); }
  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

/// Spatial pyramid pooling: entry CBS, three stride-1 same-padded max pools
/// over the entry output, channel concat of all four maps, exit CBS.
struct SPPBlock {
  CBSBlock entry;
  std::array<std::size_t, 3> pools{5, 9, 13};
  CBSBlock exit;

  static SPPBlock make(std::size_t in_channels, std::size_t out_channels, Rng& rng,
                       std::array<std::size_t, 3> pools = {5, 9, 13});

  Tensor forward(const Tensor& x, Mode mode);
  void collect(const std::string& prefix, NamedTensors& out) const;
};

}  // namespace msdet
