#include "msdet/nn.hpp"

#include <cmath>

namespace msdet {

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::silu: return silu(x);
    case Activation::leaky_relu: return leaky_relu(x);
    case Activation::identity: return x;
  }
  return x;
}

Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

Conv2d Conv2d::make(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Conv2dOptions opts,
                    Rng& rng, bool with_bias) {
  Conv2d c;
  const std::size_t fan_in = in_channels * kernel * kernel;
  c.weight = uniform_init({out_channels, in_channels, kernel, kernel}, fan_in, rng);
  if (with_bias) c.bias = uniform_init({out_channels}, fan_in, rng);
  c.opts = opts;
  return c;
}

void Conv2d::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

void collect_batchnorm(const std::string& prefix, const BatchNormParams& bn, NamedTensors& out) {
  out.push_back({prefix + ".weight", bn.weight, true});
  out.push_back({prefix + ".bias", bn.bias, true});
  out.push_back({prefix + ".running_mean", bn.running_mean, false});
  out.push_back({prefix + ".running_var", bn.running_var, false});
}

CBSBlock CBSBlock::make(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                        std::size_t padding, Rng& rng, std::size_t dilation) {
  CBSBlock b;
  b.conv = Conv2d::make(in_channels, out_channels, kernel, {stride, padding, dilation}, rng, false);
  b.bn = BatchNormParams::identity(out_channels);
  return b;
}

Tensor CBSBlock::forward(const Tensor& x, Mode mode) {
  return activate(batchnorm2d(conv.forward(x), bn, mode), act);
}

void CBSBlock::collect(const std::string& prefix, NamedTensors& out) const {
  conv.collect(prefix + ".conv", out);
  collect_batchnorm(prefix + ".bn", bn, out);
}

SPPBlock SPPBlock::make(std::size_t in_channels, std::size_t out_channels, Rng& rng,
                        std::array<std::size_t, 3> pools) {
  for (auto k : pools) {
    if (k == 0 || k % 2 == 0) throw TensorError("SPP pool kernels must be odd, got " + std::to_string(k));
  }
  const std::size_t hidden = std::max<std::size_t>(1, in_channels / 2);
  SPPBlock b;
  b.entry = CBSBlock::make(in_channels, hidden, 1, 1, 0, rng);
  b.pools = pools;
  b.exit = CBSBlock::make(4 * hidden, out_channels, 1, 1, 0, rng);
  return b;
}

Tensor SPPBlock::forward(const Tensor& x, Mode mode) {
  const Tensor e = entry.forward(x, mode);
  std::vector<Tensor> parts{e};
  for (auto k : pools) parts.push_back(maxpool2d(e, k, 1, (k - 1) / 2));
  return exit.forward(concat_channels(parts), mode);
}

void SPPBlock::collect(const std::string& prefix, NamedTensors& out) const {
  entry.collect(prefix + ".entry", out);
  exit.collect(prefix + ".exit", out);
}

}  // namespace msdet
