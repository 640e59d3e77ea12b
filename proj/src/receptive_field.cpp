#include "msdet/receptive_field.hpp"

namespace msdet {

std::size_t effective_rf(std::size_t dilation, std::size_t kernel) {
  if (dilation == 0 || kernel == 0) throw TensorError("effective_rf: dilation and kernel must be >= 1");
  return (dilation - 1) * (kernel - 1) + kernel;
}

std::size_t same_padding(std::size_t dilation, std::size_t kernel) {
  if (kernel % 2 == 0) throw TensorError("same_padding requires an odd kernel");
  return dilation * (kernel - 1) / 2;
}

ERDBlock ERDBlock::make(std::size_t in_channels, std::size_t out_channels, Rng& rng, std::vector<std::size_t> rates,
                        bool identity) {
  if (identity && in_channels != out_channels) {
    throw TensorError("ERD identity branch needs C_in == C_out, got " + std::to_string(in_channels) + " and " +
                      std::to_string(out_channels));
  }
  ERDBlock b;
  b.rates = std::move(rates);
  for (auto r : b.rates) {
    const Conv2dOptions opts{1, same_padding(r, 3), r};
    b.dilated.push_back({Conv2d::make(in_channels, out_channels, 3, opts, rng, false),
                         BatchNormParams::identity(out_channels)});
  }
  b.pointwise = {Conv2d::make(in_channels, out_channels, 1, {1, 0, 1}, rng, false),
                 BatchNormParams::identity(out_channels)};
  b.identity = identity;
  return b;
}

Tensor ERDBlock::branch(std::size_t index, const Tensor& x, Mode mode) {
  ERDBranch& br = index < dilated.size() ? dilated[index] : pointwise;
  return batchnorm2d(br.conv.forward(x), br.bn, mode);
}

Tensor ERDBlock::forward(const Tensor& x, Mode mode) {
  const std::size_t cin = x.rank() == 4 ? x.dim(1) : x.dim(0);
  if (identity && cin != out_channels()) {
    throw TensorError("ERD identity branch: input has " + std::to_string(cin) + " channels, block outputs " +
                      std::to_string(out_channels()));
  }
  Tensor acc = branch(0, x, mode);
  for (std::size_t i = 1; i <= dilated.size(); ++i) acc = add(acc, branch(i, x, mode));
  if (identity) acc = add(acc, x);
  return activate(acc, act);
}

void ERDBlock::collect(const std::string& prefix, NamedTensors& out) const {
  for (std::size_t i = 0; i < dilated.size(); ++i) {
    const std::string p = prefix + ".dil" + std::to_string(i);
    dilated[i].conv.collect(p + ".conv", out);
    collect_batchnorm(p + ".bn", dilated[i].bn, out);
  }
  pointwise.conv.collect(prefix + ".pw.conv", out);
  collect_batchnorm(prefix + ".pw.bn", pointwise.bn, out);
}

}  // namespace msdet
