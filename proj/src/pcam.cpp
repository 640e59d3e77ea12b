#include "msdet/pcam.hpp"

namespace msdet {

namespace {

// Runs `per_image` on each [C,H,W] slice of a rank-3 or rank-4 input.
template <typename F>
Tensor map_images(const Tensor& x, F per_image) {
  if (x.rank() == 3) return per_image(x);
  if (x.rank() != 4) throw TensorError("attention expects [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
  std::vector<Tensor> outs;
  outs.reserve(x.dim(0));
  for (std::size_t n = 0; n < x.dim(0); ++n) outs.push_back(per_image(select(x, n)));
  return stack(outs);
}

Tensor flatten_positions(const Tensor& t) { return reshape(t, {t.dim(0), t.dim(1) * t.dim(2)}); }

}  // namespace

std::size_t pcam_key_channels(std::size_t channels) { return std::max<std::size_t>(1, channels / 8); }

PositionAttention PositionAttention::make(std::size_t channels, Rng& rng) {
  PositionAttention p;
  const std::size_t kc = pcam_key_channels(channels);
  p.query = Conv2d::make(channels, kc, 1, {}, rng);
  p.key = Conv2d::make(channels, kc, 1, {}, rng);
  p.value = Conv2d::make(channels, channels, 1, {}, rng);
  p.beta = Tensor::zeros({1}, true);
  return p;
}

Tensor PositionAttention::attention_map(const Tensor& q) const {
  if (q.rank() != 3) throw TensorError("attention_map expects [C,H,W], got " + shape_str(q.shape()));
  const Tensor r = flatten_positions(query.forward(q));
  const Tensor s = flatten_positions(key.forward(q));
  // scores[j][i] = S_j · R_i
  return softmax_rows(matmul(transpose(s), r));
}

Tensor PositionAttention::forward(const Tensor& q) const {
  return map_images(q, [this](const Tensor& img) {
    const Tensor u = attention_map(img);
    const Tensor t = flatten_positions(value.forward(img));
    // agg[c][j] = Σ_i T[c][i] · u[j][i]
    const Tensor agg = reshape(matmul(t, transpose(u)), img.shape());
    return add(mul(agg, beta), img);
  });
}

ChannelAttention ChannelAttention::make() {
  ChannelAttention c;
  c.gamma = Tensor::zeros({1}, true);
  return c;
}

Tensor ChannelAttention::attention_map(const Tensor& q) const {
  if (q.rank() != 3) throw TensorError("attention_map expects [C,H,W], got " + shape_str(q.shape()));
  const Tensor f = flatten_positions(q);
  return softmax_rows(matmul(f, transpose(f)));
}

Tensor ChannelAttention::forward(const Tensor& q) const {
  return map_images(q, [this](const Tensor& img) {
    const Tensor z = attention_map(img);
    const Tensor agg = reshape(matmul(z, flatten_positions(img)), img.shape());
    return add(mul(agg, gamma), img);
  });
}

PCAMBlock PCAMBlock::make(std::size_t channels, Rng& rng, PcamFusion fusion) {
  PCAMBlock b;
  b.position = PositionAttention::make(channels, rng);
  b.channel = ChannelAttention::make();
  b.fusion = fusion;
  return b;
}

Tensor PCAMBlock::forward(const Tensor& x) const {
  if (fusion == PcamFusion::sequential) return channel.forward(position.forward(x));
  return add(position.forward(x), channel.forward(x));
}

void PCAMBlock::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".beta", position.beta, true});
  out.push_back({prefix + ".gamma", channel.gamma, true});
  position.query.collect(prefix + ".query", out);
  position.key.collect(prefix + ".key", out);
  position.value.collect(prefix + ".value", out);
}

}  // namespace msdet
