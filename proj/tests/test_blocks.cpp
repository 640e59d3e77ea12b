#include <doctest.h>

#include <cmath>
#include <random>

#include "msdet/model.hpp"
#include "msdet/pcam.hpp"
#include "msdet/receptive_field.hpp"

using namespace msdet;

namespace {

Tensor randn(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = n(rng);
  return Tensor::from_values(std::move(s), std::move(v));
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol).scale(1.0));
}

// 1×1 conv applied at every position of a [C,H,W] map, by hand.
std::vector<double> pointwise(const Conv2d& c, const Tensor& x, std::size_t pos) {
  const std::size_t ci = x.dim(0), n = x.dim(1) * x.dim(2);
  std::vector<double> out(c.out_channels());
  for (std::size_t o = 0; o < out.size(); ++o) {
    double acc = c.bias.defined() ? c.bias[o] : 0.0;
    for (std::size_t k = 0; k < ci; ++k) acc += c.weight[o * ci + k] * x[k * n + pos];
    out[o] = acc;
  }
  return out;
}

}  // namespace

TEST_CASE("dilated 3x3 receptive fields are 3, 5 and 7") {
  CHECK(effective_rf(1, 3) == 3);
  CHECK(effective_rf(2, 3) == 5);
  CHECK(effective_rf(3, 3) == 7);
  CHECK(effective_rf(5, 3) == 11);
  CHECK(same_padding(1, 3) == 1);
  CHECK(same_padding(3, 3) == 3);
  CHECK_THROWS_AS(same_padding(1, 4), TensorError);
  CHECK_THROWS_AS(effective_rf(0, 3), TensorError);
}

TEST_CASE("ERD output equals the activated sum of its branches and the input") {
  Rng rng(3);
  ERDBlock erd = ERDBlock::make(4, 4, rng, {1, 3, 5});
  const Tensor x = randn({2, 4, 9, 9}, 5);
  const Tensor y = erd.forward(x, Mode::eval);
  CHECK(y.shape() == x.shape());
  Tensor acc = x;
  for (std::size_t i = 0; i <= erd.rates.size(); ++i) {
    const Tensor b = erd.branch(i, x, Mode::eval);
    CHECK(b.shape() == x.shape());
    acc = add(acc, b);
  }
  check_close(y, silu(acc), 1e-12);
}

TEST_CASE("ERD rejects an identity branch with mismatched channels") {
  Rng rng(1);
  CHECK_THROWS_AS(ERDBlock::make(4, 8, rng), TensorError);
  ERDBlock ok = ERDBlock::make(4, 4, rng);
  CHECK_THROWS_AS(ok.forward(randn({1, 3, 5, 5}, 1), Mode::eval), TensorError);
  ERDBlock widen = ERDBlock::make(4, 8, rng, {1, 2}, false);
  CHECK(widen.forward(randn({1, 4, 5, 5}, 2), Mode::eval).shape() == Shape{1, 8, 5, 5});
}

TEST_CASE("SPP concatenates same-padded pools of the entry map") {
  Rng rng(4);
  SPPBlock spp = SPPBlock::make(6, 6, rng);
  const Tensor x = randn({1, 6, 13, 13}, 9);
  const Tensor y = spp.forward(x, Mode::eval);
  CHECK(y.shape() == x.shape());
  CHECK(spp.exit.conv.in_channels() == 4 * spp.entry.out_channels());
  const Tensor e = spp.entry.forward(x, Mode::eval);
  std::vector<Tensor> parts{e};
  for (std::size_t k : spp.pools) parts.push_back(maxpool2d(e, k, 1, k / 2));
  check_close(y, spp.exit.forward(concat_channels(parts), Mode::eval), 1e-12);
}

TEST_CASE("PCAM is the identity at initialization") {
  Rng rng(2);
  const PCAMBlock seq = PCAMBlock::make(16, rng, PcamFusion::sequential);
  const Tensor x = randn({16, 4, 4}, 7);
  const Tensor y = seq.forward(x);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  const PCAMBlock sum = PCAMBlock::make(16, rng, PcamFusion::sum);
  const Tensor z = sum.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(z[i] == 2.0 * x[i]);
}

TEST_CASE("key projection width is C/8 with a floor of one") {
  CHECK(pcam_key_channels(128) == 16);
  CHECK(pcam_key_channels(7) == 1);
  Rng rng(0);
  const auto p = PositionAttention::make(32, rng);
  CHECK(p.query.out_channels() == 4);
  CHECK(p.key.out_channels() == 4);
  CHECK(p.value.out_channels() == 32);
}

TEST_CASE("position attention matches a loop over position pairs") {
  Rng rng(8);
  PositionAttention pa = PositionAttention::make(8, rng);
  pa.beta.mutable_values()[0] = 0.7;
  const Tensor q = randn({8, 3, 2}, 11);
  const std::size_t c = 8, n = 6;
  std::vector<std::vector<double>> rr(n), ss(n), tt(n);
  for (std::size_t i = 0; i < n; ++i) {
    rr[i] = pointwise(pa.query, q, i);
    ss[i] = pointwise(pa.key, q, i);
    tt[i] = pointwise(pa.value, q, i);
  }
  const Tensor u = pa.attention_map(q);
  const Tensor v = pa.forward(q);
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> e(n);
    double mx = -1e300, z = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = 0;
      for (std::size_t k = 0; k < rr[i].size(); ++k) d += rr[i][k] * ss[j][k];
      e[i] = d;
      mx = std::max(mx, d);
    }
    for (auto& x : e) z += (x = std::exp(x - mx));
    for (std::size_t i = 0; i < n; ++i) CHECK(u[j * n + i] == doctest::Approx(e[i] / z).epsilon(1e-12));
    for (std::size_t ch = 0; ch < c; ++ch) {
      double agg = 0;
      for (std::size_t i = 0; i < n; ++i) agg += e[i] / z * tt[i][ch];
      CHECK(v[ch * n + j] == doctest::Approx(0.7 * agg + q[ch * n + j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("channel attention matches a loop over channel pairs") {
  ChannelAttention ca = ChannelAttention::make();
  ca.gamma.mutable_values()[0] = -0.6;
  const Tensor q = randn({5, 2, 3}, 12, 0.5);
  const std::size_t c = 5, n = 6;
  const Tensor v = ca.forward(q);
  for (std::size_t j = 0; j < c; ++j) {
    std::vector<double> e(c);
    double mx = -1e300, z = 0;
    for (std::size_t i = 0; i < c; ++i) {
      double d = 0;
      for (std::size_t p = 0; p < n; ++p) d += q[j * n + p] * q[i * n + p];
      e[i] = d;
      mx = std::max(mx, d);
    }
    for (auto& x : e) z += (x = std::exp(x - mx));
    for (std::size_t p = 0; p < n; ++p) {
      double agg = 0;
      for (std::size_t i = 0; i < c; ++i) agg += e[i] / z * q[i * n + p];
      CHECK(v[j * n + p] == doctest::Approx(-0.6 * agg + q[j * n + p]).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention handles batched input image by image") {
  Rng rng(5);
  PCAMBlock b = PCAMBlock::make(8, rng);
  b.position.beta.mutable_values()[0] = 0.3;
  b.channel.gamma.mutable_values()[0] = 0.2;
  const Tensor x = randn({2, 8, 3, 3}, 13);
  const Tensor y = b.forward(x);
  for (std::size_t i = 0; i < 2; ++i) check_close(select(y, i), b.forward(select(x, i)), 1e-12);
}

TEST_CASE("TODB fuses the upsampled reduced map with the shallow map") {
  Rng rng(6);
  const TODBBlock t = TODBBlock::make(12, 4, 18, rng);
  const Tensor f1 = randn({1, 12, 4, 4}, 1);
  const Tensor f2 = randn({1, 4, 8, 8}, 2);
  const auto out = t.forward(f1, f2);
  CHECK(out.f1_reduced.shape() == Shape{1, 4, 4, 4});
  CHECK(out.upsampled.shape() == Shape{1, 4, 8, 8});
  CHECK(out.f4.shape() == Shape{1, 18, 8, 8});
  check_close(out.f1_reduced, silu(t.reduce.forward(f1)), 1e-12);
  check_close(out.f3, add(upsample_nearest(out.f1_reduced, 2), f2), 1e-12);
  check_close(out.f4, silu(t.fuse.forward(out.f3)), 1e-12);
  try {
    t.forward(f1, randn({1, 4, 6, 6}, 3));
    FAIL("expected a shape error");
  } catch (const TensorError& e) {
    CHECK(std::string(e.what()).find("TODB") != std::string::npos);
  }
}
