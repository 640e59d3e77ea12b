#include "msdet/gradcheck_suite.hpp"

#include <random>

#include "msdet/loss.hpp"
#include "msdet/model.hpp"
#include "msdet/ops.hpp"
#include "msdet/pcam.hpp"
#include "msdet/receptive_field.hpp"

namespace msdet {

namespace {

Tensor random_leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

// Σ out ⊙ W for a fixed random W, so every output element gets its own weight.
Tensor project(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(out.numel());
  for (auto& x : w) x = u(rng);
  return sum(mul(out, Tensor::from_values(out.shape(), std::move(w))));
}

std::vector<Tensor> trainable(const NamedTensors& named) {
  std::vector<Tensor> out;
  for (const auto& n : named) {
    if (n.trainable) out.push_back(n.tensor);
  }
  return out;
}

void set_scalar(Tensor& t, double v) { t.mutable_values()[0] = v; }

GradcheckCase conv_case(std::size_t r, std::size_t stride) {
  return {"conv2d_r" + std::to_string(r) + (stride > 1 ? "_s" + std::to_string(stride) : ""),
          [r, stride](const GradcheckOptions& opts) {
            Rng rng(100 + r * 10 + stride);
            const std::size_t k = 3;
            const Tensor x = random_leaf({2, 2, 9, 9}, rng);
            const Tensor w = random_leaf({3, 2, k, k}, rng);
            const Tensor b = random_leaf({3}, rng);
            const Conv2dOptions co{stride, same_padding(r, k), r};
            return gradcheck(
                [co](std::span<const Tensor> in) { return project(conv2d(in[0], in[1], in[2], co), 7); }, {x, w, b},
                opts);
          }};
}

std::vector<GradcheckCase> build() {
  std::vector<GradcheckCase> cases;
  for (std::size_t r : {1, 2, 3, 5}) cases.push_back(conv_case(r, 1));
  cases.push_back(conv_case(1, 2));
  cases.push_back(conv_case(2, 2));

  cases.push_back({"maxpool2d", [](const GradcheckOptions& opts) {
                     // Distinct, well-separated values keep each window's argmax
                     // stable under the finite-difference step.
                     Rng rng(11);
                     std::vector<double> v(2 * 7 * 7);
                     for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i);
                     std::shuffle(v.begin(), v.end(), rng);
                     const Tensor x = Tensor::from_values({2, 7, 7}, v, true);
                     return gradcheck(
                         [](std::span<const Tensor> in) {
                           return add(project(maxpool2d(in[0], 3, 1, 1), 3), project(maxpool2d(in[0], 5, 2, 2), 4));
                         },
                         {x}, opts);
                   }});
  cases.push_back({"upsample_nearest", [](const GradcheckOptions& opts) {
                     Rng rng(12);
                     const Tensor x = random_leaf({1, 2, 3, 3}, rng);
                     return gradcheck([](std::span<const Tensor> in) { return project(upsample_nearest(in[0], 2), 5); },
                                      {x}, opts);
                   }});
  cases.push_back({"concat_channels", [](const GradcheckOptions& opts) {
                     Rng rng(13);
                     const Tensor a = random_leaf({2, 1, 3, 3}, rng), b = random_leaf({2, 2, 3, 3}, rng);
                     return gradcheck(
                         [](std::span<const Tensor> in) { return project(concat_channels({in[0], in[1]}), 6); }, {a, b},
                         opts);
                   }});
  cases.push_back({"batchnorm2d_train", [](const GradcheckOptions& opts) {
                     Rng rng(14);
                     const Tensor x = random_leaf({3, 2, 4, 4}, rng);
                     BatchNormParams bn = BatchNormParams::identity(2);
                     bn.weight = random_leaf({2}, rng, 0.5, 1.5);
                     bn.bias = random_leaf({2}, rng);
                     return gradcheck(
                         [bn](std::span<const Tensor> in) mutable {
                           BatchNormParams p = bn;
                           p.weight = in[1];
                           p.bias = in[2];
                           return project(batchnorm2d(in[0], p, Mode::train), 8);
                         },
                         {x, bn.weight, bn.bias}, opts);
                   }});
  cases.push_back({"batchnorm2d_eval", [](const GradcheckOptions& opts) {
                     Rng rng(15);
                     const Tensor x = random_leaf({2, 2, 3, 3}, rng);
                     BatchNormParams bn = BatchNormParams::identity(2);
                     bn.running_mean = Tensor::from_values({2}, {0.3, -0.2});
                     bn.running_var = Tensor::from_values({2}, {1.7, 0.6});
                     const Tensor w = random_leaf({2}, rng), b = random_leaf({2}, rng);
                     return gradcheck(
                         [bn](std::span<const Tensor> in) mutable {
                           BatchNormParams p = bn;
                           p.weight = in[1];
                           p.bias = in[2];
                           return project(batchnorm2d(in[0], p, Mode::eval), 9);
                         },
                         {x, w, b}, opts);
                   }});
  cases.push_back({"softmax_rows", [](const GradcheckOptions& opts) {
                     Rng rng(16);
                     const Tensor x = random_leaf({4, 5}, rng, -3, 3);
                     return gradcheck([](std::span<const Tensor> in) { return project(softmax_rows(in[0]), 10); }, {x},
                                      opts);
                   }});
  cases.push_back({"matmul", [](const GradcheckOptions& opts) {
                     Rng rng(17);
                     const Tensor a = random_leaf({3, 4}, rng), b = random_leaf({4, 2}, rng);
                     return gradcheck([](std::span<const Tensor> in) { return project(matmul(in[0], in[1]), 11); },
                                      {a, b}, opts);
                   }});
  cases.push_back({"elementwise", [](const GradcheckOptions& opts) {
                     Rng rng(18);
                     const Tensor a = random_leaf({2, 3, 3}, rng, -2, 2), b = random_leaf({3, 3}, rng, -2, 2);
                     return gradcheck(
                         [](std::span<const Tensor> in) {
                           const Tensor t = add(mul(silu(in[0]), sigmoid(in[1])), sub(leaky_relu(in[0]), in[1]));
                           return project(t, 12);
                         },
                         {a, b}, opts);
                   }});
  cases.push_back({"position_attention", [](const GradcheckOptions& opts) {
                     Rng rng(19);
                     auto pa = PositionAttention::make(8, rng);
                     set_scalar(pa.beta, 0.7);
                     const Tensor x = random_leaf({2, 8, 3, 3}, rng);
                     std::vector<Tensor> in{x, pa.query.weight, pa.query.bias, pa.key.weight,
                                            pa.key.bias, pa.value.weight, pa.value.bias, pa.beta};
                     return gradcheck(
                         [pa](std::span<const Tensor> t) mutable {
                           PositionAttention p = pa;
                           p.query.weight = t[1];
                           p.query.bias = t[2];
                           p.key.weight = t[3];
                           p.key.bias = t[4];
                           p.value.weight = t[5];
                           p.value.bias = t[6];
                           p.beta = t[7];
                           return project(p.forward(t[0]), 13);
                         },
                         in, opts);
                   }});
  cases.push_back({"channel_attention", [](const GradcheckOptions& opts) {
                     Rng rng(20);
                     auto ca = ChannelAttention::make();
                     set_scalar(ca.gamma, -0.6);
                     const Tensor x = random_leaf({2, 4, 3, 3}, rng, -0.5, 0.5);
                     return gradcheck(
                         [](std::span<const Tensor> t) {
                           ChannelAttention c;
                           c.gamma = t[1];
                           return project(c.forward(t[0]), 14);
                         },
                         {x, ca.gamma}, opts);
                   }});
  cases.push_back({"pcam_sequential", [](const GradcheckOptions& opts) {
                     Rng rng(21);
                     auto block = PCAMBlock::make(8, rng, PcamFusion::sequential);
                     set_scalar(block.position.beta, 0.4);
                     set_scalar(block.channel.gamma, 0.3);
                     const Tensor x = random_leaf({1, 8, 3, 3}, rng, -0.5, 0.5);
                     NamedTensors named;
                     block.collect("pcam", named);
                     std::vector<Tensor> in{x};
                     for (auto& t : trainable(named)) in.push_back(t);
                     return gradcheck([block](std::span<const Tensor> t) { return project(block.forward(t[0]), 15); },
                                      in, opts);
                   }});
  cases.push_back({"todb", [](const GradcheckOptions& opts) {
                     Rng rng(22);
                     const auto block = TODBBlock::make(6, 3, 4, rng);
                     const Tensor f1 = random_leaf({2, 6, 2, 2}, rng), f2 = random_leaf({2, 3, 4, 4}, rng);
                     NamedTensors named;
                     block.collect("todb", named);
                     std::vector<Tensor> in{f1, f2};
                     for (auto& t : trainable(named)) in.push_back(t);
                     return gradcheck(
                         [block](std::span<const Tensor> t) { return project(block.forward(t[0], t[1]).f4, 16); }, in,
                         opts);
                   }});
  cases.push_back({"erd", [](const GradcheckOptions& opts) {
                     Rng rng(23);
                     auto block = ERDBlock::make(3, 3, rng, {1, 3, 5});
                     const Tensor x = random_leaf({2, 3, 7, 7}, rng);
                     NamedTensors named;
                     block.collect("erd", named);
                     std::vector<Tensor> in{x};
                     for (auto& t : trainable(named)) in.push_back(t);
                     return gradcheck(
                         [block](std::span<const Tensor> t) mutable { return project(block.forward(t[0], Mode::train), 17); },
                         in, opts);
                   }});
  cases.push_back({"spp", [](const GradcheckOptions& opts) {
                     Rng rng(24);
                     auto block = SPPBlock::make(4, 4, rng, {3, 5, 7});
                     const Tensor x = random_leaf({2, 4, 5, 5}, rng);
                     NamedTensors named;
                     block.collect("spp", named);
                     std::vector<Tensor> in{x};
                     for (auto& t : trainable(named)) in.push_back(t);
                     return gradcheck(
                         [block](std::span<const Tensor> t) mutable { return project(block.forward(t[0], Mode::eval), 18); },
                         in, opts);
                   }});
  cases.push_back({"detection_loss_cell", [](const GradcheckOptions& opts) {
                     // One 8-px cell, one anchor, one class.
                     Rng rng(25);
                     const Tensor map = random_leaf({1, 6, 1, 1}, rng, -1.5, 1.5);
                     const std::vector<HeadSpec> heads{{8, {{6.0, 9.0}}}};
                     const std::vector<std::vector<GroundTruth>> gts{{{0, {0.45, 0.55, 0.6, 0.7}}}};
                     const Targets targets = assign_targets(gts, heads, 8);
                     return gradcheck(
                         [targets](std::span<const Tensor> t) {
                           const std::vector<RawPrediction> preds{{t[0], 8, {{6.0, 9.0}}, 1}};
                           return detection_loss(preds, targets).total;
                         },
                         {map}, opts);
                   }});
  cases.push_back({"detection_loss_grid", [](const GradcheckOptions& opts) {
                     Rng rng(26);
                     ModelConfig cfg;
                     cfg.input_size = 32;
                     const auto heads = head_specs(cfg);
                     const std::vector<std::vector<GroundTruth>> gts{{{0, {0.3, 0.4, 0.12, 0.1}}},
                                                                     {{0, {0.7, 0.6, 0.2, 0.25}}, {0, {0.2, 0.8, 0.08, 0.1}}}};
                     const Targets targets = assign_targets(gts, heads, 32);
                     std::vector<Tensor> maps;
                     for (const auto& h : heads) maps.push_back(random_leaf({2, cfg.head_channels(), 32 / h.stride, 32 / h.stride}, rng));
                     return gradcheck(
                         [heads, targets](std::span<const Tensor> t) {
                           std::vector<RawPrediction> preds;
                           for (std::size_t i = 0; i < heads.size(); ++i) preds.push_back({t[i], heads[i].stride, heads[i].anchors, 1});
                           return detection_loss(preds, targets).total;
                         },
                         maps, opts);
                   }});
  cases.push_back({"desk_model_loss", [](const GradcheckOptions& opts) {
                     ModelConfig cfg = ModelConfig::desk();
                     cfg.input_size = 32;
                     cfg.seed = 27;
                     auto model = std::make_shared<MSDetModel>(cfg);
                     // PCAM scalars off zero so the attention paths carry gradient.
                     for (auto& n : model->named_tensors()) {
                       if (n.name.ends_with(".beta") || n.name.ends_with(".gamma")) n.tensor.mutable_values()[0] = 0.5;
                     }
                     Rng rng(28);
                     const Tensor images = random_leaf({2, 3, 32, 32}, rng, 0.0, 1.0);
                     const std::vector<std::vector<GroundTruth>> gts{{{0, {0.3, 0.4, 0.15, 0.12}}},
                                                                     {{0, {0.65, 0.55, 0.25, 0.2}}}};
                     const Targets targets = assign_targets(gts, *model);
                     GradcheckOptions o = opts;
                     if (o.max_checks_per_input == 0) o.max_checks_per_input = 3;
                     std::vector<Tensor> in{images};
                     for (auto& p : model->parameters()) in.push_back(p);
                     return gradcheck(
                         [model, targets](std::span<const Tensor> t) {
                           return detection_loss(model->forward(t[0], Mode::train), targets).total;
                         },
                         in, o);
                   }});
  return cases;
}

}  // namespace

const std::vector<GradcheckCase>& gradcheck_registry() {
  static const std::vector<GradcheckCase> cases = build();
  return cases;
}

}  // namespace msdet
