#include "msdet/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace msdet {

namespace {

double sigmoid_d(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

Shape image_shape(const Tensor& t) {
  const auto& s = t.shape();
  return Shape(s.end() - 3, s.end());
}

// Objectness bias starts at the prior of ~8 objects per image; class logits
// start at a constant high score and zero weights.
void init_head_bias(Conv2d& head, const ModelConfig& cfg, std::size_t stride) {
  auto b = head.bias.mutable_values();
  auto w = head.weight.mutable_values();
  const std::size_t per = 5 + cfg.num_classes;
  const double cells = static_cast<double>(cfg.input_size / stride);
  const std::size_t cin = head.in_channels();
  for (std::size_t a = 0; a < cfg.anchors_per_head(); ++a) {
    b[a * per + 4] = std::log(8.0 / (cells * cells));
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      const std::size_t ch = a * per + 5 + c;
      b[ch] = std::log(0.6 / (static_cast<double>(cfg.num_classes) - 0.99));
      for (std::size_t i = 0; i < cin; ++i) w[ch * cin + i] = 0.0;
    }
  }
}

}  // namespace

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper640() {
  ModelConfig c;
  c.profile = "paper-640";
  c.input_size = 640;
  c.width_stem = 32;
  c.width_p4 = 64;
  c.width_p8 = 128;
  c.width_p16 = 256;
  c.width_neck = 128;
  return c;
}

ModelConfig ModelConfig::for_profile(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper-640") return paper640();
  throw ConfigError("unknown profile '" + name + "' (expected desk or paper-640)");
}

void ModelConfig::apply(const ConfigDoc& doc) {
  static const std::set<std::string> known = {
      "model.input",      "model.width_stem", "model.width_p4",     "model.width_p8",      "model.width_p16",
      "model.width_neck", "model.erd_units",  "model.erd_rates",    "model.spp_pools",     "model.todb",
      "model.erd",        "model.pcam",       "model.pcam_fusion",  "model.num_classes",   "model.anchor_scales",
      "model.anchor_base", "model.seed"};
  for (const auto& [k, v] : doc.keys) {
    if (k.rfind("model.", 0) == 0 && !known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  auto size_key = [&](const char* key, std::size_t& field, long min) {
    if (!doc.has(key)) return;
    const long v = doc.get_int(key, 0);
    if (v < min) throw ConfigError(std::string(key) + " must be >= " + std::to_string(min));
    field = static_cast<std::size_t>(v);
  };
  size_key("model.input", input_size, 16);
  size_key("model.width_stem", width_stem, 1);
  size_key("model.width_p4", width_p4, 1);
  size_key("model.width_p8", width_p8, 1);
  size_key("model.width_p16", width_p16, 1);
  size_key("model.width_neck", width_neck, 1);
  size_key("model.erd_units", erd_units, 0);
  size_key("model.num_classes", num_classes, 1);
  if (auto v = doc.get("model.erd_rates")) {
    erd_rates.clear();
    for (long r : parse_int_list(*v, "model.erd_rates")) {
      if (r < 1) throw ConfigError("model.erd_rates must be >= 1");
      erd_rates.push_back(static_cast<std::size_t>(r));
    }
  }
  if (auto v = doc.get("model.spp_pools")) {
    auto p = parse_int_list(*v, "model.spp_pools");
    if (p.size() != 3) throw ConfigError("model.spp_pools needs three values");
    for (std::size_t i = 0; i < 3; ++i) {
      if (p[i] < 1 || p[i] % 2 == 0) throw ConfigError("model.spp_pools must be odd");
      spp_pools[i] = static_cast<std::size_t>(p[i]);
    }
  }
  use_todb = doc.get_bool("model.todb", use_todb);
  use_erd = doc.get_bool("model.erd", use_erd);
  use_pcam = doc.get_bool("model.pcam", use_pcam);
  if (auto v = doc.get("model.pcam_fusion")) {
    if (*v == "sum") {
      pcam_fusion = PcamFusion::sum;
    } else if (*v == "sequential") {
      pcam_fusion = PcamFusion::sequential;
    } else {
      throw ConfigError("model.pcam_fusion must be sum or sequential");
    }
  }
  if (auto v = doc.get("model.anchor_scales")) {
    anchor_scales = parse_double_list(*v, "model.anchor_scales");
    for (double s : anchor_scales) {
      if (s <= 0) throw ConfigError("model.anchor_scales must be positive");
    }
  }
  anchor_base = doc.get_double("model.anchor_base", anchor_base);
  if (anchor_base <= 0) throw ConfigError("model.anchor_base must be positive");
  seed = static_cast<std::uint64_t>(doc.get_int("model.seed", static_cast<long>(seed)));
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  auto list = [&](const auto& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      std::ostringstream v;
      v.precision(17);
      v << xs[i];
      s += (i ? "," : "") + v.str();
    }
    return s;
  };
  os << "# profile " << profile << "\n"
     << "model.input = " << input_size << "\n"
     << "model.width_stem = " << width_stem << "\n"
     << "model.width_p4 = " << width_p4 << "\n"
     << "model.width_p8 = " << width_p8 << "\n"
     << "model.width_p16 = " << width_p16 << "\n"
     << "model.width_neck = " << width_neck << "\n"
     << "model.erd_units = " << erd_units << "\n"
     << "model.erd_rates = " << list(erd_rates) << "\n"
     << "model.spp_pools = " << list(spp_pools) << "\n"
     << "model.todb = " << (use_todb ? "true" : "false") << "\n"
     << "model.erd = " << (use_erd ? "true" : "false") << "\n"
     << "model.pcam = " << (use_pcam ? "true" : "false") << "\n"
     << "model.pcam_fusion = " << (pcam_fusion == PcamFusion::sum ? "sum" : "sequential") << "\n"
     << "model.num_classes = " << num_classes << "\n"
     << "model.anchor_scales = " << list(anchor_scales) << "\n"
     << "model.anchor_base = " << anchor_base << "\n"
     << "model.seed = " << seed << "\n";
  return os.str();
}

std::vector<std::size_t> ModelConfig::head_strides() const {
  if (use_todb) return {4, 8, 16};
  return {8, 16};
}

std::vector<Anchor> ModelConfig::anchors_for(std::size_t stride) const {
  std::vector<Anchor> out;
  for (double s : anchor_scales) {
    const double side = anchor_base * static_cast<double>(stride) * s;
    out.push_back({side, side});
  }
  return out;
}

TODBBlock TODBBlock::make(std::size_t f1_channels, std::size_t f2_channels, std::size_t out_channels, Rng& rng) {
  TODBBlock b;
  b.reduce = Conv2d::make(f1_channels, f2_channels, 1, {}, rng);
  b.fuse = Conv2d::make(f2_channels, out_channels, 1, {}, rng);
  return b;
}

TODBBlock::Output TODBBlock::forward(const Tensor& f1, const Tensor& f2) const {
  Output o;
  o.f1_reduced = activate(reduce.forward(f1), act);
  o.upsampled = upsample_nearest(o.f1_reduced, 2);
  if (o.upsampled.shape() != f2.shape()) {
    throw TensorError("TODB: Upsample(F1') has shape " + shape_str(o.upsampled.shape()) + " but F2 has shape " +
                      shape_str(f2.shape()));
  }
  o.f3 = add(o.upsampled, f2);
  o.f4 = activate(fuse.forward(o.f3), act);
  return o;
}

void TODBBlock::collect(const std::string& prefix, NamedTensors& out) const {
  reduce.collect(prefix + ".reduce", out);
  fuse.collect(prefix + ".fuse", out);
}

Tensor todb_forward(const TODBBlock& block, const Tensor& f1, const Tensor& f2) { return block.forward(f1, f2).f4; }

MSDetModel::MSDetModel(ModelConfig config) : config_(std::move(config)) {
  const ModelConfig& c = config_;
  if (c.input_size % 16 != 0) {
    throw ConfigError("input size " + std::to_string(c.input_size) + " is not divisible by the largest stride 16");
  }
  Rng rng(c.seed);
  stem_ = CBSBlock::make(c.in_channels, c.width_stem, 3, 2, 1, rng);
  down4_ = CBSBlock::make(c.width_stem, c.width_p4, 3, 2, 1, rng);
  c4_ = CBSBlock::make(c.width_p4, c.width_p4, 3, 1, 1, rng);
  down8_ = CBSBlock::make(c.width_p4, c.width_p8, 3, 2, 1, rng);
  for (std::size_t i = 0; i < c.erd_units; ++i) {
    if (c.use_erd) {
      erd8_.push_back(ERDBlock::make(c.width_p8, c.width_p8, rng, c.erd_rates));
    } else {
      plain8_.push_back(CBSBlock::make(c.width_p8, c.width_p8, 3, 1, 1, rng));
    }
  }
  if (c.use_pcam) pcam8_ = PCAMBlock::make(c.width_p8, rng, c.pcam_fusion);
  down16_ = CBSBlock::make(c.width_p8, c.width_p16, 3, 2, 1, rng);
  for (std::size_t i = 0; i < c.erd_units; ++i) {
    if (c.use_erd) {
      erd16_.push_back(ERDBlock::make(c.width_p16, c.width_p16, rng, c.erd_rates));
    } else {
      plain16_.push_back(CBSBlock::make(c.width_p16, c.width_p16, 3, 1, 1, rng));
    }
  }
  spp_ = SPPBlock::make(c.width_p16, c.width_p16, rng, c.spp_pools);
  if (c.use_pcam) pcam16_ = PCAMBlock::make(c.width_p16, rng, c.pcam_fusion);
  neck_ = CBSBlock::make(c.width_p16 + c.width_p8, c.width_neck, 3, 1, 1, rng);
  const std::size_t hc = c.head_channels();
  head16_ = Conv2d::make(c.width_p16, hc, 1, {}, rng);
  head8_ = Conv2d::make(c.width_neck, hc, 1, {}, rng);
  init_head_bias(head16_, c, 16);
  init_head_bias(head8_, c, 8);
  if (c.use_todb) {
    todb_ = TODBBlock::make(c.width_neck, c.width_p4, hc, rng);
    head4_ = Conv2d::make(hc, hc, 1, {}, rng);
    init_head_bias(head4_, c, 4);
  }
}

std::vector<RawPrediction> MSDetModel::forward(const Tensor& images, Mode mode, ForwardTrace* trace) {
  Tensor x = images;
  if (x.rank() == 3) x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() != 4) throw TensorError("model expects [N,C,S,S] images, got " + shape_str(images.shape()));
  if (x.dim(1) != config_.in_channels) {
    throw TensorError("model expects " + std::to_string(config_.in_channels) + " input channels, got " +
                      shape_str(images.shape()));
  }
  if (x.dim(2) != x.dim(3) || x.dim(2) % 16 != 0) {
    throw TensorError("image side must be square and divisible by 16, got " + shape_str(images.shape()));
  }
  auto record = [&](const char* name, const Tensor& t) {
    if (trace) (*trace)[name] = image_shape(t);
  };

  const Tensor f2 = c4_.forward(down4_.forward(stem_.forward(x, mode), mode), mode);
  record("F2", f2);

  Tensor p8 = down8_.forward(f2, mode);
  for (auto& b : erd8_) p8 = b.forward(p8, mode);
  for (auto& b : plain8_) p8 = b.forward(p8, mode);
  if (pcam8_) p8 = pcam8_->forward(p8);
  record("P8", p8);

  Tensor p16 = down16_.forward(p8, mode);
  for (auto& b : erd16_) p16 = b.forward(p16, mode);
  for (auto& b : plain16_) p16 = b.forward(p16, mode);
  p16 = spp_.forward(p16, mode);
  if (pcam16_) p16 = pcam16_->forward(p16);
  record("P16", p16);

  const Tensor h16 = head16_.forward(p16);
  record("H16", h16);

  const Tensor up = upsample_nearest(p16, 2);
  record("U16", up);
  const Tensor cat = concat_channels({up, p8});
  record("C8", cat);
  const Tensor f1 = neck_.forward(cat, mode);
  record("F1", f1);
  const Tensor h8 = head8_.forward(f1);
  record("H8", h8);

  std::vector<RawPrediction> out;
  const std::size_t k = config_.num_classes;
  if (config_.use_todb) {
    const auto t = todb_.forward(f1, f2);
    record("F1'", t.f1_reduced);
    record("F1up", t.upsampled);
    record("F3", t.f3);
    record("F4", t.f4);
    const Tensor h4 = head4_.forward(t.f4);
    record("H4", h4);
    out.push_back({h4, 4, config_.anchors_for(4), k});
  }
  out.push_back({h8, 8, config_.anchors_for(8), k});
  out.push_back({h16, 16, config_.anchors_for(16), k});
  return out;
}

NamedTensors MSDetModel::named_tensors() const {
  NamedTensors out;
  stem_.collect("stem", out);
  down4_.collect("down4", out);
  c4_.collect("c4", out);
  down8_.collect("down8", out);
  for (std::size_t i = 0; i < erd8_.size(); ++i) erd8_[i].collect("erd8." + std::to_string(i), out);
  for (std::size_t i = 0; i < plain8_.size(); ++i) plain8_[i].collect("plain8." + std::to_string(i), out);
  if (pcam8_) pcam8_->collect("pcam.0", out);
  down16_.collect("down16", out);
  for (std::size_t i = 0; i < erd16_.size(); ++i) erd16_[i].collect("erd16." + std::to_string(i), out);
  for (std::size_t i = 0; i < plain16_.size(); ++i) plain16_[i].collect("plain16." + std::to_string(i), out);
  spp_.collect("spp", out);
  if (pcam16_) pcam16_->collect("pcam.1", out);
  neck_.collect("neck", out);
  head16_.collect("head16", out);
  head8_.collect("head8", out);
  if (config_.use_todb) {
    todb_.collect("todb", out);
    head4_.collect("head4", out);
  }
  return out;
}

std::vector<Tensor> MSDetModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& nt : named_tensors()) {
    if (nt.trainable) out.push_back(nt.tensor);
  }
  return out;
}

std::vector<RawPrediction> model_forward(MSDetModel& model, const Tensor& images, Mode mode) {
  return model.forward(images, mode);
}

ArchConfig arch_for_model(const ModelConfig& c) {
  ArchConfig a;
  a.input_size = c.input_size;
  a.input_channels = c.in_channels;
  auto push = [&](LayerSpec l) { a.layers.push_back(std::move(l)); };
  auto tap = [&](const char* name) { a.taps.push_back({name, static_cast<long>(a.layers.size()) - 1}); };
  auto with = [](LayerSpec l, const char* from, const char* other) {
    if (from) l.from = from;
    if (other) l.with = other;
    return l;
  };

  push(LayerSpec::conv(3, 2, 1, 1, c.width_stem));
  push(LayerSpec::conv(3, 2, 1, 1, c.width_p4));
  push(LayerSpec::conv(3, 1, 1, 1, c.width_p4));
  tap("F2");
  push(LayerSpec::conv(3, 2, 1, 1, c.width_p8));
  auto stage = [&](std::size_t width) {
    for (std::size_t i = 0; i < c.erd_units; ++i) {
      if (c.use_erd) {
        LayerSpec e;
        e.kind = LayerKind::erd;
        e.rates = c.erd_rates;
        e.channels = width;
        push(e);
      } else {
        push(LayerSpec::conv(3, 1, 1, 1, width));
      }
    }
  };
  stage(c.width_p8);
  LayerSpec pcam;
  pcam.kind = LayerKind::pcam;
  if (c.use_pcam) push(pcam);
  tap("P8");
  push(LayerSpec::conv(3, 2, 1, 1, c.width_p16));
  stage(c.width_p16);
  LayerSpec spp;
  spp.kind = LayerKind::spp;
  spp.pools = c.spp_pools;
  spp.channels = c.width_p16;
  push(spp);
  if (c.use_pcam) push(pcam);
  tap("P16");
  const std::size_t hc = c.head_channels();
  push(LayerSpec::conv(1, 1, 0, 1, hc));
  tap("H16");
  push(with(LayerSpec::upsample(2), "P16", nullptr));
  tap("U16");
  LayerSpec cat;
  cat.kind = LayerKind::concat;
  push(with(cat, nullptr, "P8"));
  tap("C8");
  push(LayerSpec::conv(3, 1, 1, 1, c.width_neck));
  tap("F1");
  push(LayerSpec::conv(1, 1, 0, 1, hc));
  tap("H8");
  if (c.use_todb) {
    push(with(LayerSpec::conv(1, 1, 0, 1, c.width_p4), "F1", nullptr));
    tap("F1'");
    push(LayerSpec::upsample(2));
    tap("F1up");
    LayerSpec sum;
    sum.kind = LayerKind::add;
    push(with(sum, nullptr, "F2"));
    tap("F3");
    push(LayerSpec::conv(1, 1, 0, 1, hc));
    tap("F4");
    push(LayerSpec::conv(1, 1, 0, 1, hc));
    tap("H4");
  }
  return a;
}

BBox decode_box(const BoxLogits& t, std::size_t gx, std::size_t gy, std::size_t stride, const Anchor& anchor,
                std::size_t image_size) {
  const double s = static_cast<double>(stride);
  const double size = static_cast<double>(image_size);
  const double cx = (2.0 * sigmoid_d(t.tx) - 0.5 + static_cast<double>(gx)) * s;
  const double cy = (2.0 * sigmoid_d(t.ty) - 0.5 + static_cast<double>(gy)) * s;
  const double sw = 2.0 * sigmoid_d(t.tw);
  const double sh = 2.0 * sigmoid_d(t.th);
  return {cx / size, cy / size, anchor.w * sw * sw / size, anchor.h * sh * sh / size};
}

std::optional<BoxLogits> encode_box(const BBox& box, std::size_t gx, std::size_t gy, std::size_t stride,
                                    const Anchor& anchor, std::size_t image_size) {
  const double s = static_cast<double>(stride);
  const double size = static_cast<double>(image_size);
  const double ox = (box.cx * size / s - static_cast<double>(gx) + 0.5) / 2.0;
  const double oy = (box.cy * size / s - static_cast<double>(gy) + 0.5) / 2.0;
  const double rw = std::sqrt(box.w * size / anchor.w) / 2.0;
  const double rh = std::sqrt(box.h * size / anchor.h) / 2.0;
  for (double p : {ox, oy, rw, rh}) {
    if (!(p > 0.0 && p < 1.0)) return std::nullopt;
  }
  return BoxLogits{logit(ox), logit(oy), logit(rw), logit(rh)};
}

std::vector<Detection> decode(const std::vector<RawPrediction>& preds, double conf_threshold,
                              std::size_t batch_index) {
  std::vector<Detection> out;
  for (const auto& p : preds) {
    const std::size_t g = p.grid();
    const std::size_t per = 5 + p.num_classes;
    const std::size_t channels = p.anchors.size() * per;
    if (p.map.dim(1) != channels) {
      throw TensorError("decode: head map " + shape_str(p.map.shape()) + " does not carry " +
                        std::to_string(channels) + " channels");
    }
    if (batch_index >= p.batch()) throw TensorError("decode: batch index out of range");
    const double* v = p.map.values().data() + batch_index * channels * g * g;
    auto at = [&](std::size_t ch, std::size_t y, std::size_t x) { return v[(ch * g + y) * g + x]; };
    for (std::size_t a = 0; a < p.anchors.size(); ++a) {
      const std::size_t base = a * per;
      for (std::size_t y = 0; y < g; ++y) {
        for (std::size_t x = 0; x < g; ++x) {
          const double obj = sigmoid_d(at(base + 4, y, x));
          int best_cls = 0;
          double best = -1.0;
          for (std::size_t c = 0; c < p.num_classes; ++c) {
            const double s = sigmoid_d(at(base + 5 + c, y, x));
            if (s > best) {
              best = s;
              best_cls = static_cast<int>(c);
            }
          }
          const double conf = obj * best;
          if (conf < conf_threshold) continue;
          const BoxLogits t{at(base, y, x), at(base + 1, y, x), at(base + 2, y, x), at(base + 3, y, x)};
          const BBox box = decode_box(t, x, y, p.stride, p.anchors[a], p.image_size()).clamped();
          if (!box.valid()) continue;
          out.push_back({box, conf, best_cls});
        }
      }
    }
  }
  return out;
}

}  // namespace msdet
