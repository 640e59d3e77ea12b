#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msdet/arch.hpp"
#include "msdet/box.hpp"
#include "msdet/pcam.hpp"
#include "msdet/receptive_field.hpp"

namespace msdet {

struct Anchor {
  double w = 0.0;  // pixels
  double h = 0.0;
};

/// Assembly hyperparameters. Named profiles pin the widths; every field can
/// be overridden from a config file.
struct ModelConfig {
  std::string profile = "desk";
  std::size_t input_size = 96;
  std::size_t in_channels = 3;
  std::size_t width_stem = 8;
  std::size_t width_p4 = 16;  // F2 and the TODB reduce width
  std::size_t width_p8 = 32;
  std::size_t width_p16 = 64;
  std::size_t width_neck = 32;  // F1
  std::size_t erd_units = 2;    // per ERD stage (strides 8 and 16)
  std::vector<std::size_t> erd_rates{1, 3, 5};
  std::array<std::size_t, 3> spp_pools{5, 9, 13};
  bool use_todb = true;
  bool use_erd = true;
  bool use_pcam = true;
  PcamFusion pcam_fusion = PcamFusion::sum;
  std::size_t num_classes = 1;
  std::vector<double> anchor_scales{0.5, 1.0, 2.0};
  double anchor_base = 4.0;  // anchor side = anchor_base · stride · scale
  std::uint64_t seed = 0;

  static ModelConfig desk();
  static ModelConfig paper640();
  static ModelConfig for_profile(const std::string& name);

  /// Applies `model.*` keys; unknown `model.*` keys are rejected.
  void apply(const ConfigDoc& doc);
  /// `model.*` lines that apply() reads back to an identical config.
  std::string to_text() const;

  std::size_t anchors_per_head() const { return anchor_scales.size(); }
  std::size_t head_channels() const { return anchors_per_head() * (5 + num_classes); }
  std::vector<std::size_t> head_strides() const;
  std::vector<Anchor> anchors_for(std::size_t stride) const;
};

/// Per-head raw output: map is [N, A·(5+K), G, G]; channel a·(5+K) + {0..3}
/// are box logits, +4 objectness, +5.. class logits.
struct RawPrediction {
  Tensor map;
  std::size_t stride = 0;
  std::vector<Anchor> anchors;
  std::size_t num_classes = 1;

  std::size_t grid() const { return map.dim(3); }
  std::size_t batch() const { return map.dim(0); }
  std::size_t image_size() const { return grid() * stride; }
};

/// F1' = σ(W1 * F1), F3 = Upsample(F1') + F2, F4 = σ(W2 * F3).
struct TODBBlock {
  Conv2d reduce;  // W1, 1×1
  Conv2d fuse;    // W2, 1×1
  Activation act = Activation::silu;

  struct Output {
    Tensor f1_reduced;
    Tensor upsampled;
    Tensor f3;
    Tensor f4;
  };

  static TODBBlock make(std::size_t f1_channels, std::size_t f2_channels, std::size_t out_channels, Rng& rng);

  Output forward(const Tensor& f1, const Tensor& f2) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

Tensor todb_forward(const TODBBlock& block, const Tensor& f1, const Tensor& f2);

/// Stage feature maps captured during a forward, keyed by tap name.
using ForwardTrace = std::map<std::string, Shape>;

class MSDetModel {
 public:
  explicit MSDetModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// images: [N, C, S, S] (or [C, S, S]); S divisible by 16.
  std::vector<RawPrediction> forward(const Tensor& images, Mode mode, ForwardTrace* trace = nullptr);

  NamedTensors named_tensors() const;
  std::vector<Tensor> parameters() const;  // trainable only, stable order

 private:
  ModelConfig config_;
  CBSBlock stem_, down4_, c4_, down8_, down16_, neck_;
  std::vector<ERDBlock> erd8_, erd16_;
  std::vector<CBSBlock> plain8_, plain16_;  // stand-ins when ERD is disabled
  SPPBlock spp_;
  std::optional<PCAMBlock> pcam8_, pcam16_;
  TODBBlock todb_;
  Conv2d head4_, head8_, head16_;
};

std::vector<RawPrediction> model_forward(MSDetModel& model, const Tensor& images, Mode mode = Mode::eval);

/// Linear walk of the assembled network for the static analyzer. Tap names
/// match the keys written into ForwardTrace.
ArchConfig arch_for_model(const ModelConfig& config);

// Box parameterization shared by decode, encode and the loss:
//   cx = (2σ(tx) - 0.5 + gx)·stride, w = anchor_w·(2σ(tw))²
struct BoxLogits {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

BBox decode_box(const BoxLogits& t, std::size_t gx, std::size_t gy, std::size_t stride, const Anchor& anchor,
                std::size_t image_size);

/// Inverse of decode_box; nullopt when the box is outside the reachable range
/// of the cell/anchor (center offset outside (-0.5, 1.5) or size >= 4·anchor).
std::optional<BoxLogits> encode_box(const BBox& box, std::size_t gx, std::size_t gy, std::size_t stride,
                                    const Anchor& anchor, std::size_t image_size);

/// Detections with confidence σ(obj)·σ(cls) >= conf_threshold for one image
/// of the batch, coordinates normalized to [0,1].
std::vector<Detection> decode(const std::vector<RawPrediction>& preds, double conf_threshold,
                              std::size_t batch_index = 0);

}  // namespace msdet
