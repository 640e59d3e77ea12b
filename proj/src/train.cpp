#include "msdet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "msdet/checkpoint.hpp"

namespace msdet {

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { throw ConfigError("invalid training config: " + m); };
  if (!(lr >= 0)) bad("lr must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) bad("momentum must be in [0, 1)");
  if (batch_size == 0) bad("batch size must be positive");
  if (!(grad_clip >= 0)) bad("grad_clip must be >= 0");
  if (!(loss.lambda_box >= 0 && loss.lambda_obj >= 0)) bad("loss weights must be >= 0");
  if (!(iou_match > 0 && iou_match <= 1)) bad("eval IoU must be in (0, 1]");
  if (!(conf_threshold >= 0 && conf_threshold <= 1)) bad("confidence threshold must be in [0, 1]");
  if (!(nms_iou >= 0 && nms_iou <= 1)) bad("NMS IoU must be in [0, 1]");
}

void TrainConfig::apply(const ConfigDoc& doc) {
  static const std::set<std::string> known = {
      "train.lr",        "train.momentum",   "train.batch",      "train.epochs",
      "train.seed",      "train.save_every_epoch", "train.grad_clip", "loss.lambda_box", "loss.lambda_obj",
      "loss.norm",       "eval.iou",         "eval.conf",        "eval.nms_iou",
      "augment.enabled", "augment.hflip",    "augment.vflip",    "augment.rot90",
      "augment.brightness", "augment.contrast", "augment.salt_pepper", "augment.salt_pepper_density"};
  for (const auto& [k, v] : doc.keys) {
    const bool ours = k.rfind("train.", 0) == 0 || k.rfind("loss.", 0) == 0 || k.rfind("eval.", 0) == 0 ||
                      k.rfind("augment.", 0) == 0;
    if (ours && !known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  lr = doc.get_double("train.lr", lr);
  momentum = doc.get_double("train.momentum", momentum);
  if (doc.has("train.batch")) {
    const long b = doc.get_int("train.batch", 0);
    if (b < 1) throw ConfigError("train.batch must be >= 1");
    batch_size = static_cast<std::size_t>(b);
  }
  if (doc.has("train.epochs")) {
    const long e = doc.get_int("train.epochs", 0);
    if (e < 0) throw ConfigError("train.epochs must be >= 0");
    epochs = static_cast<std::size_t>(e);
  }
  seed = static_cast<std::uint64_t>(doc.get_int("train.seed", static_cast<long>(seed)));
  save_every_epoch = doc.get_bool("train.save_every_epoch", save_every_epoch);
  grad_clip = doc.get_double("train.grad_clip", grad_clip);
  loss.lambda_box = doc.get_double("loss.lambda_box", loss.lambda_box);
  loss.lambda_obj = doc.get_double("loss.lambda_obj", loss.lambda_obj);
  if (auto v = doc.get("loss.norm")) {
    if (*v == "images") {
      loss.norm = LossNorm::images;
    } else if (*v == "positives") {
      loss.norm = LossNorm::positives;
    } else {
      throw ConfigError("loss.norm must be images or positives");
    }
  }
  iou_match = doc.get_double("eval.iou", iou_match);
  conf_threshold = doc.get_double("eval.conf", conf_threshold);
  nms_iou = doc.get_double("eval.nms_iou", nms_iou);
  augment.enabled = doc.get_bool("augment.enabled", augment.enabled);
  augment.p_hflip = doc.get_double("augment.hflip", augment.p_hflip);
  augment.p_vflip = doc.get_double("augment.vflip", augment.p_vflip);
  augment.rot90 = doc.get_bool("augment.rot90", augment.rot90);
  augment.brightness = doc.get_double("augment.brightness", augment.brightness);
  augment.contrast = doc.get_double("augment.contrast", augment.contrast);
  augment.p_salt_pepper = doc.get_double("augment.salt_pepper", augment.p_salt_pepper);
  augment.salt_pepper_density = doc.get_double("augment.salt_pepper_density", augment.salt_pepper_density);
  validate();
}

void sgd_update(std::span<double> param, std::span<const double> grad, std::vector<double>& velocity, double lr,
                double momentum, double grad_scale) {
  if (velocity.size() != param.size()) velocity.assign(param.size(), 0.0);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : grad_scale * grad[i];
    velocity[i] = momentum * velocity[i] + g;
    param[i] -= lr * velocity[i];
  }
}

void sgd_step(const std::vector<Tensor>& params, SgdState& state, double lr, double momentum, double grad_scale) {
  state.velocity.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    const std::span<const double> g = p.has_grad() ? p.grad() : std::span<const double>{};
    sgd_update(p.mutable_values(), g, state.velocity[i], lr, momentum, grad_scale);
  }
}

double grad_norm(const std::vector<Tensor>& params) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_scale(double norm, double max_norm) {
  if (max_norm <= 0 || !(norm > max_norm)) return 1.0;
  return max_norm / norm;
}

Tensor images_to_tensor(const std::vector<const Plane8*>& images, std::size_t channels) {
  if (images.empty()) throw DataError("images_to_tensor: empty batch");
  const std::size_t w = images[0]->width, h = images[0]->height;
  std::vector<double> v;
  v.reserve(images.size() * channels * w * h);
  for (const Plane8* img : images) {
    if (img->width != w || img->height != h) throw DataError("images_to_tensor: mixed image sizes in batch");
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::uint8_t px : img->data) v.push_back(px / 255.0);
    }
  }
  return Tensor::from_values({images.size(), channels, h, w}, std::move(v));
}

std::vector<std::vector<Detection>> predict(MSDetModel& model, const std::vector<Plane8>& images,
                                            const PredictOptions& opts) {
  NoGradGuard guard;
  std::vector<std::vector<Detection>> out;
  for (std::size_t start = 0; start < images.size(); start += opts.batch_size) {
    const std::size_t end = std::min(images.size(), start + opts.batch_size);
    std::vector<const Plane8*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&images[i]);
    const auto preds = model.forward(images_to_tensor(batch, model.config().in_channels), Mode::eval);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto dets = decode(preds, opts.conf_threshold, b);
      std::stable_sort(dets.begin(), dets.end(),
                       [](const Detection& a, const Detection& c) { return a.confidence > c.confidence; });
      if (dets.size() > opts.max_candidates) dets.resize(opts.max_candidates);
      out.push_back(nms(dets, opts.nms_iou));
    }
  }
  return out;
}

Metrics evaluate_model(MSDetModel& model, const Dataset& data, const EvalOptions& eval, const PredictOptions& opts) {
  return evaluate(predict(model, data.images, opts), data.labels, eval);
}

std::string format_epoch_csv_header() { return "epoch,loss_box,loss_obj,precision,recall,map50\n"; }

std::string format_epoch_csv_row(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f\n", e.epoch, e.loss_box, e.loss_obj, e.precision,
                e.recall, e.map50);
  return buf;
}

LossTerms train_step(MSDetModel& model, const Tensor& images, const std::vector<std::vector<GroundTruth>>& boxes,
                     SgdState& state, const TrainConfig& cfg) {
  const auto params = model.parameters();
  for (auto p : params) p.zero_grad();
  const auto preds = model.forward(images, Mode::train);
  LossTerms terms = detection_loss(preds, assign_targets(boxes, model), cfg.loss);
  terms.total.backward();
  // Attention scales see gradients quadratic in feature magnitude; one
  // oversized step compounded by momentum can diverge the run.
  terms.grad_norm = grad_norm(params);
  if (!std::isfinite(terms.grad_norm)) throw TensorError("non-finite gradient norm");
  sgd_step(params, state, cfg.lr, cfg.momentum, clip_scale(terms.grad_norm, cfg.grad_clip));
  return terms;
}

TrainResult train(MSDetModel& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.size() == 0) throw TrainingError("training set is empty");
  const std::size_t s = model.config().input_size;
  for (const auto& img : train_set.images) {
    if (img.width != s || img.height != s) {
      throw TrainingError("training image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          " but the model expects " + std::to_string(s) + "x" + std::to_string(s));
    }
  }

  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log.open(out_dir / "train_log.csv", std::ios::binary | std::ios::trunc);
    if (!log) throw TrainingError("cannot write " + (out_dir / "train_log.csv").string());
    log << format_epoch_csv_header() << std::flush;
  }

  TrainResult result;
  SgdState state;
  Rng shuffle_rng(derive_seed(cfg.seed, 0x5348));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double box_sum = 0, obj_sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Plane8> imgs;
      std::vector<std::vector<GroundTruth>> boxes;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        imgs.push_back(train_set.images[idx]);
        boxes.push_back(train_set.labels[idx]);
        Rng aug_rng(derive_seed(derive_seed(cfg.seed, epoch), idx));
        augment(imgs.back(), boxes.back(), cfg.augment, aug_rng);
      }
      std::vector<const Plane8*> ptrs;
      for (const auto& im : imgs) ptrs.push_back(&im);
      LossTerms terms;
      try {
        terms = train_step(model, images_to_tensor(ptrs, model.config().in_channels), boxes, state, cfg);
      } catch (const TensorError& e) {
        throw TrainingError("epoch " + std::to_string(epoch) + " step " + std::to_string(steps + 1) + ": " +
                            e.what() + (out_dir.empty() ? "" : "; last good checkpoint kept in " + out_dir.string()));
      }
      box_sum += terms.box;
      obj_sum += terms.obj;
      ++steps;
      ++result.steps;
      if (hooks.on_step) hooks.on_step(result.steps, terms);
    }

    EpochLog e;
    e.epoch = epoch;
    e.loss_box = box_sum / static_cast<double>(steps);
    e.loss_obj = obj_sum / static_cast<double>(steps);
    if (val_set && val_set->size() > 0) {
      EvalOptions eo;
      eo.iou_thresholds = {cfg.iou_match};
      eo.operating_conf = cfg.conf_threshold;
      eo.size_buckets = false;
      PredictOptions po;
      po.nms_iou = cfg.nms_iou;
      const Metrics m = evaluate_model(model, *val_set, eo, po);
      e.precision = m.precision;
      e.recall = m.recall;
      e.map50 = m.ap.front();
    }
    result.log.push_back(e);
    if (!out_dir.empty()) {
      log << format_epoch_csv_row(e) << std::flush;
      const auto tensors = model.named_tensors();
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu.msdt", epoch);
      if (epoch == 1 || cfg.save_every_epoch) save_checkpoint(out_dir / name, tensors);
      save_checkpoint(out_dir / "last.msdt", tensors);
    }
    if (hooks.on_epoch) hooks.on_epoch(e);
  }
  return result;
}

}  // namespace msdet
