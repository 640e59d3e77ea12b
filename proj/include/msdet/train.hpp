#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msdet/augment.hpp"
#include "msdet/config_text.hpp"
#include "msdet/dataset_io.hpp"
#include "msdet/loss.hpp"
#include "msdet/metrics.hpp"
#include "msdet/model.hpp"

namespace msdet {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.937;
  std::size_t batch_size = 8;
  std::size_t epochs = 40;
  LossConfig loss;
  double iou_match = 0.5;       // evaluation IoU threshold
  double conf_threshold = 0.25;  // operating point for P / R
  double nms_iou = 0.5;
  double grad_clip = 10.0;  // max global gradient norm; 0 disables
  AugmentConfig augment;
  std::uint64_t seed = 0;
  bool save_every_epoch = false;

  void validate() const;
  /// Applies `train.*`, `loss.*`, `augment.*` and `eval.*` keys.
  void apply(const ConfigDoc& doc);
};

struct SgdState {
  std::vector<std::vector<double>> velocity;
};

/// v <- momentum·v + scale·g; p <- p - lr·v
void sgd_update(std::span<double> param, std::span<const double> grad, std::vector<double>& velocity, double lr,
                double momentum, double grad_scale = 1.0);
/// Steps every parameter from its accumulated gradient (absent = zero).
void sgd_step(const std::vector<Tensor>& params, SgdState& state, double lr, double momentum, double grad_scale = 1.0);
/// Global L2 norm over all accumulated gradients.
double grad_norm(const std::vector<Tensor>& params);
/// Factor that brings a gradient of norm `norm` down to `max_norm` (1 when
/// already within it, or when max_norm is 0).
double clip_scale(double norm, double max_norm);

/// [N, C, S, S] from 8-bit planes scaled to [0,1], replicated over C channels.
Tensor images_to_tensor(const std::vector<const Plane8*>& images, std::size_t channels);

struct PredictOptions {
  double conf_threshold = 0.001;
  double nms_iou = 0.5;
  std::size_t max_candidates = 300;  // per image, before NMS
  std::size_t batch_size = 8;
};

std::vector<std::vector<Detection>> predict(MSDetModel& model, const std::vector<Plane8>& images,
                                            const PredictOptions& opts = {});

Metrics evaluate_model(MSDetModel& model, const Dataset& data, const EvalOptions& eval, const PredictOptions& opts);

struct EpochLog {
  std::size_t epoch = 0;
  double loss_box = 0, loss_obj = 0;
  double precision = 0, recall = 0, map50 = 0;
};

std::string format_epoch_csv_header();
std::string format_epoch_csv_row(const EpochLog& e);

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t steps = 0;
};

struct TrainHooks {
  std::function<void(std::size_t step, const LossTerms&)> on_step;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Runs cfg.epochs over `train_set` with a seeded shuffle and seeded
/// per-(epoch, sample) augmentation. When out_dir is non-empty, writes
/// train_log.csv, epoch_001.msdt and last.msdt (last is rewritten after each
/// completed epoch, so a failed epoch leaves the previous one in place).
TrainResult train(MSDetModel& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir = {}, const TrainHooks& hooks = {});

/// One optimizer step on a fixed batch without augmentation; returns the
/// loss evaluated before the step.
LossTerms train_step(MSDetModel& model, const Tensor& images, const std::vector<std::vector<GroundTruth>>& boxes,
                     SgdState& state, const TrainConfig& cfg);

}  // namespace msdet
