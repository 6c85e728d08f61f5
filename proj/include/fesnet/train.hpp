#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fesnet/adam.hpp"
#include "fesnet/checkpoint.hpp"
#include "fesnet/data.hpp"
#include "fesnet/metrics.hpp"
#include "fesnet/model.hpp"

namespace fesnet {

struct TrainConfig {
  double lr0 = 2e-5;
  /// Multiplicative learning-rate decay per epoch.
  double lr_decay = 0.90;
  std::int64_t epochs = 150;
  std::size_t batch_size = 4;
  std::size_t crop_size = 320;
  std::uint64_t seed = 0;
  /// 0: one pass over the train split, ceil(samples / batch_size).
  std::int64_t steps_per_epoch = 0;
  /// Save a checkpoint every this many epochs (and always after the last).
  std::int64_t checkpoint_every = 1;
  /// Run the validation callback every this many epochs; 0 disables it.
  std::int64_t validate_every = 0;
  bool augment = true;
  AugmentConfig augment_config;
  PreprocessConfig preprocess;
};

/// lr0 * lr_decay^epoch
double lr_schedule(const TrainConfig& config, std::int64_t epoch);

struct StepRecord {
  std::int64_t step = 0;  // 1-based
  std::int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  std::int64_t steps = 0;
  std::optional<MetricReport> validation;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

/// Raised when a loss or gradient is not finite. No parameter or optimizer
/// update is applied, and the checkpoint on disk stays at the last good one.
class TrainingAborted : public Error {
 public:
  using Error::Error;
};

std::string step_json(const StepRecord& r);
std::string epoch_json(const EpochRecord& r);

struct TrainOutputs {
  /// When set: train_log.jsonl (deterministic step/epoch records),
  /// timing.jsonl (wall clock) and checkpoint.fesnet are written here.
  std::filesystem::path dir;
  std::function<MetricReport(FesNet<float>&)> validate;
  std::function<void(const StepRecord&)> on_step;
};

class Trainer {
 public:
  Trainer(FesNet<float>& model, TrainConfig config);

  /// One optimizer step on a batch of equally sized samples (already
  /// preprocessed, augmented and cropped). Returns the masked loss.
  double step(const std::vector<Sample>& batch, double lr);

  /// The crops for step `step_in_epoch` of `epoch`, drawn from the
  /// preprocessed `train` samples with per-(sample, epoch, draw) streams.
  std::vector<Sample> make_batch(const std::vector<Sample>& train, std::int64_t epoch,
                                 std::int64_t step_in_epoch) const;

  std::int64_t steps_per_epoch(std::size_t train_size) const;

  /// Trains from the current epoch to config.epochs. `train` holds
  /// preprocessed samples.
  TrainLog fit(const std::vector<Sample>& train, const TrainOutputs& outputs = {});

  Checkpoint checkpoint() const;

  const TrainConfig& config() const { return config_; }
  std::int64_t steps_done() const { return steps_done_; }
  std::int64_t epochs_done() const { return epochs_done_; }
  std::vector<AdamState<float>>& optimizer() { return adam_; }

 private:
  FesNet<float>& model_;
  TrainConfig config_;
  std::vector<AdamState<float>> adam_;
  std::int64_t steps_done_ = 0;
  std::int64_t epochs_done_ = 0;
};

/// Stacks samples of one extent into batched image/mask/valid tensors.
struct Batch {
  Tensor<float> image, mask, valid;
};
Batch stack_batch(const std::vector<Sample>& samples);

}  // namespace fesnet
