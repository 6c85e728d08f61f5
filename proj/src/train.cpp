#include "fesnet/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace fesnet {

namespace {

using json = nlohmann::ordered_json;

json optional_number(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot append to " + path.string());
  out << line << '\n';
}

}  // namespace

double lr_schedule(const TrainConfig& config, std::int64_t epoch) {
  if (epoch < 0) throw Error("epoch must be non-negative");
  return config.lr0 * std::pow(config.lr_decay, static_cast<double>(epoch));
}

std::string step_json(const StepRecord& r) {
  json j;
  j["type"] = "step";
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  return j.dump();
}

std::string epoch_json(const EpochRecord& r) {
  json j;
  j["type"] = "epoch";
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["steps"] = r.steps;
  j["mean_loss"] = r.mean_loss;
  if (r.validation) {
    const auto& v = *r.validation;
    j["validation"] = {{"se", optional_number(v.se)},
                       {"sp", optional_number(v.sp)},
                       {"acc", optional_number(v.acc)},
                       {"auc_eq5", optional_number(v.auc_eq5)},
                       {"roc_auc", optional_number(v.roc_auc)},
                       {"f1", optional_number(v.f1)}};
  }
  return j.dump();
}

Batch stack_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw Error("empty batch");
  const std::size_t h = samples.front().height(), w = samples.front().width();
  const std::size_t n = samples.size();
  Batch b{Tensor<float>({n, 3, h, w}), Tensor<float>({n, 1, h, w}),
          Tensor<float>({n, 1, h, w})};
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = samples[i];
    if (s.height() != h || s.width() != w) {
      throw ShapeError("batch mixes extents " + std::to_string(h) + "x" +
                       std::to_string(w) + " and " + std::to_string(s.height()) + "x" +
                       std::to_string(s.width()));
    }
    std::copy(s.image.ptr(), s.image.ptr() + s.image.size(), b.image.plane_ptr(i, 0));
    std::copy(s.mask.ptr(), s.mask.ptr() + s.mask.size(), b.mask.plane_ptr(i, 0));
    std::copy(s.valid.ptr(), s.valid.ptr() + s.valid.size(), b.valid.plane_ptr(i, 0));
  }
  return b;
}

Trainer::Trainer(FesNet<float>& model, TrainConfig config)
    : model_(model), config_(std::move(config)) {
  if (config_.batch_size == 0) throw Error("batch size must be positive");
  if (config_.crop_size == 0) throw Error("crop size must be positive");
  if (config_.crop_size % FesNetConfig::kDownsampleFactor != 0) {
    throw Error("crop size " + std::to_string(config_.crop_size) +
                " must be a multiple of " +
                std::to_string(FesNetConfig::kDownsampleFactor));
  }
  if (!(config_.lr0 > 0.0) || !(config_.lr_decay > 0.0)) {
    throw Error("learning rate and decay must be positive");
  }
  for (const auto& p : model_.parameters().trainable) {
    adam_.emplace_back(p.value->shape());
  }
}

double Trainer::step(const std::vector<Sample>& samples, double lr) {
  const Batch b = stack_batch(samples);
  model_.set_mode(Mode::Train);
  model_.zero_grad();
  const Tensor<float> probs = model_.forward(b.image);
  LossResult<float> loss = cross_entropy_loss(probs, b.mask, &b.valid);
  if (!std::isfinite(loss.loss)) {
    throw TrainingAborted("non-finite loss at step " + std::to_string(steps_done_ + 1));
  }
  model_.backward(loss.dlogits);
  ParamSet<float> set = model_.parameters();
  for (const auto& p : set.trainable) {
    for (float g : p.grad->data()) {
      if (!std::isfinite(g)) {
        throw TrainingAborted("non-finite gradient in " + p.name + " at step " +
                              std::to_string(steps_done_ + 1));
      }
    }
  }
  for (std::size_t i = 0; i < set.trainable.size(); ++i) {
    adam_step(*set.trainable[i].value, *set.trainable[i].grad, adam_[i], lr);
  }
  ++steps_done_;
  return loss.loss;
}

std::int64_t Trainer::steps_per_epoch(std::size_t train_size) const {
  if (config_.steps_per_epoch > 0) return config_.steps_per_epoch;
  return static_cast<std::int64_t>((train_size + config_.batch_size - 1) /
                                   config_.batch_size);
}

std::vector<Sample> Trainer::make_batch(const std::vector<Sample>& train,
                                        std::int64_t epoch,
                                        std::int64_t step_in_epoch) const {
  const std::size_t n = train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle = Rng::derive(config_.seed, "epoch-order", static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[shuffle.below(i)]);
  }
  std::vector<Sample> batch;
  for (std::size_t j = 0; j < config_.batch_size; ++j) {
    const std::size_t draw = static_cast<std::size_t>(step_in_epoch) * config_.batch_size + j;
    const Sample& s = train[order[draw % n]];
    Rng rng = Rng::derive(config_.seed, s.id, static_cast<std::uint64_t>(epoch), draw / n);
    Sample a = config_.augment ? augment(s, config_.augment_config, rng) : s;
    batch.push_back(random_crop(a, config_.crop_size, rng));
  }
  return batch;
}

TrainLog Trainer::fit(const std::vector<Sample>& train, const TrainOutputs& outputs) {
  if (train.empty()) throw Error("training split is empty");
  for (const auto& s : train) {
    if (s.height() < config_.crop_size || s.width() < config_.crop_size) {
      throw Error("sample " + s.id + " (" + std::to_string(s.height()) + "x" +
                  std::to_string(s.width()) + ") is smaller than the crop size " +
                  std::to_string(config_.crop_size));
    }
  }
  const bool write = !outputs.dir.empty();
  const auto log_path = outputs.dir / "train_log.jsonl";
  const auto timing_path = outputs.dir / "timing.jsonl";
  const auto ckpt_path = outputs.dir / "checkpoint.fesnet";

  TrainLog log;
  const std::int64_t steps = steps_per_epoch(train.size());
  for (std::int64_t epoch = epochs_done_; epoch < config_.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_schedule(config_, epoch);
    double loss_sum = 0.0;
    for (std::int64_t k = 0; k < steps; ++k) {
      const double loss = step(make_batch(train, epoch, k), lr);
      loss_sum += loss;
      StepRecord rec{steps_done_, epoch, lr, loss};
      log.steps.push_back(rec);
      if (write) append_line(log_path, step_json(rec));
      if (outputs.on_step) outputs.on_step(rec);
    }
    EpochRecord er{epoch, lr, loss_sum / static_cast<double>(steps), steps,
                   std::nullopt, 0.0};
    if (outputs.validate && config_.validate_every > 0 &&
        (epoch + 1) % config_.validate_every == 0) {
      er.validation = outputs.validate(model_);
      model_.set_mode(Mode::Train);
    }
    er.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    epochs_done_ = epoch + 1;
    log.epochs.push_back(er);
    if (write) {
      append_line(log_path, epoch_json(er));
      append_line(timing_path, json{{"epoch", epoch}, {"seconds", er.seconds}}.dump());
      const bool last = epochs_done_ == config_.epochs;
      if (last || (config_.checkpoint_every > 0 &&
                   epochs_done_ % config_.checkpoint_every == 0)) {
        save_checkpoint(checkpoint(), ckpt_path);
      }
    }
  }
  return log;
}

Checkpoint Trainer::checkpoint() const {
  CheckpointMeta meta;
  meta.seed = config_.seed;
  meta.epoch = epochs_done_;
  meta.step = steps_done_;
  meta.target_width = static_cast<std::int64_t>(config_.preprocess.target_width);
  meta.per_channel_zscore = config_.preprocess.per_channel_zscore;
  return make_checkpoint(model_, meta, &adam_);
}

}  // namespace fesnet
