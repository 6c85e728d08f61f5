#pragma once

// Checkpoint file: a line-oriented text header followed by a raw payload of
// little-endian float32 values, one block per tensor in header order.
//
//   FESNET-CHECKPOINT
//   format_version 1
//   config.<key> <value>        (model hyperparameters)
//   meta.<key> <value>          (training metadata)
//   tensor <name> <d0>x<d1>...  (repeated)
//   end_header <payload bytes>
//   <payload>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fesnet/adam.hpp"
#include "fesnet/model.hpp"

namespace fesnet {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  enum class Kind { Io, Format, Version, Truncated, ShapeMismatch, MissingTensor };
  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct CheckpointMeta {
  std::uint64_t seed = 0;
  /// Completed epochs.
  std::int64_t epoch = 0;
  /// Completed optimizer steps.
  std::int64_t step = 0;
  std::int64_t target_width = 640;
  bool per_channel_zscore = false;
  std::string rng = std::string(Rng::kAlgorithm);
  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  FesNetConfig config;
  CheckpointMeta meta;
  /// Parameters then batch-norm buffers, in model registration order.
  std::vector<NamedTensor> tensors;
  /// ADAM moments, stored as "adam.m:<param>" / "adam.v:<param>". Empty when
  /// the optimizer state was not saved.
  std::vector<NamedTensor> optimizer;
  std::int64_t adam_step = 0;
};

/// Captures the model (and optionally one AdamState per trainable tensor,
/// in parameters().trainable order).
Checkpoint make_checkpoint(FesNet<float>& model, const CheckpointMeta& meta,
                           const std::vector<AdamState<float>>* adam = nullptr);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

/// Writes to a temporary sibling then renames, so an existing file is only
/// ever replaced by a complete one.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies tensors into `model` by name. Throws CheckpointError naming the
/// first model tensor that is missing or has a different shape.
void load_checkpoint_into(const Checkpoint& ckpt, FesNet<float>& model,
                          std::vector<AdamState<float>>* adam = nullptr);

/// Builds a model from the stored config and loads its tensors.
FesNet<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace fesnet
