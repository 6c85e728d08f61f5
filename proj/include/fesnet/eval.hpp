#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fesnet/data.hpp"
#include "fesnet/metrics.hpp"
#include "fesnet/model.hpp"

namespace fesnet {

/// Maps a raw (as-loaded) sample to 1x2xHxW class probabilities at the
/// sample's source resolution.
using Predictor = std::function<Tensor<float>(const Sample&)>;

/// Preprocess, run the model in inference mode, drop the padding and scale
/// the probabilities back to the source resolution.
Tensor<float> predict_probabilities(FesNet<float>& model, const Sample& raw,
                                    const PreprocessConfig& config = {});

Predictor model_predictor(FesNet<float>& model, const PreprocessConfig& config = {});
/// Returns the ground truth as certain probabilities (harness self-test).
Predictor oracle_predictor();
/// Predicts background everywhere.
Predictor background_predictor();

/// 1x1xHxW binary map: vessel where p(vessel) > p(background).
Tensor<float> argmax_mask(const Tensor<float>& probs);
/// 1x1xHxW vessel-probability channel.
Tensor<float> vessel_channel(const Tensor<float>& probs);

struct EvalOptions {
  Aggregation aggregation = Aggregation::GlobalSum;
  /// Restrict metrics to the field-of-view mask when the sample has one.
  bool use_roi = true;
  /// When set, writes <id>_overlay.png per image.
  std::filesystem::path overlay_dir;
};

struct ImageResult {
  std::string id;
  ConfusionCounts counts;
  MetricReport report;
};

struct EvalResult {
  MetricReport report;
  std::vector<ImageResult> images;
};

EvalResult evaluate(const Predictor& predictor, const std::vector<Sample>& samples,
                    const EvalOptions& options = {});

/// Per-image rows followed by the aggregate, as key=value lines.
std::string format_eval_kv(const EvalResult& result);

/// NumPy .npy (format 1.0, little-endian float32) of a 1xCxHxW tensor,
/// stored with shape (C, H, W).
void write_npy(const std::filesystem::path& path, const Tensor<float>& t);

/// 8-bit {0,255} rendering of a binary 1x1xHxW map.
Image8 mask_to_image(const Tensor<float>& mask);

}  // namespace fesnet
