#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fesnet/image_io.hpp"
#include "fesnet/rng.hpp"
#include "fesnet/tensor.hpp"

namespace fesnet {

enum class DatasetKind { Drive, Stare, Chase, Hrf };
enum class Split { Train, Test };

std::string to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(const std::string& text);
std::string to_string(Split split);
Split parse_split(const std::string& text);

class DatasetError : public Error {
 public:
  using Error::Error;
};

/// On-disk layout:
///   <root>/images/<stem>.{png,ppm,pgm}
///   <root>/<mask_dir>/<stem>.{png,pgm,ppm}
///   <root>/roi/<stem>.{png,pgm,ppm}      (optional, all-or-nothing)
/// Files pair by identical stem; stems sort lexicographically.
struct DatasetSpec {
  DatasetKind kind = DatasetKind::Drive;
  std::filesystem::path root;
  /// Ground-truth directory. STARE ships two annotators; convert the one you
  /// want into this directory (default: the first annotator in masks/).
  std::string mask_dir = "masks";
  /// HRF: images per category (_h, _g, _dr) assigned to train.
  std::size_t hrf_train_per_category = 10;
  /// Check image counts against the dataset's published size.
  bool check_counts = true;
};

struct DatasetEntry {
  std::string id;
  Split split = Split::Train;
  std::filesystem::path image;
  std::filesystem::path mask;
  std::optional<std::filesystem::path> roi;
};

/// Pairs files and assigns splits without decoding pixels.
///   DRIVE  40 images: first 20 stems test, last 20 train (native 01-20 are
///          the test set, 21-40 training)
///   STARE  20 images: first 10 train, last 10 test
///   CHASE  28 images: first 20 train, last 8 test
///   HRF    45 images: per category, first hrf_train_per_category train
std::vector<DatasetEntry> list_dataset(const DatasetSpec& spec);

struct Sample {
  std::string id;
  Split split = Split::Train;
  Tensor<float> image;  // 1x3xHxW
  Tensor<float> mask;   // 1x1xHxW in {0,1}
  std::optional<Tensor<float>> roi;  // 1x1xHxW in {0,1}
  /// 1 where the pixel holds image content; 0 on padding and rotation fill.
  Tensor<float> valid;
  std::size_t source_height = 0, source_width = 0;
  /// Extent of the resized content before bottom/right padding.
  std::size_t content_height = 0, content_width = 0;

  std::size_t height() const { return image.height(); }
  std::size_t width() const { return image.width(); }
};

/// Decodes one entry. Gray images are replicated to 3 channels; masks and
/// ROIs are binarised with value > 127 -> 1.
Sample load_sample(const DatasetEntry& entry);
std::vector<Sample> load_dataset(const DatasetSpec& spec);
std::vector<Sample> load_dataset(const DatasetSpec& spec, Split split);

Tensor<float> binarize(const Image8& image, const std::filesystem::path& path);

Tensor<float> resize_bilinear(const Tensor<float>& x, std::size_t out_h,
                              std::size_t out_w);
Tensor<float> resize_nearest(const Tensor<float>& x, std::size_t out_h,
                             std::size_t out_w);
/// Zero-pads on the bottom/right.
Tensor<float> pad_to(const Tensor<float>& x, std::size_t out_h, std::size_t out_w);
/// Top-left out_h x out_w window.
Tensor<float> crop_to(const Tensor<float>& x, std::size_t out_h, std::size_t out_w);

/// Height after scaling an h x w image to `target_width`.
std::size_t scaled_height(std::size_t h, std::size_t w, std::size_t target_width);
std::size_t round_up(std::size_t v, std::size_t multiple);

/// Scales to target_width (bilinear image, nearest mask/roi), then pads
/// bottom/right with zeros to multiples of `multiple`. Padding is recorded
/// in `valid`.
Sample resize_and_pad(const Sample& s, std::size_t target_width = 640,
                      std::size_t multiple = 16);

/// In-place z-score over the pixels where `valid` is 1 (all pixels when
/// null): jointly over channels by default, per channel on request. The
/// standard deviation is clamped below at 1e-6. Pixels outside `valid` are
/// set to 0.
void zscore_normalize(Tensor<float>& image, const Tensor<float>* valid = nullptr,
                      bool per_channel = false);

struct AugmentConfig {
  double contrast_lo = 0.8, contrast_hi = 1.2;
  double brightness_lo = -0.2, brightness_hi = 0.2;
  double hflip_p = 0.5, vflip_p = 0.5;
  double rotate_lo = 1.0, rotate_hi = 360.0;
  bool rotate = true;
};

Sample flip_horizontal(const Sample& s);
Sample flip_vertical(const Sample& s);
/// Rotates about the image centre by `degrees` (counter-clockwise): bilinear
/// for the image, nearest for mask/roi/valid, zero fill outside.
Sample rotate(const Sample& s, double degrees);

/// Contrast, brightness, flips and rotation, drawn from `rng` in that order.
Sample augment(const Sample& s, const AugmentConfig& config, Rng& rng);

/// Aligned size x size window; origin drawn uniformly from `rng`.
Sample random_crop(const Sample& s, std::size_t size, Rng& rng);

struct PreprocessConfig {
  std::size_t target_width = 640;
  std::size_t multiple = 16;
  bool per_channel_zscore = false;
};

/// resize_and_pad followed by z-score over the valid region.
Sample preprocess(const Sample& raw, const PreprocessConfig& config = {});

}  // namespace fesnet
