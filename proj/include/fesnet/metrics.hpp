#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fesnet/image_io.hpp"
#include "fesnet/tensor.hpp"

namespace fesnet {

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// pred, gt (and roi when given) are binary maps of equal extent; only
/// pixels with roi == 1 are counted.
ConfusionCounts confusion_counts(const Tensor<float>& pred, const Tensor<float>& gt,
                                 const Tensor<float>* roi = nullptr);

/// Threshold sweep for the ROC integral: vessel probabilities binned into
/// 256 levels, per ground-truth class.
struct RocHistogram {
  static constexpr std::size_t kBins = 256;
  std::array<std::uint64_t, kBins> positive{};
  std::array<std::uint64_t, kBins> negative{};

  /// prob_vessel in [0,1]; roi restricts pixels as for confusion_counts.
  void add(const Tensor<float>& prob_vessel, const Tensor<float>& gt,
           const Tensor<float>* roi = nullptr);
  RocHistogram& operator+=(const RocHistogram& o);
  /// Trapezoidal area under (FPR, TPR) over thresholds k/256; undefined
  /// without both classes.
  std::optional<double> auc() const;
};

enum class Aggregation { GlobalSum, PerImageMean };
std::string to_string(Aggregation a);
Aggregation parse_aggregation(const std::string& text);

/// A metric with an empty denominator is left unset, never reported as 0.
struct MetricReport {
  ConfusionCounts counts;
  std::optional<double> se, sp, acc, auc_eq5, f1;
  /// ROC integral over the probability map; set only when probabilities
  /// were available.
  std::optional<double> roc_auc;
  Aggregation aggregation = Aggregation::GlobalSum;
  std::size_t images = 1;
};

/// se = tp/(tp+fn), sp = tn/(tn+fp), acc = (tp+tn)/total,
/// auc_eq5 = 1 - (fp/(fp+tn) + fn/(fn+tp))/2, f1 = 2tp/(2tp+fp+fn).
MetricReport compute_metrics(const ConfusionCounts& c);

/// GlobalSum: metrics of the summed counts. PerImageMean: mean of each
/// metric over the images where it is defined. `roc` (same length as
/// `counts`, optional) adds roc_auc in the matching mode.
MetricReport aggregate(const std::vector<ConfusionCounts>& counts,
                       Aggregation mode = Aggregation::GlobalSum,
                       const std::vector<RocHistogram>* roc = nullptr);

/// TP green, FP red, FN blue, TN black. Pixels outside roi are black too.
Image8 render_overlay(const Tensor<float>& pred, const Tensor<float>& gt,
                      const Tensor<float>* roi = nullptr);

struct OverlayHistogram {
  std::uint64_t green = 0, red = 0, blue = 0, black = 0, other = 0;
};
OverlayHistogram overlay_histogram(const Image8& overlay);

/// One row: label, then Se Sp Acc AUC(eq5) ROC-AUC F1 as percentages with
/// two decimals ("n/a" when undefined).
std::string format_metric_table(
    const std::vector<std::pair<std::string, MetricReport>>& rows);
/// key=value lines (fractions, full precision) for machine reading.
std::string format_metric_kv(const std::string& prefix, const MetricReport& r);

}  // namespace fesnet
