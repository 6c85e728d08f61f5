#include "fesnet/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace fesnet {

namespace {

void check_pair(const Tensor<float>& a, const Tensor<float>& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width() || a.batch() != b.batch() ||
      a.channels() != 1 || b.channels() != 1) {
    throw ShapeError(std::string(what) + ": expected two single-channel maps of equal "
                     "extent, got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
}

bool binary_at(const Tensor<float>& t, std::size_t i, const char* what) {
  const float v = t[i];
  if (v != 0.0f && v != 1.0f) {
    throw Error(std::string(what) + " is not binary (value " + std::to_string(v) +
                " at index " + std::to_string(i) + ")");
  }
  return v == 1.0f;
}

std::optional<double> ratio(double num, double den) {
  if (den == 0.0) return std::nullopt;
  return num / den;
}

}  // namespace

ConfusionCounts confusion_counts(const Tensor<float>& pred, const Tensor<float>& gt,
                                 const Tensor<float>* roi) {
  check_pair(pred, gt, "confusion_counts");
  if (roi) check_pair(pred, *roi, "confusion_counts roi");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (roi && !binary_at(*roi, i, "roi")) continue;
    const bool p = binary_at(pred, i, "prediction");
    const bool g = binary_at(gt, i, "ground truth");
    if (p && g) ++c.tp;
    else if (!p && !g) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

void RocHistogram::add(const Tensor<float>& prob, const Tensor<float>& gt,
                       const Tensor<float>* roi) {
  check_pair(prob, gt, "roc");
  if (roi) check_pair(prob, *roi, "roc roi");
  for (std::size_t i = 0; i < prob.size(); ++i) {
    if (roi && !binary_at(*roi, i, "roi")) continue;
    const double p = std::clamp(static_cast<double>(prob[i]), 0.0, 1.0);
    const auto bin = std::min<std::size_t>(kBins - 1, static_cast<std::size_t>(p * kBins));
    (binary_at(gt, i, "ground truth") ? positive : negative)[bin]++;
  }
}

RocHistogram& RocHistogram::operator+=(const RocHistogram& o) {
  for (std::size_t b = 0; b < kBins; ++b) {
    positive[b] += o.positive[b];
    negative[b] += o.negative[b];
  }
  return *this;
}

std::optional<double> RocHistogram::auc() const {
  std::uint64_t pos = 0, neg = 0;
  for (std::size_t b = 0; b < kBins; ++b) {
    pos += positive[b];
    neg += negative[b];
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  // Threshold k/256 predicts vessel for bins >= k. Sweep k from 256 (nothing
  // positive) down to 0 (everything positive).
  double area = 0.0;
  std::uint64_t tp = 0, fp = 0;
  double prev_tpr = 0.0, prev_fpr = 0.0;
  for (std::size_t k = kBins; k-- > 0;) {
    tp += positive[k];
    fp += negative[k];
    const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
    const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
    area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    prev_tpr = tpr;
    prev_fpr = fpr;
  }
  return area;
}

std::string to_string(Aggregation a) {
  return a == Aggregation::GlobalSum ? "global" : "per-image-mean";
}

Aggregation parse_aggregation(const std::string& text) {
  if (text == "global") return Aggregation::GlobalSum;
  if (text == "per-image-mean" || text == "mean") return Aggregation::PerImageMean;
  throw Error("unknown aggregation '" + text + "' (expected global|per-image-mean)");
}

MetricReport compute_metrics(const ConfusionCounts& c) {
  const auto tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const auto fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  MetricReport r;
  r.counts = c;
  r.se = ratio(tp, tp + fn);
  r.sp = ratio(tn, tn + fp);
  r.acc = ratio(tp + tn, tp + tn + fp + fn);
  if (tp + fn > 0 && tn + fp > 0) {
    r.auc_eq5 = 1.0 - 0.5 * (fp / (fp + tn) + fn / (fn + tp));
  }
  r.f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn);
  return r;
}

MetricReport aggregate(const std::vector<ConfusionCounts>& counts, Aggregation mode,
                       const std::vector<RocHistogram>* roc) {
  if (counts.empty()) throw Error("aggregate: no images to aggregate");
  if (roc && roc->size() != counts.size()) {
    throw Error("aggregate: " + std::to_string(roc->size()) + " ROC histograms for " +
                std::to_string(counts.size()) + " images");
  }
  ConfusionCounts total;
  for (const auto& c : counts) total += c;
  MetricReport r;
  if (mode == Aggregation::GlobalSum) {
    r = compute_metrics(total);
    if (roc) {
      RocHistogram h;
      for (const auto& x : *roc) h += x;
      r.roc_auc = h.auc();
    }
  } else {
    auto mean_of = [&](auto get) -> std::optional<double> {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < counts.size(); ++i) {
        if (auto v = get(i)) {
          sum += *v;
          ++n;
        }
      }
      if (n == 0) return std::nullopt;
      return sum / static_cast<double>(n);
    };
    std::vector<MetricReport> per;
    for (const auto& c : counts) per.push_back(compute_metrics(c));
    r.counts = total;
    r.se = mean_of([&](std::size_t i) { return per[i].se; });
    r.sp = mean_of([&](std::size_t i) { return per[i].sp; });
    r.acc = mean_of([&](std::size_t i) { return per[i].acc; });
    r.auc_eq5 = mean_of([&](std::size_t i) { return per[i].auc_eq5; });
    r.f1 = mean_of([&](std::size_t i) { return per[i].f1; });
    if (roc) r.roc_auc = mean_of([&](std::size_t i) { return (*roc)[i].auc(); });
  }
  r.aggregation = mode;
  r.images = counts.size();
  return r;
}

Image8 render_overlay(const Tensor<float>& pred, const Tensor<float>& gt,
                      const Tensor<float>* roi) {
  check_pair(pred, gt, "render_overlay");
  if (roi) check_pair(pred, *roi, "render_overlay roi");
  if (pred.batch() != 1) throw ShapeError("render_overlay expects a single image");
  Image8 out(pred.width(), pred.height(), 3);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (roi && !binary_at(*roi, i, "roi")) continue;
    const bool p = binary_at(pred, i, "prediction");
    const bool g = binary_at(gt, i, "ground truth");
    std::uint8_t* px = out.pixels.data() + 3 * i;
    if (p && g) px[1] = 255;
    else if (p) px[0] = 255;
    else if (g) px[2] = 255;
  }
  return out;
}

OverlayHistogram overlay_histogram(const Image8& overlay) {
  OverlayHistogram h;
  for (std::size_t i = 0; i < overlay.width * overlay.height; ++i) {
    const std::uint8_t* px = overlay.pixels.data() + 3 * i;
    const int r = px[0], g = px[1], b = px[2];
    if (r == 0 && g == 255 && b == 0) ++h.green;
    else if (r == 255 && g == 0 && b == 0) ++h.red;
    else if (r == 0 && g == 0 && b == 255) ++h.blue;
    else if (r == 0 && g == 0 && b == 0) ++h.black;
    else ++h.other;
  }
  return h;
}

namespace {

std::string pct(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
  return buf;
}

std::string full(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

}  // namespace

std::string format_metric_table(
    const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::size_t label_w = 7;
  for (const auto& [label, r] : rows) label_w = std::max(label_w, label.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %6s %8s %8s %8s %8s %8s %8s\n",
                static_cast<int>(label_w), "dataset", "images", "Se", "Sp", "Acc",
                "AUC-eq5", "ROC-AUC", "F1");
  out << buf;
  for (const auto& [label, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s %6zu %8s %8s %8s %8s %8s %8s\n",
                  static_cast<int>(label_w), label.c_str(), r.images, pct(r.se).c_str(),
                  pct(r.sp).c_str(), pct(r.acc).c_str(), pct(r.auc_eq5).c_str(),
                  pct(r.roc_auc).c_str(), pct(r.f1).c_str());
    out << buf;
  }
  if (!rows.empty()) {
    out << "(percent; aggregation: " << to_string(rows.front().second.aggregation)
        << ")\n";
  }
  return out.str();
}

std::string format_metric_kv(const std::string& prefix, const MetricReport& r) {
  std::ostringstream out;
  const std::string p = prefix.empty() ? "" : prefix + ".";
  out << p << "aggregation=" << to_string(r.aggregation) << '\n'
      << p << "images=" << r.images << '\n'
      << p << "tp=" << r.counts.tp << '\n'
      << p << "tn=" << r.counts.tn << '\n'
      << p << "fp=" << r.counts.fp << '\n'
      << p << "fn=" << r.counts.fn << '\n'
      << p << "se=" << full(r.se) << '\n'
      << p << "sp=" << full(r.sp) << '\n'
      << p << "acc=" << full(r.acc) << '\n'
      << p << "auc_eq5=" << full(r.auc_eq5) << '\n'
      << p << "roc_auc=" << full(r.roc_auc) << '\n'
      << p << "f1=" << full(r.f1) << '\n';
  return out.str();
}

}  // namespace fesnet
