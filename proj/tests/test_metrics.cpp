#include <cmath>
#include <cstring>
#include <fstream>

#include "doctest.h"
#include "fesnet/eval.hpp"
#include "fesnet/synthetic.hpp"
#include "support/oracles.hpp"

using namespace fesnet;

namespace {

Tensor<float> map(std::size_t h, std::size_t w, std::vector<float> v) {
  return Tensor<float>({1, 1, h, w}, std::move(v));
}

}  // namespace

TEST_CASE("metrics of a hand-computed confusion matrix") {
  const MetricReport r = compute_metrics({8, 80, 2, 10});
  CHECK(*r.se == doctest::Approx(0.4444444444));
  CHECK(*r.sp == doctest::Approx(0.9756097561));
  CHECK(*r.acc == doctest::Approx(0.88));
  CHECK(*r.auc_eq5 == doctest::Approx(0.7100271003));
  CHECK(*r.f1 == doctest::Approx(0.5714285714));
  CHECK_FALSE(r.roc_auc.has_value());
}

TEST_CASE("2x2 enumeration") {
  const auto pred = map(2, 2, {1, 1, 0, 1});
  const auto gt = map(2, 2, {1, 0, 1, 1});
  const ConfusionCounts c = confusion_counts(pred, gt);
  CHECK(c == ConfusionCounts{2, 0, 1, 1});
  const MetricReport r = compute_metrics(c);
  CHECK(*r.se == doctest::Approx(2.0 / 3));
  CHECK(*r.sp == 0.0);
  CHECK(*r.acc == 0.5);
  CHECK(*r.f1 == doctest::Approx(2.0 / 3));
  CHECK(*r.auc_eq5 == doctest::Approx(1.0 / 3));
}

TEST_CASE("metric identities over random counts") {
  Rng rng(17);
  for (int i = 0; i < 1000; ++i) {
    const ConfusionCounts c{1 + rng.below(5000), 1 + rng.below(50000), 1 + rng.below(3000),
                            1 + rng.below(3000)};
    const MetricReport r = compute_metrics(c);
    CHECK(std::abs(*r.auc_eq5 - (*r.se + *r.sp) / 2) < 1e-12);
    const double prec = double(c.tp) / double(c.tp + c.fp);
    const double rec = double(c.tp) / double(c.tp + c.fn);
    CHECK(std::abs(*r.f1 - 2 * prec * rec / (prec + rec)) < 1e-12);
  }
}

TEST_CASE("undefined metrics stay unset") {
  const MetricReport none = compute_metrics({0, 10, 0, 0});
  CHECK_FALSE(none.se.has_value());
  CHECK_FALSE(none.f1.has_value());
  CHECK(*none.sp == 1.0);
  const std::string table = format_metric_table({{"x", none}});
  CHECK(table.find("n/a") != std::string::npos);
  CHECK(format_metric_kv("m", none).find("m.se=undefined") != std::string::npos);
}

TEST_CASE("confusion counts respect the ROI and validate inputs") {
  const auto pred = map(1, 4, {1, 1, 0, 0});
  const auto gt = map(1, 4, {1, 0, 1, 0});
  const auto roi = map(1, 4, {1, 1, 0, 0});
  CHECK(confusion_counts(pred, gt, &roi) == ConfusionCounts{1, 0, 1, 0});
  CHECK_THROWS_AS(confusion_counts(map(1, 4, {0.5f, 0, 0, 0}), gt), Error);
  CHECK_THROWS_AS(confusion_counts(map(2, 2, {0, 0, 0, 0}), gt), ShapeError);
}

TEST_CASE("aggregation modes differ as expected") {
  const std::vector<ConfusionCounts> counts{{9, 1, 0, 0}, {1, 90, 0, 9}};
  const MetricReport g = aggregate(counts, Aggregation::GlobalSum);
  const MetricReport m = aggregate(counts, Aggregation::PerImageMean);
  CHECK(*g.se == doctest::Approx(10.0 / 19));
  CHECK(*m.se == doctest::Approx((1.0 + 0.1) / 2));
  CHECK(m.images == 2);
  const std::vector<ConfusionCounts> partial{{0, 5, 0, 0}, {1, 1, 1, 1}};
  CHECK(*aggregate(partial, Aggregation::PerImageMean).se == doctest::Approx(0.5));
  CHECK(parse_aggregation("per-image-mean") == Aggregation::PerImageMean);
}

TEST_CASE("ROC histogram integral") {
  RocHistogram h;
  const auto gt = map(1, 4, {1, 1, 0, 0});
  h.add(map(1, 4, {0.9f, 0.8f, 0.1f, 0.2f}), gt);
  CHECK(*h.auc() == doctest::Approx(1.0));
  RocHistogram inv;
  inv.add(map(1, 4, {0.1f, 0.2f, 0.9f, 0.8f}), gt);
  CHECK(*inv.auc() == doctest::Approx(0.0));
  RocHistogram flat;
  flat.add(map(1, 4, {0.5f, 0.5f, 0.5f, 0.5f}), gt);
  CHECK(*flat.auc() == doctest::Approx(0.5));
  RocHistogram one_class;
  one_class.add(map(1, 2, {0.3f, 0.4f}), map(1, 2, {0, 0}));
  CHECK_FALSE(one_class.auc().has_value());
}

TEST_CASE("overlay colours match the confusion counts") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 3 + rng.below(20), w = 3 + rng.below(20);
    Tensor<float> pred({1, 1, h, w}), gt({1, 1, h, w}), roi({1, 1, h, w});
    for (std::size_t i = 0; i < pred.size(); ++i) {
      pred[i] = static_cast<float>(rng.below(2));
      gt[i] = static_cast<float>(rng.below(2));
      roi[i] = rng.below(5) ? 1.0f : 0.0f;
    }
    const ConfusionCounts c = confusion_counts(pred, gt, &roi);
    const OverlayHistogram o = overlay_histogram(render_overlay(pred, gt, &roi));
    CHECK(o.green == c.tp);
    CHECK(o.red == c.fp);
    CHECK(o.blue == c.fn);
    CHECK(o.black == c.tn + (h * w - c.total()));
    CHECK(o.other == 0);
  }
  const Image8 img = render_overlay(map(1, 2, {1, 0}), map(1, 2, {1, 1}));
  CHECK(img.at(0, 0, 1) == 255);
  CHECK(img.at(0, 0, 0) == 0);
  CHECK(img.at(0, 1, 2) == 255);
}

TEST_CASE("evaluation harness self-tests") {
  std::vector<Sample> samples;
  for (int i = 0; i < 3; ++i) {
    samples.push_back(make_synthetic_sample("s" + std::to_string(i), 30, 26, i));
  }
  const EvalResult perfect = evaluate(oracle_predictor(), samples);
  CHECK(*perfect.report.se == 1.0);
  CHECK(*perfect.report.sp == 1.0);
  CHECK(*perfect.report.acc == 1.0);
  CHECK(*perfect.report.f1 == 1.0);
  CHECK(*perfect.report.auc_eq5 == 1.0);
  CHECK(*perfect.report.roc_auc == doctest::Approx(1.0));
  CHECK(perfect.images.size() == 3);

  const EvalResult bg = evaluate(background_predictor(), samples);
  CHECK(*bg.report.se == 0.0);
  CHECK(*bg.report.sp == 1.0);
  CHECK(*bg.report.f1 == 0.0);

  EvalOptions all;
  all.use_roi = false;
  const EvalResult whole = evaluate(oracle_predictor(), samples, all);
  CHECK(whole.report.counts.total() == 3 * 30 * 26);
  CHECK(perfect.report.counts.total() < whole.report.counts.total());
  CHECK(format_eval_kv(perfect).find("s2.") != std::string::npos);
}

TEST_CASE("evaluation is repeatable and writes overlays") {
  const auto dir = oracle::scratch_dir("overlay");
  FesNetConfig cfg;
  cfg.pcb_channels = {8, 16, 32, 64};
  FesNet<float> model(cfg);
  model.init(1);
  PreprocessConfig pc;
  pc.target_width = 32;
  std::vector<Sample> samples{make_synthetic_sample("a", 28, 30, 1)};
  EvalOptions opts;
  opts.overlay_dir = dir;
  const EvalResult a = evaluate(model_predictor(model, pc), samples, opts);
  const EvalResult b = evaluate(model_predictor(model, pc), samples, opts);
  CHECK(a.report.counts == b.report.counts);
  CHECK(format_eval_kv(a) == format_eval_kv(b));
  const Image8 o = read_image(dir / "a_overlay.png");
  CHECK(o.width == 30);
  CHECK(o.height == 28);
  std::filesystem::remove_all(dir);
}

TEST_CASE("npy writer layout") {
  const auto dir = oracle::scratch_dir("npy");
  Tensor<float> t({1, 2, 3, 4});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i) * 0.5f;
  write_npy(dir / "t.npy", t);
  std::ifstream in(dir / "t.npy", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  CHECK(bytes.substr(1, 5) == "NUMPY");
  const std::size_t header = bytes.size() - 24 * 4;
  CHECK(header % 64 == 0);
  CHECK(header == 128);
  CHECK(bytes.find("'descr': '<f4'") != std::string::npos);
  CHECK(bytes.find("(2, 3, 4)") != std::string::npos);
  float last = 0;
  std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
  CHECK(last == 11.5f);
  std::filesystem::remove_all(dir);
}
