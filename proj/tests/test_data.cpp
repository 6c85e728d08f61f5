#include <cmath>
#include <set>

#include "doctest.h"
#include "fesnet/data.hpp"
#include "fesnet/synthetic.hpp"
#include "support/oracles.hpp"

using namespace fesnet;
namespace fs = std::filesystem;

namespace {

std::size_t count_split(const std::vector<DatasetEntry>& e, Split s) {
  std::size_t n = 0;
  for (const auto& x : e) n += x.split == s;
  return n;
}

bool is_binary(const Tensor<float>& t) {
  for (float v : t.data()) {
    if (v != 0.0f && v != 1.0f) return false;
  }
  return true;
}

double count_ones(const Tensor<float>& t) {
  double n = 0;
  for (float v : t.data()) n += v;
  return n;
}

}  // namespace

TEST_CASE("dataset splits follow the published protocol") {
  const auto root = oracle::scratch_dir("splits");
  struct Case {
    DatasetKind kind;
    std::size_t train, test;
  };
  for (const Case c : {Case{DatasetKind::Drive, 20, 20}, Case{DatasetKind::Stare, 10, 10},
                       Case{DatasetKind::Chase, 20, 8}, Case{DatasetKind::Hrf, 30, 15}}) {
    const fs::path dir = root / to_string(c.kind);
    write_synthetic_dataset(dir, c.kind, 20, 24, 1);
    DatasetSpec spec{c.kind, dir};
    const auto entries = list_dataset(spec);
    CAPTURE(to_string(c.kind));
    CHECK(count_split(entries, Split::Train) == c.train);
    CHECK(count_split(entries, Split::Test) == c.test);
    for (const auto& e : entries) CHECK(e.roi.has_value());
  }
  DatasetSpec drive{DatasetKind::Drive, root / "drive"};
  const auto e = list_dataset(drive);
  CHECK(e.front().id == "01_test");
  CHECK(e.front().split == Split::Test);
  CHECK(e.back().id == "40_training");
  CHECK(e.back().split == Split::Train);

  DatasetSpec hrf{DatasetKind::Hrf, root / "hrf"};
  hrf.hrf_train_per_category = 5;
  CHECK(count_split(list_dataset(hrf), Split::Train) == 15);
  fs::remove_all(root);
}

TEST_CASE("dataset errors name the offending file") {
  const auto root = oracle::scratch_dir("errors");
  write_synthetic_dataset(root, DatasetKind::Stare, 16, 16, 2);
  fs::remove(root / "masks" / "im0005.png");
  DatasetSpec spec{DatasetKind::Stare, root};
  try {
    list_dataset(spec);
    FAIL("expected a DatasetError");
  } catch (const DatasetError& e) {
    CHECK(std::string(e.what()).find("im0005") != std::string::npos);
  }
  CHECK_THROWS_AS(list_dataset(DatasetSpec{DatasetKind::Drive, root / "nope"}), DatasetError);

  const auto root2 = oracle::scratch_dir("count");
  write_synthetic_dataset(root2, DatasetKind::Chase, 16, 16, 2);
  fs::remove(root2 / "images" / "Image_01L.png");
  fs::remove(root2 / "masks" / "Image_01L.png");
  fs::remove(root2 / "roi" / "Image_01L.png");
  CHECK_THROWS_AS(list_dataset(DatasetSpec{DatasetKind::Chase, root2}), DatasetError);
  DatasetSpec lax{DatasetKind::Chase, root2};
  lax.check_counts = false;
  CHECK(list_dataset(lax).size() == 27);
  fs::remove_all(root);
  fs::remove_all(root2);
}

TEST_CASE("loaded masks and ROIs are binary") {
  const auto root = oracle::scratch_dir("load");
  write_synthetic_dataset(root, DatasetKind::Chase, 30, 34, 3);
  const auto samples = load_dataset(DatasetSpec{DatasetKind::Chase, root}, Split::Test);
  CHECK(samples.size() == 8);
  for (const auto& s : samples) {
    CHECK(s.image.shape() == Shape{1, 3, 30, 34});
    CHECK(is_binary(s.mask));
    CHECK(is_binary(*s.roi));
    CHECK(count_ones(s.mask) > 0);
  }
  fs::remove_all(root);
}

TEST_CASE("resize to width 640 then pad to a multiple of 16") {
  CHECK(scaled_height(584, 565, 640) == 662);
  CHECK(round_up(662, 16) == 672);
  CHECK(round_up(640, 16) == 640);
  const Sample raw = make_synthetic_sample("s", 584, 565, 1);
  const Sample r = resize_and_pad(raw, 640, 16);
  CHECK(r.image.shape() == Shape{1, 3, 672, 640});
  CHECK(r.content_height == 662);
  CHECK(r.content_width == 640);
  CHECK(r.source_height == 584);
  CHECK(count_ones(r.valid) == 662 * 640);
  CHECK(is_binary(r.mask));
  CHECK(r.image.at(0, 0, 670, 10) == 0.0f);
}

TEST_CASE("bilinear resize is the identity at equal size and preserves constants") {
  Rng rng(1);
  const auto x = oracle::random_tensor<float>({1, 3, 9, 7}, rng);
  CHECK(resize_bilinear(x, 9, 7) == x);
  const Tensor<float> c({1, 1, 5, 6}, 3.25f);
  const auto up = resize_bilinear(c, 13, 4);
  for (float v : up.data()) CHECK(v == doctest::Approx(3.25f));
}

TEST_CASE("z-score over the valid region") {
  Rng rng(2);
  auto x = oracle::random_tensor<float>({1, 3, 16, 16}, rng, 30.0);
  for (auto& v : x.data()) v += 100.0f;
  Tensor<float> valid({1, 1, 16, 16}, 1.0f);
  for (std::size_t i = 200; i < 256; ++i) valid[i] = 0.0f;
  auto joint = x;
  zscore_normalize(joint, &valid, false);
  double sum = 0, sq = 0, n = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < 256; ++i) {
      if (valid[i] == 0.0f) {
        CHECK(joint.plane_ptr(0, c)[i] == 0.0f);
        continue;
      }
      sum += joint.plane_ptr(0, c)[i];
      sq += double(joint.plane_ptr(0, c)[i]) * joint.plane_ptr(0, c)[i];
      ++n;
    }
  }
  CHECK(std::abs(sum / n) < 1e-5);
  CHECK(sq / n == doctest::Approx(1.0).epsilon(1e-4));

  auto per = x;
  zscore_normalize(per, &valid, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < 200; ++i) s += per.plane_ptr(0, c)[i];
    CHECK(std::abs(s / 200) < 1e-5);
  }

  Tensor<float> flat({1, 3, 4, 4}, 9.0f);
  zscore_normalize(flat);
  for (float v : flat.data()) CHECK(v == 0.0f);
}

TEST_CASE("flips are involutions and rotation keeps masks binary") {
  const Sample s = make_synthetic_sample("f", 32, 40, 5);
  const Sample hh = flip_horizontal(flip_horizontal(s));
  CHECK(hh.image == s.image);
  CHECK(hh.mask == s.mask);
  const Sample vv = flip_vertical(flip_vertical(s));
  CHECK(vv.image == s.image);
  CHECK(*vv.roi == *s.roi);
  CHECK(flip_horizontal(s).image.at(0, 1, 3, 0) == s.image.at(0, 1, 3, 39));

  Sample sq = make_synthetic_sample("q", 33, 33, 6);
  sq.valid = Tensor<float>({1, 1, 33, 33}, 1.0f);
  const Sample r = rotate(sq, 90.0);
  CHECK(count_ones(r.mask) == count_ones(sq.mask));
  CHECK(is_binary(r.mask));
  const Sample back = rotate(rotate(rotate(r, 90.0), 90.0), 90.0);
  CHECK(back.mask == sq.mask);
  const Sample odd = rotate(sq, 37.0);
  CHECK(is_binary(odd.mask));
  CHECK(is_binary(odd.valid));
  CHECK(count_ones(odd.valid) < 33 * 33);
}

TEST_CASE("augmentation and cropping are deterministic and keep masks binary") {
  Sample s = make_synthetic_sample("a", 48, 48, 7);
  s.valid = Tensor<float>({1, 1, 48, 48}, 1.0f);
  zscore_normalize(s.image, &s.valid);
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    Rng a = Rng::derive(seed, "aug"), b = Rng::derive(seed, "aug");
    const Sample x = random_crop(augment(s, {}, a), 32, a);
    const Sample y = random_crop(augment(s, {}, b), 32, b);
    CHECK(x.image == y.image);
    CHECK(x.mask == y.mask);
    CHECK(x.image.shape() == Shape{1, 3, 32, 32});
    CHECK(is_binary(x.mask));
    CHECK(is_binary(*x.roi));
    CHECK(is_binary(x.valid));
  }
  Rng r(1);
  CHECK_THROWS_AS(random_crop(s, 64, r), Error);
}

TEST_CASE("preprocess scales, pads and normalises") {
  const Sample raw = make_synthetic_sample("p", 50, 70, 8);
  PreprocessConfig pc;
  pc.target_width = 64;
  const Sample p = preprocess(raw, pc);
  CHECK(p.image.shape() == Shape{1, 3, 48, 64});
  CHECK(p.content_height == 46);
  CHECK(is_binary(p.mask));
}
