#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fesnet/synthetic.hpp"
#include "fesnet/train.hpp"
#include "json.hpp"
#include "support/oracles.hpp"

using namespace fesnet;
namespace fs = std::filesystem;

namespace {

FesNetConfig small_config() {
  FesNetConfig c;
  c.pcb_channels = {8, 16, 32, 64};
  return c;
}

TrainConfig quick_config() {
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 2;
  tc.crop_size = 32;
  tc.steps_per_epoch = 2;
  tc.seed = 13;
  tc.preprocess.target_width = 48;
  return tc;
}

std::vector<Sample> train_set(const TrainConfig& tc) {
  std::vector<Sample> out;
  for (int i = 0; i < 3; ++i) {
    out.push_back(preprocess(make_synthetic_sample("t" + std::to_string(i), 40, 44, i),
                             tc.preprocess));
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("learning rate decays per epoch") {
  TrainConfig tc;
  CHECK(lr_schedule(tc, 0) == 2e-5);
  CHECK(lr_schedule(tc, 1) == doctest::Approx(1.8e-5).epsilon(1e-12));
  CHECK(lr_schedule(tc, 2) == doctest::Approx(1.62e-5).epsilon(1e-12));
  CHECK(lr_schedule(tc, 10) == doctest::Approx(2e-5 * std::pow(0.9, 10)));
  CHECK_THROWS_AS(lr_schedule(tc, -1), Error);
}

TEST_CASE("trainer validates its configuration") {
  FesNet<float> model(small_config());
  TrainConfig tc = quick_config();
  tc.crop_size = 40;
  CHECK_THROWS_AS(Trainer(model, tc), Error);
  tc = quick_config();
  tc.lr0 = 0;
  CHECK_THROWS_AS(Trainer(model, tc), Error);
  Trainer ok(model, quick_config());
  CHECK(ok.steps_per_epoch(5) == 2);
  TrainConfig pass = quick_config();
  pass.steps_per_epoch = 0;
  CHECK(Trainer(model, pass).steps_per_epoch(5) == 3);
}

TEST_CASE("batches are reproducible and binary") {
  const TrainConfig tc = quick_config();
  FesNet<float> model(small_config());
  Trainer trainer(model, tc);
  const auto train = train_set(tc);
  const auto a = trainer.make_batch(train, 1, 0);
  const auto b = trainer.make_batch(train, 1, 0);
  const auto c = trainer.make_batch(train, 2, 0);
  REQUIRE(a.size() == 2);
  CHECK(a[0].image == b[0].image);
  CHECK(a[1].mask == b[1].mask);
  CHECK_FALSE(a[0].image == c[0].image);
  for (const auto& s : a) {
    CHECK(s.image.shape() == Shape{1, 3, 32, 32});
    for (float v : s.mask.data()) CHECK((v == 0.0f || v == 1.0f));
  }
}

TEST_CASE("fit writes deterministic logs and checkpoints") {
  const TrainConfig tc = quick_config();
  const auto train = train_set(tc);
  std::vector<std::string> logs, ckpts;
  for (int run = 0; run < 2; ++run) {
    const auto dir = oracle::scratch_dir("fit" + std::to_string(run));
    FesNet<float> model(small_config());
    model.init(tc.seed);
    Trainer trainer(model, tc);
    TrainOutputs out;
    out.dir = dir;
    const TrainLog log = trainer.fit(train, out);
    CHECK(log.steps.size() == 4);
    CHECK(log.epochs.size() == 2);
    CHECK(log.steps.back().step == 4);
    CHECK(log.steps[2].lr == doctest::Approx(tc.lr0 * tc.lr_decay));
    logs.push_back(slurp(dir / "train_log.jsonl"));
    ckpts.push_back(slurp(dir / "checkpoint.fesnet"));
    CHECK(fs::exists(dir / "timing.jsonl"));
    const Checkpoint c = read_checkpoint(dir / "checkpoint.fesnet");
    CHECK(c.meta.epoch == 2);
    CHECK(c.meta.step == 4);
    CHECK(c.meta.seed == tc.seed);
    CHECK(c.meta.target_width == 48);
    fs::remove_all(dir);
  }
  CHECK(logs[0] == logs[1]);
  CHECK(ckpts[0] == ckpts[1]);

  std::istringstream lines(logs[0]);
  std::string line;
  int steps = 0, epochs = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j["type"] == "step") {
      ++steps;
      CHECK(std::isfinite(j["loss"].get<double>()));
    } else {
      ++epochs;
      CHECK(j.contains("mean_loss"));
      CHECK_FALSE(j.contains("seconds"));
    }
  }
  CHECK(steps == 4);
  CHECK(epochs == 2);
}

TEST_CASE("a different seed gives a different run") {
  TrainConfig tc = quick_config();
  tc.epochs = 1;
  const auto train = train_set(tc);
  std::vector<double> first;
  for (std::uint64_t seed : {1ULL, 2ULL}) {
    tc.seed = seed;
    FesNet<float> model(small_config());
    model.init(seed);
    Trainer trainer(model, tc);
    first.push_back(trainer.fit(train).steps.front().loss);
  }
  CHECK(first[0] != first[1]);
}

TEST_CASE("non-finite input aborts without updating") {
  const TrainConfig tc = quick_config();
  FesNet<float> model(small_config());
  model.init(1);
  Trainer trainer(model, tc);
  auto train = train_set(tc);
  auto batch = trainer.make_batch(train, 0, 0);
  batch[0].image[5] = NAN;
  const auto before = make_checkpoint(model, {}).tensors;
  CHECK_THROWS_AS(trainer.step(batch, 1e-3), TrainingAborted);
  CHECK(trainer.steps_done() == 0);
  const auto after = make_checkpoint(model, {}).tensors;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (before[i].name.find("running") == std::string::npos) {
      CHECK(before[i].value == after[i].value);
    }
  }
}

TEST_CASE("a few steps at a high rate reduce the loss on one image") {
  TrainConfig tc;
  tc.batch_size = 2;
  tc.crop_size = 32;
  tc.augment = false;
  tc.seed = 3;
  tc.preprocess.target_width = 48;
  FesNet<float> model(small_config());
  model.init(3);
  Trainer trainer(model, tc);
  const std::vector<Sample> one{preprocess(make_synthetic_sample("o", 48, 48, 4), tc.preprocess)};
  double first = 0, last = 0;
  for (int k = 0; k < 20; ++k) {
    const double loss = trainer.step(trainer.make_batch(one, 0, k), 1e-3);
    if (k == 0) first = loss;
    last = loss;
  }
  CHECK(last < first);
  CHECK(last < std::log(2.0));
}

TEST_CASE("mid-run checkpoint records progress and optimizer steps") {
  TrainConfig tc = quick_config();
  tc.epochs = 1;
  FesNet<float> model(small_config());
  model.init(tc.seed);
  Trainer trainer(model, tc);
  trainer.fit(train_set(tc));
  const Checkpoint mid = parse_checkpoint(serialize_checkpoint(trainer.checkpoint()));
  CHECK(mid.meta.epoch == 1);
  CHECK(mid.meta.step == 2);
  CHECK(mid.adam_step == 2);
  CHECK(mid.optimizer.size() == 2 * model.parameters().trainable.size());
}
