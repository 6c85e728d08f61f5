#include <fstream>

#include "doctest.h"
#include "fesnet/checkpoint.hpp"
#include "fesnet/train.hpp"
#include "support/oracles.hpp"

using namespace fesnet;

namespace {

FesNetConfig small_config() {
  FesNetConfig c;
  c.pcb_channels = {8, 16, 32, 64};
  return c;
}

CheckpointError::Kind parse_kind(const std::string& bytes) {
  try {
    parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  FAIL("parse succeeded");
  return CheckpointError::Kind::Io;
}

}  // namespace

TEST_CASE("checkpoint round-trip is bitwise") {
  FesNet<float> model(small_config());
  model.init(21);
  Rng rng(3);
  // Move the batch-norm statistics away from their initial values.
  model.forward(oracle::random_tensor<float>({2, 3, 32, 32}, rng));
  CheckpointMeta meta;
  meta.seed = 0xfedcba9876543210ULL;
  meta.epoch = 7;
  meta.step = 140;
  meta.target_width = 512;
  meta.per_channel_zscore = true;
  const Checkpoint ckpt = make_checkpoint(model, meta);
  const std::string bytes = serialize_checkpoint(ckpt);
  const Checkpoint back = parse_checkpoint(bytes);
  CHECK(back.meta == meta);
  CHECK(back.config == small_config());
  CHECK(serialize_checkpoint(back) == bytes);

  FesNet<float> loaded = model_from_checkpoint(back);
  model.set_mode(Mode::Inference);
  loaded.set_mode(Mode::Inference);
  const auto x = oracle::random_tensor<float>({1, 3, 48, 32}, rng);
  CHECK(model.forward(x) == loaded.forward(x));
}

TEST_CASE("checkpoint file save and read") {
  const auto dir = oracle::scratch_dir("ckpt");
  FesNet<float> model(small_config());
  model.init(1);
  save_checkpoint(make_checkpoint(model, {}), dir / "m.fesnet");
  CHECK_FALSE(std::filesystem::exists(dir / "m.fesnet.tmp"));
  const Checkpoint c = read_checkpoint(dir / "m.fesnet");
  CHECK(c.tensors.size() == make_checkpoint(model, {}).tensors.size());
  CHECK_THROWS_AS(read_checkpoint(dir / "absent.fesnet"), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupted checkpoints are rejected") {
  FesNet<float> model(small_config());
  model.init(2);
  const std::string bytes = serialize_checkpoint(make_checkpoint(model, {}));
  CHECK(parse_kind(bytes.substr(0, bytes.size() - 3)) == CheckpointError::Kind::Truncated);
  CHECK(parse_kind(bytes + "x") == CheckpointError::Kind::Format);
  CHECK(parse_kind("garbage\n") == CheckpointError::Kind::Format);

  std::string v2 = bytes;
  v2.replace(v2.find("format_version 1"), 16, "format_version 2");
  CHECK(parse_kind(v2) == CheckpointError::Kind::Version);
}

TEST_CASE("loading into a differently shaped model names the tensor") {
  FesNet<float> wide;
  wide.init(1);
  const Checkpoint c = make_checkpoint(wide, {});
  FesNet<float> narrow(small_config());
  narrow.init(2);
  const auto before = make_checkpoint(narrow, {}).tensors;
  try {
    load_checkpoint_into(c, narrow);
    FAIL("expected a shape mismatch");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == CheckpointError::Kind::ShapeMismatch);
    CHECK(std::string(e.what()).find("pcb") != std::string::npos);
  }
  const auto after = make_checkpoint(narrow, {}).tensors;
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].value == after[i].value);
}

TEST_CASE("optimizer state survives a round-trip") {
  FesNet<float> model(small_config());
  model.init(3);
  TrainConfig tc;
  tc.crop_size = 32;
  tc.batch_size = 1;
  Trainer trainer(model, tc);
  Rng rng(5);
  Sample s;
  s.image = oracle::random_tensor<float>({1, 3, 32, 32}, rng);
  s.mask = Tensor<float>({1, 1, 32, 32});
  s.mask[100] = 1.0f;
  s.valid = Tensor<float>({1, 1, 32, 32}, 1.0f);
  trainer.step({s}, 1e-3);
  const Checkpoint c = parse_checkpoint(serialize_checkpoint(trainer.checkpoint()));
  CHECK(c.adam_step == 1);
  FesNet<float> other(small_config());
  std::vector<AdamState<float>> adam;
  for (const auto& p : other.parameters().trainable) adam.emplace_back(p.value->shape());
  load_checkpoint_into(c, other, &adam);
  REQUIRE(adam.size() == trainer.optimizer().size());
  for (std::size_t i = 0; i < adam.size(); ++i) {
    CHECK(adam[i].m == trainer.optimizer()[i].m);
    CHECK(adam[i].v == trainer.optimizer()[i].v);
    CHECK(adam[i].t == 1);
  }
}
