#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "fesnet/checkpoint.hpp"
#include "fesnet/image_io.hpp"
#include "fesnet/settings.hpp"
#include "fesnet/synthetic.hpp"
#include "support/oracles.hpp"

using namespace fesnet;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string output;
};

Run run(const std::string& args) {
  const auto log = fs::temp_directory_path() / ("fesnet_cli_" + std::to_string(::getpid()));
  const std::string cmd = std::string(FESNET_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  fs::remove(log);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kSmallModel = " --channels 8,16,32,64";

}  // namespace

TEST_CASE("settings: defaults, file, overrides and errors") {
  const auto dir = oracle::scratch_dir("settings");
  Settings s(train_settings());
  CHECK(s.get("lr") == "2e-05");
  CHECK(s.get_double("lr_decay") == 0.9);
  CHECK(s.get_int("crop") == 320);
  {
    std::ofstream f(dir / "a.cfg");
    f << "# comment\nepochs = 3\nseed=99\n\nchannels=8,16,32,64\n";
  }
  s.load_file(dir / "a.cfg");
  CHECK(s.get_int("epochs") == 3);
  CHECK(s.get_u64("seed") == 99);
  CHECK(model_config_from(s).pcb_channels[3] == 64);
  s.set("seed", "5");
  CHECK(s.echo().find("seed=5\n") != std::string::npos);

  Settings echoed(train_settings());
  {
    std::ofstream f(dir / "echo.cfg");
    f << s.echo();
  }
  echoed.load_file(dir / "echo.cfg");
  CHECK(echoed.echo() == s.echo());

  {
    std::ofstream f(dir / "bad.cfg");
    f << "epochz=3\n";
  }
  CHECK_THROWS_AS(Settings(train_settings()).load_file(dir / "bad.cfg"), SettingsError);
  {
    std::ofstream f(dir / "dup.cfg");
    f << "epochs=3\nepochs=4\n";
  }
  CHECK_THROWS_AS(Settings(train_settings()).load_file(dir / "dup.cfg"), SettingsError);
  Settings t(train_settings());
  t.set("crop", "100");
  CHECK_THROWS_AS(train_config_from(t), SettingsError);
  t.set("crop", "96");
  t.set("channels", "8,16,32");
  CHECK_THROWS_AS(model_config_from(t), SettingsError);
  CHECK_THROWS_AS(dataset_spec_from(t), SettingsError);
  CHECK_THROWS_AS(t.get_bool("lr"), SettingsError);
  fs::remove_all(dir);
}

TEST_CASE("cli: params reports the budget") {
  const Run r = run("params");
  CHECK(r.status == 0);
  CHECK(r.output.find("total trainable: 821514") != std::string::npos);
  CHECK(r.output.find("3300623 bytes") != std::string::npos);
  CHECK(run("params --channels 1,2").status != 0);
}

TEST_CASE("cli: train, evaluate, predict") {
  const auto root = oracle::scratch_dir("cli");
  write_synthetic_dataset(root / "data", DatasetKind::Drive, 40, 36, 3);
  const std::string common = " --dataset drive --root " + (root / "data").string() +
                             kSmallModel +
                             " --epochs 2 --batch 2 --crop 32 --width 48 --steps-per-epoch 2"
                             " --seed 7";

  Run t = run("train" + common + " --out " + (root / "a").string());
  INFO(t.output);
  REQUIRE(t.status == 0);
  for (const char* f : {"config.txt", "train_log.jsonl", "timing.jsonl", "checkpoint.fesnet"}) {
    CHECK(fs::exists(root / "a" / f));
  }
  CHECK(run("train" + common + " --out " + (root / "a").string()).status == 1);
  REQUIRE(run("train --config " + (root / "a" / "config.txt").string() + " --out " +
              (root / "b").string())
              .status == 0);
  CHECK(slurp(root / "a" / "train_log.jsonl") == slurp(root / "b" / "train_log.jsonl"));
  CHECK(slurp(root / "a" / "checkpoint.fesnet") == slurp(root / "b" / "checkpoint.fesnet"));
  CHECK(run("train" + common + " --out " + (root / "a").string() + " --force").status == 0);
  CHECK(slurp(root / "a" / "checkpoint.fesnet") == slurp(root / "b" / "checkpoint.fesnet"));

  const Run missing = run("train --dataset drive --root " + (root / "none").string() +
                          " --out " + (root / "c").string());
  CHECK(missing.status == 1);
  CHECK(missing.output.find("error:") != std::string::npos);
  CHECK_FALSE(fs::exists(root / "c"));

  const std::string ckpt = (root / "a" / "checkpoint.fesnet").string();
  const Run e = run("evaluate --dataset drive --root " + (root / "data").string() +
                    " --checkpoint " + ckpt + " --out " + (root / "eval").string());
  INFO(e.output);
  REQUIRE(e.status == 0);
  CHECK(fs::exists(root / "eval" / "metrics.txt"));
  CHECK(fs::exists(root / "eval" / "01_test_overlay.png"));
  CHECK_FALSE(fs::exists(root / "eval" / "21_training_overlay.png"));
  const std::string kv = slurp(root / "eval" / "metrics.kv");
  CHECK(kv.find("f1=") != std::string::npos);
  const Run e2 = run("evaluate --dataset drive --root " + (root / "data").string() +
                     " --checkpoint " + ckpt + " --out " + (root / "eval2").string());
  CHECK(e2.status == 0);
  CHECK(slurp(root / "eval2" / "metrics.kv") == kv);
  CHECK(run("evaluate --dataset drive --root " + (root / "data").string() + " --checkpoint " +
            (root / "nope.fesnet").string() + " --out " + (root / "eval3").string())
            .status == 1);

  const Run p = run("predict --checkpoint " + ckpt + " " +
                    (root / "data" / "images" / "05_test.png").string() + " --out " +
                    (root / "pred").string());
  INFO(p.output);
  REQUIRE(p.status == 0);
  const Image8 mask = read_image(root / "pred" / "05_test_mask.png");
  CHECK(mask.width == 36);
  CHECK(mask.height == 40);
  for (auto v : mask.pixels) CHECK((v == 0 || v == 255));
  CHECK(fs::file_size(root / "pred" / "05_test_prob.npy") == 128 + 2 * 40 * 36 * 4);
  fs::remove_all(root);
}

TEST_CASE("cli: usage errors exit nonzero") {
  CHECK(run("").status != 0);
  CHECK(run("frobnicate").status != 0);
  CHECK(run("train --epochs 2").status != 0);
}
