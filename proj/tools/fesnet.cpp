// fesnet command-line tool: train, evaluate, predict, gradcheck, params.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "fesnet/checkpoint.hpp"
#include "fesnet/eval.hpp"
#include "fesnet/gradcheck.hpp"
#include "fesnet/settings.hpp"
#include "fesnet/train.hpp"

namespace fs = std::filesystem;
using namespace fesnet;

namespace {

struct Overrides {
  std::map<std::string, std::string> values;
  std::string config;
};

std::string flag_name(const std::string& key) {
  std::string f = key;
  for (auto& c : f) {
    if (c == '_') c = '-';
  }
  return "--" + f;
}

/// One string option per setting; only the ones given on the command line
/// override the config file.
void add_setting_options(CLI::App* cmd, const std::vector<SettingSpec>& specs,
                         Overrides& o) {
  cmd->add_option("--config", o.config, "key=value config file");
  for (const auto& s : specs) {
    cmd->add_option_function<std::string>(
        flag_name(s.key), [&o, key = s.key](const std::string& v) { o.values[key] = v; },
        s.help + " (default: " + (s.default_value.empty() ? "none" : s.default_value) + ")");
  }
}

Settings resolve(const std::vector<SettingSpec>& specs, const Overrides& o) {
  Settings s(specs);
  if (!o.config.empty()) s.load_file(o.config);
  for (const auto& [k, v] : o.values) s.set(k, v);
  return s;
}

/// Refuses to reuse a non-empty output directory unless forced; with
/// --force only the files listed in `owned` (plus overlays) are removed.
void prepare_out_dir(const fs::path& out, bool force,
                     const std::vector<std::string>& owned) {
  if (fs::exists(out) && !fs::is_directory(out)) {
    throw Error(out.string() + " exists and is not a directory");
  }
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) {
      throw Error("output directory " + out.string() +
                  " is not empty; pass --force to overwrite");
    }
    for (const auto& name : owned) fs::remove(out / name);
    for (const auto& e : fs::directory_iterator(out)) {
      if (e.path().filename().string().ends_with("_overlay.png")) fs::remove(e.path());
    }
  }
  fs::create_directories(out);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

int cmd_train(const Overrides& o, const fs::path& out, bool force) {
  const Settings s = resolve(train_settings(), o);
  const FesNetConfig mc = model_config_from(s);
  const TrainConfig tc = train_config_from(s);
  const DatasetSpec ds = dataset_spec_from(s);
  // Validate the dataset before touching the output directory.
  std::vector<DatasetEntry> entries = list_dataset(ds);
  std::vector<Sample> train;
  for (const auto& e : entries) {
    if (e.split == Split::Train) train.push_back(preprocess(load_sample(e), tc.preprocess));
  }
  if (train.empty()) throw Error("dataset has no training images");

  prepare_out_dir(out, force,
                  {"config.txt", "train_log.jsonl", "timing.jsonl", "checkpoint.fesnet"});
  write_text(out / "config.txt", s.echo());

  FesNet<float> model(mc);
  model.init(tc.seed);
  Trainer trainer(model, tc);
  TrainOutputs outputs;
  outputs.dir = out;
  outputs.on_step = [](const StepRecord& r) {
    std::printf("epoch %lld step %lld lr %.6g loss %.6f\n", static_cast<long long>(r.epoch),
                static_cast<long long>(r.step), r.lr, r.loss);
    std::fflush(stdout);
  };
  try {
    trainer.fit(train, outputs);
  } catch (const TrainingAborted& e) {
    std::fprintf(stderr, "error: %s; last good checkpoint kept in %s\n", e.what(),
                 out.string().c_str());
    return 3;
  }
  std::printf("wrote %s\n", (out / "checkpoint.fesnet").string().c_str());
  return 0;
}

int cmd_evaluate(const Overrides& o, const fs::path& checkpoint, const fs::path& out,
                 bool force) {
  const Settings s = resolve(evaluate_settings(), o);
  const DatasetSpec ds = dataset_spec_from(s);
  const Split split = parse_split(s.get("split"));
  EvalOptions opts;
  opts.aggregation = parse_aggregation(s.get("aggregation"));
  opts.use_roi = s.get_bool("use_roi");

  const Checkpoint ckpt = read_checkpoint(checkpoint);
  FesNet<float> model = model_from_checkpoint(ckpt);
  std::vector<Sample> samples;
  for (const auto& e : list_dataset(ds)) {
    if (e.split == split) samples.push_back(load_sample(e));
  }
  if (samples.empty()) throw Error("split " + to_string(split) + " is empty");

  prepare_out_dir(out, force, {"config.txt", "metrics.txt", "metrics.kv"});
  write_text(out / "config.txt", s.echo() + "checkpoint=" + checkpoint.string() + "\n");
  opts.overlay_dir = out;
  PreprocessConfig pc;
  pc.target_width = static_cast<std::size_t>(ckpt.meta.target_width);
  pc.per_channel_zscore = ckpt.meta.per_channel_zscore;
  const EvalResult r = evaluate(model_predictor(model, pc), samples, opts);
  const std::string table =
      format_metric_table({{to_string(ds.kind) + "/" + to_string(split), r.report}});
  write_text(out / "metrics.txt", table);
  write_text(out / "metrics.kv", format_eval_kv(r));
  std::cout << table;
  return 0;
}

int cmd_predict(const fs::path& checkpoint, const fs::path& image, const fs::path& out,
                bool force) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  FesNet<float> model = model_from_checkpoint(ckpt);
  const Image8 img = read_image(image);
  Sample raw;
  raw.id = image.stem().string();
  raw.image = image_to_tensor(img);
  if (img.channels == 1) {
    Tensor<float> rgb({1, 3, img.height, img.width});
    for (std::size_t c = 0; c < 3; ++c) {
      std::copy(raw.image.ptr(), raw.image.ptr() + raw.image.size(), rgb.plane_ptr(0, c));
    }
    raw.image = std::move(rgb);
  }
  raw.mask = Tensor<float>({1, 1, img.height, img.width});
  raw.valid = Tensor<float>({1, 1, img.height, img.width}, 1.0f);
  raw.source_height = raw.content_height = img.height;
  raw.source_width = raw.content_width = img.width;

  const fs::path mask_path = out / (raw.id + "_mask.png");
  const fs::path prob_path = out / (raw.id + "_prob.npy");
  fs::create_directories(out);
  if (!force && (fs::exists(mask_path) || fs::exists(prob_path))) {
    throw Error("prediction outputs for " + raw.id + " already exist in " + out.string() +
                "; pass --force to overwrite");
  }
  PreprocessConfig pc;
  pc.target_width = static_cast<std::size_t>(ckpt.meta.target_width);
  pc.per_channel_zscore = ckpt.meta.per_channel_zscore;
  const Tensor<float> probs = predict_probabilities(model, raw, pc);
  write_png(mask_path, mask_to_image(argmax_mask(probs)));
  write_npy(prob_path, probs);
  std::printf("wrote %s and %s (%zux%zu)\n", mask_path.string().c_str(),
              prob_path.string().c_str(), img.width, img.height);
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  bool ok = true;
  std::printf("%-28s %12s %10s %8s %s\n", "case", "max rel err", "tolerance", "coords",
              "status");
  for (const auto& c : run_gradcheck_suite(seed)) {
    std::printf("%-28s %12.3e %10.0e %8zu %s\n", c.name.c_str(),
                c.result.max_relative_error, c.tolerance, c.result.coordinates,
                c.passed() ? "ok" : "FAIL");
    if (c.result.structural_zero_coordinates > 0) {
      std::printf("%-28s %12.3e %10.0e %8zu (zero-gradient biases, absolute)\n", "",
                  c.result.structural_zero_max_abs, kStructuralZeroBound,
                  c.result.structural_zero_coordinates);
    }
    ok = ok && c.passed();
  }
  std::printf("%s\n", ok ? "all gradient checks passed" : "gradient check FAILED");
  return ok ? 0 : 1;
}

int cmd_params(const Overrides& o) {
  const Settings s = resolve(model_settings(), o);
  FesNet<float> model(model_config_from(s));
  const ParameterReport r = count_parameters(model);
  std::printf("%-40s %10s\n", "layer", "params");
  for (const auto& row : r.per_layer()) {
    if (row.trainable) std::printf("%-40s %10zu\n", row.name.c_str(), row.count);
  }
  const std::size_t bytes = serialize_checkpoint(make_checkpoint(model, {})).size();
  std::printf("total trainable: %zu (%.3f M)\n", r.trainable,
              static_cast<double>(r.trainable) / 1e6);
  std::printf("batch-norm running statistics: %zu\n", r.buffers);
  std::printf("float32 checkpoint: %zu bytes (%.2f MB)\n", bytes,
              static_cast<double>(bytes) / 1e6);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FES-Net retinal vessel segmentation"};
  app.require_subcommand(1);
  bool force = false;
  std::string out, checkpoint, image;
  std::uint64_t gc_seed = 1;

  Overrides train_o, eval_o, params_o;
  auto* train = app.add_subcommand("train", "train a model on a dataset's train split");
  add_setting_options(train, train_settings(), train_o);
  train->add_option("--out", out, "output directory")->required();
  train->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* evaluate = app.add_subcommand("evaluate", "metrics and overlays for one split");
  add_setting_options(evaluate, evaluate_settings(), eval_o);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evaluate->add_option("--out", out, "output directory")->required();
  evaluate->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* predict = app.add_subcommand("predict", "segment one image");
  predict->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  predict->add_option("image", image, "PNG/PPM/PGM image")->required();
  predict->add_option("--out", out, "output directory")->default_val(".");
  predict->add_flag("--force", force, "overwrite existing outputs");

  auto* gradcheck = app.add_subcommand("gradcheck", "64-bit finite-difference suite");
  gradcheck->add_option("--seed", gc_seed, "seed for inputs and sampling")
      ->capture_default_str();

  auto* params = app.add_subcommand("params", "per-layer parameter counts");
  add_setting_options(params, model_settings(), params_o);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(train_o, out, force);
    if (*evaluate) return cmd_evaluate(eval_o, checkpoint, out, force);
    if (*predict) return cmd_predict(checkpoint, image, out, force);
    if (*gradcheck) return cmd_gradcheck(gc_seed);
    if (*params) return cmd_params(params_o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
