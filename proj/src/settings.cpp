#include "fesnet/settings.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace fesnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <std::size_t N>
std::array<int, N> int_list(const Settings& s, const std::string& key) {
  const std::string& text = s.get(key);
  std::array<int, N> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    int v = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (i >= N || ec != std::errc() || ptr != item.data() + item.size()) {
      i = N + 1;
      break;
    }
    out[i++] = v;
  }
  if (i != N) {
    throw SettingsError(key + " expects " + std::to_string(N) +
                        " comma-separated integers, got '" + text + "'");
  }
  return out;
}

std::vector<SettingSpec> concat(std::initializer_list<std::vector<SettingSpec>> parts) {
  std::vector<SettingSpec> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

const std::vector<SettingSpec>& dataset_settings() {
  static const std::vector<SettingSpec> specs = {
      {"dataset", "drive", "dataset kind: drive|stare|chase|hrf"},
      {"root", "", "dataset root (images/, masks/, optional roi/)"},
      {"mask_dir", "masks", "ground-truth subdirectory of the root"},
      {"hrf_train_per_category", "10", "HRF images per category used for training"},
  };
  return specs;
}

}  // namespace

const std::vector<SettingSpec>& model_settings() {
  static const std::vector<SettingSpec> specs = {
      {"stem_channels", "16", "stem convolution width"},
      {"channels", "16,32,64,128", "PCB output widths"},
      {"head_channels", "32,16", "transposed-conv head widths"},
      {"feb_channels", "8,16,16,16", "FEB layer widths (each <= 16)"},
      {"fuse_channels", "16", "fusion convolution width"},
      {"wiring", "sequential", "PCB branch wiring: sequential|parallel"},
      {"dilation", "1", "dilation of the stride-2 PCB downsampling conv"},
  };
  return specs;
}

const std::vector<SettingSpec>& train_settings() {
  static const std::vector<SettingSpec> specs = concat(
      {dataset_settings(),
       model_settings(),
       {
           {"seed", "0", "global seed"},
           {"epochs", "150", "training epochs"},
           {"batch", "4", "crops per step"},
           {"crop", "320", "square crop size (multiple of 16)"},
           {"width", "640", "resize width before padding"},
           {"lr", "2e-05", "initial learning rate"},
           {"lr_decay", "0.9", "learning-rate decay per epoch"},
           {"steps_per_epoch", "0", "0 = one pass over the train split"},
           {"checkpoint_every", "1", "epochs between checkpoints"},
           {"augment", "true", "contrast/brightness/flip/rotation augmentation"},
           {"per_channel_zscore", "false", "z-score each channel separately"},
       }});
  return specs;
}

const std::vector<SettingSpec>& evaluate_settings() {
  static const std::vector<SettingSpec> specs = concat(
      {dataset_settings(),
       {
           {"split", "test", "split to evaluate: train|test"},
           {"aggregation", "global", "global|per-image-mean"},
           {"use_roi", "true", "restrict metrics to the ROI mask when present"},
       }});
  return specs;
}

Settings::Settings(const std::vector<SettingSpec>& specs) : specs_(specs) {
  for (const auto& s : specs_) values_[s.key] = s.default_value;
}

void Settings::set(const std::string& key, const std::string& value) {
  if (!values_.contains(key)) throw SettingsError("unknown setting '" + key + "'");
  values_[key] = value;
}

void Settings::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SettingsError("cannot read config file " + path.string());
  std::map<std::string, int> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw SettingsError(path.string() + ":" + std::to_string(lineno) +
                          ": expected key=value");
    }
    const std::string key = trim(t.substr(0, eq));
    if (seen[key]++) {
      throw SettingsError(path.string() + ":" + std::to_string(lineno) +
                          ": duplicate key '" + key + "'");
    }
    try {
      set(key, trim(t.substr(eq + 1)));
    } catch (const SettingsError& e) {
      throw SettingsError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

const std::string& Settings::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw SettingsError("unknown setting '" + key + "'");
  return it->second;
}

std::int64_t Settings::get_int(const std::string& key) const {
  const std::string& v = get(key);
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw SettingsError(key + " expects an integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t Settings::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw SettingsError(key + " expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double Settings::get_double(const std::string& key) const {
  const std::string& v = get(key);
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw SettingsError(key + " expects a number, got '" + v + "'");
  }
  return out;
}

bool Settings::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw SettingsError(key + " expects true or false, got '" + v + "'");
}

std::string Settings::echo() const {
  std::string out;
  for (const auto& s : specs_) out += s.key + "=" + values_.at(s.key) + "\n";
  return out;
}

FesNetConfig model_config_from(const Settings& s) {
  FesNetConfig c;
  c.stem_channels = static_cast<int>(s.get_int("stem_channels"));
  c.pcb_channels = int_list<4>(s, "channels");
  c.head_channels = int_list<2>(s, "head_channels");
  c.feb_channels = int_list<4>(s, "feb_channels");
  c.fuse_channels = static_cast<int>(s.get_int("fuse_channels"));
  c.down_dilation = static_cast<int>(s.get_int("dilation"));
  try {
    c.wiring = parse_pcb_wiring(s.get("wiring"));
    c.validate();
  } catch (const SettingsError&) {
    throw;
  } catch (const Error& e) {
    throw SettingsError(e.what());
  }
  return c;
}

TrainConfig train_config_from(const Settings& s) {
  TrainConfig c;
  auto positive = [&](const std::string& key) {
    const std::int64_t v = s.get_int(key);
    if (v <= 0) throw SettingsError(key + " must be positive");
    return v;
  };
  c.seed = s.get_u64("seed");
  c.epochs = positive("epochs");
  c.batch_size = static_cast<std::size_t>(positive("batch"));
  c.crop_size = static_cast<std::size_t>(positive("crop"));
  c.preprocess.target_width = static_cast<std::size_t>(positive("width"));
  c.preprocess.per_channel_zscore = s.get_bool("per_channel_zscore");
  c.lr0 = s.get_double("lr");
  c.lr_decay = s.get_double("lr_decay");
  if (!(c.lr0 > 0.0)) throw SettingsError("lr must be positive");
  if (!(c.lr_decay > 0.0)) throw SettingsError("lr_decay must be positive");
  c.steps_per_epoch = s.get_int("steps_per_epoch");
  if (c.steps_per_epoch < 0) throw SettingsError("steps_per_epoch must be >= 0");
  c.checkpoint_every = s.get_int("checkpoint_every");
  if (c.checkpoint_every < 0) throw SettingsError("checkpoint_every must be >= 0");
  c.augment = s.get_bool("augment");
  if (c.crop_size % FesNetConfig::kDownsampleFactor != 0) {
    throw SettingsError("crop must be a multiple of " +
                        std::to_string(FesNetConfig::kDownsampleFactor));
  }
  return c;
}

DatasetSpec dataset_spec_from(const Settings& s) {
  DatasetSpec d;
  try {
    d.kind = parse_dataset_kind(s.get("dataset"));
  } catch (const Error& e) {
    throw SettingsError(e.what());
  }
  if (s.get("root").empty()) throw SettingsError("root is required");
  d.root = s.get("root");
  d.mask_dir = s.get("mask_dir");
  const std::int64_t per = s.get_int("hrf_train_per_category");
  if (per < 0 || per > 15) {
    throw SettingsError("hrf_train_per_category must be between 0 and 15");
  }
  d.hrf_train_per_category = static_cast<std::size_t>(per);
  return d;
}

}  // namespace fesnet
