#pragma once

// Flat key=value run settings shared by the CLI and the Python bindings.
// Precedence: built-in defaults < config file < explicit overrides.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fesnet/data.hpp"
#include "fesnet/model.hpp"
#include "fesnet/train.hpp"

namespace fesnet {

class SettingsError : public Error {
 public:
  using Error::Error;
};

struct SettingSpec {
  std::string key;
  std::string default_value;
  std::string help;
};

/// Keys understood by each command, in echo order.
const std::vector<SettingSpec>& model_settings();
const std::vector<SettingSpec>& train_settings();
const std::vector<SettingSpec>& evaluate_settings();

class Settings {
 public:
  explicit Settings(const std::vector<SettingSpec>& specs);

  /// Reads '#' comments, blank lines and key=value lines. Unknown keys and
  /// duplicates are errors.
  void load_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return values_.contains(key); }

  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  /// Every key in spec order; loading it back reproduces these settings.
  std::string echo() const;

 private:
  std::vector<SettingSpec> specs_;
  std::map<std::string, std::string> values_;
};

FesNetConfig model_config_from(const Settings& s);
TrainConfig train_config_from(const Settings& s);
DatasetSpec dataset_spec_from(const Settings& s);

}  // namespace fesnet
