#pragma once

// Run configuration for the command-line pipeline. Files hold `key = value`
// lines with dotted keys; `#` starts a comment. `preset = desk|paper` picks
// the starting point and is applied before any other key regardless of its
// position. Unknown keys and bad values are rejected with their line number.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "muse/fusion.hpp"
#include "muse/muse_global.hpp"
#include "muse/muse_local.hpp"
#include "muse/simgen.hpp"
#include "muse/training.hpp"

namespace muse {

struct RunConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 42;
  int threads = 0;  // 0 = machine parallelism
  std::string preset = "desk";

  SimConfig sim;
  double blend_fraction = 0.1;
  double test_fraction = 0.1;

  LocalConfig local;
  GlobalConfig global;
  TrainConfig train_local;   // also carries the adversarial settings
  TrainConfig train_global;
  FusionOptions fusion;
  std::string blend_local = "local";  // local checkpoint family fused by blend/evaluate

  static RunConfig preset_config(const std::string& name);
  // Resolves threads = 0 and pushes seed/threads into the module configs.
  RunConfig resolved() const;
  void validate() const;
};

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<ConfigKey>& config_keys();

// Throws Config naming the key when it is unknown or the value does not parse.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

// One "key = value  # help" line per key, using the given config's values.
std::string describe_config(const RunConfig& config);

}  // namespace muse
