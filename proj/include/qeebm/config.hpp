#pragma once

// Flat key=value run configuration.
//
//   # comment
//   algorithm = qe-static
//   task.pool_size = 2000
//
// Unknown keys, repeated keys and unparsable values are rejected with the offending key.

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "qeebm/data.hpp"
#include "qeebm/training.hpp"

namespace qeebm {

struct RunConfig {
  TaskSpec task;
  TrainerConfig trainer;
  PretrainConfig pretrain;
  std::filesystem::path out_dir = "runs/run";
  std::string run_id = "run";
  /// Seeds per ablation cell: seed, seed + 1, ...
  int ablate_seeds = 3;
  /// Worker threads for the ablation grid.
  int jobs = 1;
};

struct ConfigError : std::invalid_argument {
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(key.empty() ? what : key + ": " + what), key(std::move(key)) {}
  std::string key;
};

struct ConfigKey {
  std::string name;
  std::string doc;
};

/// Every accepted key, in documentation order.
const std::vector<ConfigKey>& config_keys();

/// Sets one key. `seed` drives the task, trainer and pretraining seeds together; `task.vocab`
/// also sets the model vocabulary.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
/// The current value of a key, formatted so that apply_setting reads it back unchanged.
std::string get_setting(const RunConfig& cfg, const std::string& key);

RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::filesystem::path& path);
/// Checks cross-field constraints; throws ConfigError naming a key.
void validate(const RunConfig& cfg);

/// All keys with their current values and docs, in the file format.
std::string render_config(const RunConfig& cfg);

}  // namespace qeebm
