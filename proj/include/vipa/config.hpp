#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "vipa/model_config.hpp"
#include "vipa/train.hpp"

namespace vipa {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class PrecisionFlag { f32, f64 };

/// Everything a command needs: model shape, training schedule, seed, paths.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PrecisionFlag precision = PrecisionFlag::f32;
  std::size_t eval_threads = 1;
  std::string data;        // dataset directory (holds manifest.tsv)
  std::string checkpoint;  // checkpoint path
  std::string log;         // training log CSV

  /// Sets one `key = value` pair. Throws ConfigError for unknown keys and
  /// malformed or out-of-range values.
  void set(const std::string& key, const std::string& value);
  /// Rejects inconsistent combinations.
  void validate() const;
  /// Canonical `key = value` listing that parse_run_config reads back.
  std::string to_text() const;
};

/// Parses `key = value` lines; `#` starts a comment. Later keys win.
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

/// Applies VIPA_SEED from the environment, if set.
void apply_seed_env(RunConfig& cfg);

}  // namespace vipa
