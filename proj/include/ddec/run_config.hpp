#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "ddec/config.hpp"

namespace ddec {

struct DataConfig {
  std::string corpus;
  std::string tokenizer = "byte";
  Index seq_len = 2048;
  double holdout_fraction = 0.05;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct IoConfig {
  std::string checkpoint_dir = "checkpoints";
  std::string metrics_path = "metrics.jsonl";

  friend bool operator==(const IoConfig&, const IoConfig&) = default;
};

/// Everything a run needs, serialized as JSON with sections model, train,
/// data and io. The seed is train.seed.
struct RunConfig {
  std::string command = "train";
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  IoConfig io;

  /// Cross-field checks on top of the per-section ones.
  void validate() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

std::string to_json(const RunConfig& cfg, int indent = 2);

/// Missing keys keep their defaults; unknown keys and wrongly typed values
/// throw Errc::InvalidConfig.
RunConfig run_config_from_json(std::string_view text);

/// Reads a config file. Throws Errc::FileNotFound or Errc::Io.
RunConfig load_run_config(const std::string& path);

/// Applies "section.key=value" assignments; the value is read as JSON when it
/// parses and as a string otherwise.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);

/// SEED replaces train.seed; METRICS_DIR relocates io.metrics_path into that
/// directory.
void apply_environment(RunConfig& cfg);

}  // namespace ddec
