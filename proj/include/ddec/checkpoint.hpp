#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "ddec/inference.hpp"
#include "ddec/run_config.hpp"
#include "ddec/training.hpp"

namespace ddec {

/// Progress recorded alongside the weights.
struct TrainingState {
  std::string phase = "pretrain";  // "pretrain" or "sft"
  std::int64_t steps_done = 0;
  std::int64_t total_steps = 0;
  std::int64_t tokens_seen = 0;
  std::int64_t pretrain_tokens = 0;  // tokens of the finished pretraining phase

  friend bool operator==(const TrainingState&, const TrainingState&) = default;
};

struct Checkpoint {
  RunConfig config;
  TrainingState state;
  ModelParams<float> params;
  std::optional<AdamState<float>> optimizer;
};

/// Writes the binary container described in docs/formats.md. Data is written
/// to a temporary sibling first and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws Errc::FileNotFound, Errc::Io, Errc::BadFormat, or
/// Errc::CheckpointMismatch when tensors disagree with the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint checkpoint_from(const Trainer& trainer, const RunConfig& config, TrainingState state);

/// FNV-1a over every parameter's bytes in parameter_list order.
std::uint64_t params_fingerprint(const ModelParams<float>& params);

void save_prefix_cache(const std::filesystem::path& path, const PrefixCache<float>& cache,
                       const Model<float>& model);

/// Throws Errc::PrefixMismatch when the cache was built by other weights.
PrefixCache<float> load_prefix_cache(const std::filesystem::path& path, const Model<float>& model);

}  // namespace ddec
