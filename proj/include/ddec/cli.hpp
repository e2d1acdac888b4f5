#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ddec/checkpoint.hpp"
#include "ddec/costmodel.hpp"
#include "ddec/inference.hpp"
#include "ddec/run_config.hpp"
#include "ddec/training.hpp"

namespace ddec {

struct PreparedData {
  std::vector<Tokens> train;
  std::vector<Tokens> holdout;
};

/// Loads, splits and packs the configured corpus.
PreparedData prepare_data(const RunConfig& cfg);

/// Newline-delimited metrics. Every record is a deterministic function of the
/// run; wall-clock figures go to a "<path>.timing.jsonl" sidecar.
class MetricsLog {
 public:
  /// Truncates the log, or when keep_steps >= 0 keeps its first keep_steps
  /// records (resuming).
  MetricsLog(std::filesystem::path path, std::int64_t keep_steps = -1);
  void record(std::string_view phase, const StepMetrics& m);
  const std::filesystem::path& path() const noexcept { return path_; }
  static std::filesystem::path timing_path(const std::filesystem::path& metrics);

 private:
  std::filesystem::path path_;
};

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::optional<std::filesystem::path> checkpoint_out;  // default io.checkpoint_dir/pretrain.ckpt
  std::int64_t stop_after = -1;
  bool write_metrics = true;
};

struct TrainResult {
  RunSummary summary;
  std::int64_t total_steps = 0;
  std::int64_t tokens_seen = 0;
  std::filesystem::path checkpoint;
};

TrainResult cmd_train(const RunConfig& cfg, const TrainOptions& opt, std::ostream& out);

struct SftOptions {
  std::filesystem::path checkpoint;
  std::optional<RunConfig> config;  // must match the checkpoint's model section
  std::optional<std::filesystem::path> checkpoint_out;  // default io.checkpoint_dir/sft.ckpt
  std::int64_t stop_after = -1;
  Index max_eval_sequences = 256;
  bool write_metrics = true;
};

struct SftResult {
  RunSummary summary;
  std::int64_t total_steps = 0;
  std::int64_t budget_tokens = 0;
  double eval_loss = 0.0;
  std::filesystem::path checkpoint;
};

SftResult cmd_sft(const SftOptions& opt, std::ostream& out);

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::optional<std::string> corpus;  // defaults to the checkpoint's corpus
  Index max_sequences = 256;          // per split; 0 means all
};

struct EvalResult {
  double train_loss = 0.0;
  double holdout_loss = 0.0;
  Index train_sequences = 0;
  Index holdout_sequences = 0;
};

EvalResult cmd_eval(const EvalOptions& opt, std::ostream& out);

struct GenerateOptions {
  std::filesystem::path checkpoint;
  std::string prompt;
  Index max_new = 64;
  SamplerSpec sampler;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> prefix_cache;  // loaded when present, written otherwise
  Index bytes_per_value = 2;
};

GenerationReport cmd_generate(const GenerateOptions& opt, std::ostream& out);

enum class CostFormat { Table, Json };

void cmd_cost(const CostInputs& in, CostFormat format, std::ostream& out);

/// One CSV row per (arch, T, d, L). Stacked models split L as L_dec = L/3,
/// L_enc = L - L_dec; T_in = T.
void cmd_cost_sweep(const std::vector<CostArch>& archs, const std::vector<Index>& Ts,
                    const std::vector<Index>& ds, const std::vector<Index>& Ls, Index T_out, Index b,
                    std::ostream& out);

struct SweepOptions {
  std::vector<double> lrs;
  std::vector<Index> widths;
  Index max_eval_sequences = 64;
};

struct SweepRow {
  Index width = 0;
  double lr = 0.0;
  std::int64_t steps = 0;
  double final_train_loss = 0.0;  // mean over the last tenth of the steps
  double holdout_loss = 0.0;      // prefix-LM eval on the holdout split
};

/// Trains one model per (width, lr) and writes a CSV. Throws Errc::EmptyGrid.
std::vector<SweepRow> cmd_sweep_lr(const RunConfig& cfg, const SweepOptions& opt, std::ostream& csv);

/// Lowest-holdout-loss lr for each width, in width order.
std::vector<std::pair<Index, double>> sweep_argmin(const std::vector<SweepRow>& rows);

}  // namespace ddec
