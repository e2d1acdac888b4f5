#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ddec/config.hpp"
#include "ddec/model.hpp"
#include "ddec/partition.hpp"

namespace ddec {

using LossMask = std::vector<std::uint8_t>;

/// A batch of equal-length sequences. loss_mask[b][t] marks logits row t
/// (predicting token t+1) as supervised. Pretraining batches of the double
/// decoder carry one partition shared by every row; prefix-LM batches carry a
/// breakpoint instead.
struct Batch {
  std::vector<Tokens> tokens;
  std::optional<BlockPartition> partition;
  std::optional<Index> breakpoint;
  std::vector<LossMask> loss_mask;

  Index seq_len() const { return tokens.empty() ? 0 : static_cast<Index>(tokens.front().size()); }
  Index supervised_targets() const;
  /// Partition the generation decoder runs under: the sampled one, (0, b, T)
  /// for a breakpoint, else the single block (0, T).
  BlockPartition effective_partition() const;
};

template <typename Scalar>
struct CrossEntropy {
  double sum = 0.0;  // summed nats over supervised rows
  Index count = 0;
  Matrix<Scalar> d_logits;  // d(sum * grad_scale) / d logits
};

/// Row t of `logits` predicts targets[t]; rows with mask 0 are skipped.
template <typename Scalar>
CrossEntropy<Scalar> cross_entropy(const Matrix<Scalar>& logits, std::span<const TokenId> targets,
                                   std::span<const std::uint8_t> mask, double grad_scale);

/// Mean next-token cross entropy (natural log) over supervised rows of one
/// sequence; logits row t predicts tokens[t+1]. Throws Errc::EmptyMask.
template <typename Scalar>
double lm_loss(const Matrix<Scalar>& logits, const Tokens& tokens, const LossMask& loss_mask);

/// All next-token positions 0..T-2, whatever the partition.
LossMask pretrain_loss_mask(Index seq_len);

/// Rows b-1..T-2, i.e. the targets b..T-1 of the suffix.
LossMask suffix_loss_mask(Index breakpoint, Index seq_len);

struct PrefixBounds {
  Index min_prefix = 16;
  Index min_suffix = 16;
};

/// Breakpoints available to the collator: [min_prefix, T - min_suffix]
/// clipped to [1, T-1].
std::pair<Index, Index> breakpoint_range(Index seq_len, const PrefixBounds& bounds);

/// Samples one breakpoint for the whole batch. Identical for both
/// architectures: the double decoder reads it as the partition (0, b, T), the
/// decoder-only model runs causally and supervises the suffix only.
Batch prefix_lm_collate(std::mt19937_64& rng, std::vector<Tokens> tokens, const PrefixBounds& bounds);

/// Fixed evaluation breakpoints T/4, T/2, 3T/4, clipped into breakpoint_range.
std::vector<Index> eval_breakpoints(Index seq_len, const PrefixBounds& bounds);

struct ParamGroup {
  std::string name;
  std::vector<std::size_t> members;  // indices into parameter_list order
  double lr = 0.0;
  double weight_decay = 0.0;
};

/// Hidden matrices: base_lr * d0 / d with weight decay. Embedding (also the
/// output projection): base_lr with weight decay. Norm gains and all biases:
/// base_lr without weight decay. Throws Errc::UnclassifiedParameter.
std::vector<ParamGroup> mup_param_groups(const ModelConfig& cfg, const std::vector<std::string>& names,
                                         double base_lr, double weight_decay);

/// Linear warmup 0 -> 1 over warmup_frac of the steps, then linear decay to
/// final_lr_frac at total_steps.
double lr_schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& tc);

template <typename Scalar>
struct AdamState {
  ModelParams<Scalar> m;
  ModelParams<Scalar> v;
  std::int64_t t = 0;
};

/// Decoupled-weight-decay Adam step over every group.
template <typename Scalar>
void adamw_update(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads,
                  AdamState<Scalar>& state, const std::vector<ParamGroup>& groups,
                  double lr_multiplier, const TrainConfig& tc);

/// Scales the gradients so their global L2 norm is at most max_norm and
/// returns the norm before scaling.
template <typename Scalar>
double clip_global_norm(ModelParams<Scalar>& grads, double max_norm);

template <typename Scalar>
double global_norm(const ModelParams<Scalar>& grads);

/// Mean loss and its gradient over a batch; gradients accumulate into grads.
template <typename Scalar>
double batch_loss_and_grad(const Model<Scalar>& model, const Batch& batch, ModelParams<Scalar>& grads);

template <typename Scalar>
double batch_loss(const Model<Scalar>& model, const Batch& batch);

enum class Phase { Pretrain, Sft };

struct StepMetrics {
  std::int64_t step = 0;  // 1-based count of completed updates
  std::int64_t tokens_seen = 0;
  double loss = 0.0;
  double lr = 0.0;           // hidden-group learning rate actually applied
  double grad_norm = 0.0;    // before clipping
  double clipped_norm = 0.0; // after clipping
  double seconds = 0.0;
  double tokens_per_sec = 0.0;
};

/// Model, optimizer and step counter for one training phase. Trains in
/// single precision.
class Trainer {
 public:
  Trainer(Model<float> model, TrainConfig tc, Phase phase);

  StepMetrics step(const Batch& batch, std::int64_t total_steps);

  const Model<float>& model() const noexcept { return model_; }
  Model<float>& model() noexcept { return model_; }
  const TrainConfig& config() const noexcept { return tc_; }
  Phase phase() const noexcept { return phase_; }
  AdamState<float>& optimizer() noexcept { return adam_; }
  const AdamState<float>& optimizer() const noexcept { return adam_; }
  const std::vector<ParamGroup>& groups() const noexcept { return groups_; }
  std::int64_t steps_done() const noexcept { return steps_done_; }
  std::int64_t tokens_seen() const noexcept { return tokens_seen_; }

  void restore_progress(std::int64_t steps_done, std::int64_t tokens_seen) {
    steps_done_ = steps_done;
    tokens_seen_ = tokens_seen;
  }

 private:
  Model<float> model_;
  TrainConfig tc_;
  Phase phase_;
  std::vector<ParamGroup> groups_;
  AdamState<float> adam_;
  ModelParams<float> grads_;
  std::int64_t steps_done_ = 0;
  std::int64_t tokens_seen_ = 0;
};

/// Deterministic stream of sequence indices: epoch e visits every sequence
/// once in an order shuffled by (seed, e).
class SequenceOrder {
 public:
  SequenceOrder(std::size_t n_sequences, std::uint64_t seed);
  std::size_t at(std::int64_t position);

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::int64_t epoch_ = -1;
  std::vector<std::size_t> order_;
};

/// Generator seeded from (seed, step, stream); every random draw of a batch
/// comes from one of these, so batches depend only on their step.
std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step, std::uint64_t stream);

std::int64_t steps_for_budget(std::int64_t tokens, Index batch_size, Index seq_len);

/// Pretraining batch for the given 0-based step. The double decoder receives
/// a freshly sampled partition; loss masks always cover all T-1 targets.
Batch make_pretrain_batch(const std::vector<Tokens>& sequences, SequenceOrder& order, Arch arch,
                          const TrainConfig& tc, std::int64_t step);

Batch make_sft_batch(const std::vector<Tokens>& sequences, SequenceOrder& order, const TrainConfig& tc,
                     std::int64_t step);

struct RunOptions {
  std::int64_t total_steps = 0;
  std::int64_t stop_after = -1;  // stop once steps_done reaches this (resume tests)
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const Trainer&)> on_checkpoint;  // every checkpoint_every steps
};

struct RunSummary {
  double first_loss = 0.0;
  double last_loss = 0.0;
  std::int64_t steps = 0;
};

/// Streams pretraining batches from trainer.steps_done() to total_steps.
RunSummary pretrain(Trainer& trainer, const std::vector<Tokens>& sequences, const RunOptions& options);

/// Prefix-LM fine-tuning; same loop with make_sft_batch.
RunSummary sft_prefix_lm(Trainer& trainer, const std::vector<Tokens>& sequences,
                         const RunOptions& options);

/// Prefix-LM cross entropy averaged over every supervised suffix token of every
/// (sequence, eval breakpoint) pair. Consumes no randomness.
template <typename Scalar>
double prefix_lm_eval(const Model<Scalar>& model, const std::vector<Tokens>& sequences,
                      const PrefixBounds& bounds);

}  // namespace ddec
