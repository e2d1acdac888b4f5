#include "ddec/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ddec {

Index Batch::supervised_targets() const {
  Index n = 0;
  for (const auto& mask : loss_mask) n += std::count(mask.begin(), mask.end(), std::uint8_t{1});
  return n;
}

BlockPartition Batch::effective_partition() const {
  if (partition) return *partition;
  const Index T = seq_len();
  if (breakpoint) return BlockPartition::validate({0, *breakpoint, T}, T);
  return BlockPartition::single(T);
}

template <typename Scalar>
CrossEntropy<Scalar> cross_entropy(const Matrix<Scalar>& logits, std::span<const TokenId> targets,
                                   std::span<const std::uint8_t> mask, double grad_scale) {
  const Index T = logits.rows();
  if (static_cast<Index>(targets.size()) != T || static_cast<Index>(mask.size()) != T) {
    throw Error(Errc::ShapeMismatch, "cross_entropy: logits, targets and mask lengths disagree");
  }
  CrossEntropy<Scalar> ce;
  ce.d_logits = Matrix<Scalar>::Zero(T, logits.cols());
  for (Index t = 0; t < T; ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    const TokenId target = targets[static_cast<std::size_t>(t)];
    if (target < 0 || target >= logits.cols()) {
      throw Error(Errc::IdOutOfRange, "target id " + std::to_string(target) + " outside vocabulary");
    }
    const Scalar row_max = logits.row(t).maxCoeff();
    auto shifted = (logits.row(t).array() - row_max).exp();
    const Scalar denom = shifted.sum();
    const double lse = static_cast<double>(row_max) + std::log(static_cast<double>(denom));
    ce.sum += lse - static_cast<double>(logits(t, target));
    ++ce.count;
    ce.d_logits.row(t) = shifted * static_cast<Scalar>(grad_scale / static_cast<double>(denom));
    ce.d_logits(t, target) -= static_cast<Scalar>(grad_scale);
  }
  return ce;
}

namespace {

Tokens next_token_targets(const Tokens& tokens) {
  Tokens targets(tokens.size(), 0);
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) targets[t] = tokens[t + 1];
  return targets;
}

void check_mask(const Tokens& tokens, const LossMask& mask) {
  if (mask.size() != tokens.size()) {
    throw Error(Errc::ShapeMismatch, "loss mask length differs from sequence length");
  }
  if (!mask.empty() && mask.back()) {
    throw Error(Errc::ShapeMismatch, "the last position has no next-token target");
  }
}

}  // namespace

template <typename Scalar>
double lm_loss(const Matrix<Scalar>& logits, const Tokens& tokens, const LossMask& loss_mask) {
  check_mask(tokens, loss_mask);
  const Tokens targets = next_token_targets(tokens);
  const auto ce = cross_entropy(logits, targets, loss_mask, 0.0);
  if (ce.count == 0) throw Error(Errc::EmptyMask, "no supervised positions");
  return ce.sum / static_cast<double>(ce.count);
}

LossMask pretrain_loss_mask(Index seq_len) {
  LossMask mask(static_cast<std::size_t>(seq_len), 1);
  if (seq_len > 0) mask.back() = 0;
  return mask;
}

LossMask suffix_loss_mask(Index breakpoint, Index seq_len) {
  if (breakpoint <= 0 || breakpoint >= seq_len) {
    throw Error(Errc::BadBreakpoint, "breakpoint " + std::to_string(breakpoint) + " outside (0, " +
                                         std::to_string(seq_len) + ")");
  }
  LossMask mask(static_cast<std::size_t>(seq_len), 0);
  for (Index t = breakpoint - 1; t < seq_len - 1; ++t) mask[static_cast<std::size_t>(t)] = 1;
  return mask;
}

std::pair<Index, Index> breakpoint_range(Index seq_len, const PrefixBounds& bounds) {
  if (seq_len < 2) throw Error(Errc::BadBreakpoint, "prefix-LM needs at least two tokens");
  const Index lo = std::clamp<Index>(bounds.min_prefix, 1, seq_len - 1);
  const Index hi = std::clamp<Index>(seq_len - bounds.min_suffix, lo, seq_len - 1);
  return {lo, hi};
}

Batch prefix_lm_collate(std::mt19937_64& rng, std::vector<Tokens> tokens, const PrefixBounds& bounds) {
  if (tokens.empty()) throw Error(Errc::ShapeMismatch, "empty batch");
  const Index T = static_cast<Index>(tokens.front().size());
  for (const auto& row : tokens) {
    if (static_cast<Index>(row.size()) != T) throw Error(Errc::ShapeMismatch, "ragged batch");
  }
  const auto [lo, hi] = breakpoint_range(T, bounds);
  std::uniform_int_distribution<Index> dist(lo, hi);
  const Index b = dist(rng);
  Batch batch;
  batch.breakpoint = b;
  batch.loss_mask.assign(tokens.size(), suffix_loss_mask(b, T));
  batch.tokens = std::move(tokens);
  return batch;
}

std::vector<Index> eval_breakpoints(Index seq_len, const PrefixBounds& bounds) {
  const auto [lo, hi] = breakpoint_range(seq_len, bounds);
  std::vector<Index> points;
  for (const Index quarter : {1, 2, 3}) {
    const Index b = std::clamp<Index>(quarter * seq_len / 4, lo, hi);
    if (std::find(points.begin(), points.end(), b) == points.end()) points.push_back(b);
  }
  return points;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<ParamGroup> mup_param_groups(const ModelConfig& cfg, const std::vector<std::string>& names,
                                         double base_lr, double weight_decay) {
  const double width_ratio = static_cast<double>(cfg.base_width) / static_cast<double>(cfg.d);
  std::vector<ParamGroup> groups{{"hidden", {}, base_lr * width_ratio, weight_decay},
                                 {"embedding", {}, base_lr, weight_decay},
                                 {"norm_bias", {}, base_lr, 0.0}};
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& name = names[i];
    if (name == "embedding") {
      groups[1].members.push_back(i);
    } else if (ends_with(name, ".gain") || ends_with(name, ".bias")) {
      groups[2].members.push_back(i);
    } else if (ends_with(name, ".weight")) {
      groups[0].members.push_back(i);
    } else {
      throw Error(Errc::UnclassifiedParameter, "no muP group for parameter '" + name + "'");
    }
  }
  return groups;
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, const TrainConfig& tc) {
  if (total_steps <= 0 || step < 0 || step > total_steps) {
    throw Error(Errc::OutOfRange, "schedule step " + std::to_string(step) + " outside [0, " +
                                      std::to_string(total_steps) + "]");
  }
  const double s = static_cast<double>(step);
  const double warmup = tc.warmup_frac * static_cast<double>(total_steps);
  if (s < warmup) return s / warmup;
  const double decay_span = static_cast<double>(total_steps) - warmup;
  if (decay_span <= 0.0) return 1.0;
  return 1.0 - (1.0 - tc.final_lr_frac) * (s - warmup) / decay_span;
}

template <typename Scalar>
void adamw_update(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads,
                  AdamState<Scalar>& state, const std::vector<ParamGroup>& groups,
                  double lr_multiplier, const TrainConfig& tc) {
  if (state.m.embedding.size() == 0) {
    state.m = zeros_like(params);
    state.v = zeros_like(params);
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(state.t));
  auto p = parameter_list(params);
  auto g = parameter_list(grads);
  auto m = parameter_list(state.m);
  auto v = parameter_list(state.v);
  const auto b1 = static_cast<Scalar>(tc.beta1);
  const auto b2 = static_cast<Scalar>(tc.beta2);
  for (const auto& group : groups) {
    const double lr = group.lr * lr_multiplier;
    const auto decay = static_cast<Scalar>(1.0 - lr * group.weight_decay);
    const auto step_size = static_cast<Scalar>(lr / bc1);
    const auto inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<Scalar>(tc.eps);
    for (const std::size_t i : group.members) {
      auto pa = p[i].value->array();
      auto ga = g[i].value->array();
      auto ma = m[i].value->array();
      auto va = v[i].value->array();
      ma = b1 * ma + (Scalar(1) - b1) * ga;
      va = b2 * va + (Scalar(1) - b2) * ga.square();
      pa *= decay;
      pa -= step_size * ma / (va.sqrt() * inv_sqrt_bc2 + eps);
    }
  }
}

template <typename Scalar>
double global_norm(const ModelParams<Scalar>& grads) {
  double sq = 0.0;
  for (const auto& entry : parameter_list(grads)) {
    sq += entry.value->template cast<double>().squaredNorm();
  }
  return std::sqrt(sq);
}

template <typename Scalar>
double clip_global_norm(ModelParams<Scalar>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (std::isfinite(norm) && norm > max_norm) {
    const auto scale = static_cast<Scalar>(max_norm / norm);
    for (auto& entry : parameter_list(grads)) *entry.value *= scale;
  }
  return norm;
}

template <typename Scalar>
double batch_loss_and_grad(const Model<Scalar>& model, const Batch& batch, ModelParams<Scalar>& grads) {
  const Index n = batch.supervised_targets();
  if (n == 0) throw Error(Errc::EmptyMask, "batch has no supervised targets");
  const BlockPartition partition = batch.effective_partition();
  double sum = 0.0;
  ForwardTape<Scalar> tape;
  for (std::size_t b = 0; b < batch.tokens.size(); ++b) {
    const Tokens& tokens = batch.tokens[b];
    check_mask(tokens, batch.loss_mask[b]);
    const Matrix<Scalar> logits = forward(model, tokens, partition, &tape);
    const auto ce = cross_entropy(logits, next_token_targets(tokens), batch.loss_mask[b],
                                  1.0 / static_cast<double>(n));
    sum += ce.sum;
    backward(model, tape, ce.d_logits, grads);
  }
  return sum / static_cast<double>(n);
}

template <typename Scalar>
double batch_loss(const Model<Scalar>& model, const Batch& batch) {
  const Index n = batch.supervised_targets();
  if (n == 0) throw Error(Errc::EmptyMask, "batch has no supervised targets");
  const BlockPartition partition = batch.effective_partition();
  double sum = 0.0;
  for (std::size_t b = 0; b < batch.tokens.size(); ++b) {
    const Tokens& tokens = batch.tokens[b];
    check_mask(tokens, batch.loss_mask[b]);
    const Matrix<Scalar> logits = forward(model, tokens, partition);
    sum += cross_entropy(logits, next_token_targets(tokens), batch.loss_mask[b], 0.0).sum;
  }
  return sum / static_cast<double>(n);
}

Trainer::Trainer(Model<float> model, TrainConfig tc, Phase phase)
    : model_(std::move(model)), tc_(std::move(tc)), phase_(phase) {
  tc_.validate();
  const double base_lr = phase_ == Phase::Pretrain ? tc_.base_lr : tc_.sft_base_lr;
  groups_ = mup_param_groups(model_.config(), parameter_names(model_.config()), base_lr,
                             tc_.resolved_weight_decay(model_.config().arch));
  grads_ = zeros_like(model_.params());
  adam_.m = zeros_like(model_.params());
  adam_.v = zeros_like(model_.params());
}

StepMetrics Trainer::step(const Batch& batch, std::int64_t total_steps) {
  const auto start = std::chrono::steady_clock::now();
  for (auto& entry : parameter_list(grads_)) entry.value->setZero();

  StepMetrics metrics;
  metrics.loss = batch_loss_and_grad(model_, batch, grads_);
  metrics.grad_norm = clip_global_norm(grads_, tc_.grad_clip);
  if (!std::isfinite(metrics.loss) || !std::isfinite(metrics.grad_norm)) {
    std::ostringstream msg;
    msg << "step " << steps_done_ + 1 << ": loss " << metrics.loss << ", grad norm " << metrics.grad_norm
        << ", partition " << batch.effective_partition().to_string();
    throw Error(Errc::NonFiniteLoss, msg.str());
  }
  metrics.clipped_norm = global_norm(grads_);

  const double multiplier = lr_schedule(std::min(steps_done_ + 1, total_steps), total_steps, tc_);
  adamw_update(model_.params(), grads_, adam_, groups_, multiplier, tc_);

  ++steps_done_;
  const Index tokens = static_cast<Index>(batch.tokens.size()) * batch.seq_len();
  tokens_seen_ += tokens;
  metrics.step = steps_done_;
  metrics.tokens_seen = tokens_seen_;
  metrics.lr = groups_.front().lr * multiplier;
  metrics.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  metrics.tokens_per_sec = metrics.seconds > 0.0 ? static_cast<double>(tokens) / metrics.seconds : 0.0;
  return metrics;
}

SequenceOrder::SequenceOrder(std::size_t n_sequences, std::uint64_t seed) : n_(n_sequences), seed_(seed) {
  if (n_ == 0) throw Error(Errc::InvalidConfig, "no training sequences; corpus too small for seq_len");
}

std::size_t SequenceOrder::at(std::int64_t position) {
  const std::int64_t epoch = position / static_cast<std::int64_t>(n_);
  if (epoch != epoch_) {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    auto rng = step_rng(seed_, epoch, 0x5e9u);
    std::shuffle(order_.begin(), order_.end(), rng);
    epoch_ = epoch;
  }
  return order_[static_cast<std::size_t>(position % static_cast<std::int64_t>(n_))];
}

std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step, std::uint64_t stream) {
  const auto s = static_cast<std::uint64_t>(step);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

std::int64_t steps_for_budget(std::int64_t tokens, Index batch_size, Index seq_len) {
  return std::max<std::int64_t>(1, tokens / (batch_size * seq_len));
}

namespace {

constexpr std::uint64_t kPartitionStream = 1;
constexpr std::uint64_t kBreakpointStream = 2;
constexpr std::uint64_t kSftOrderSalt = 0x5f7u;

std::vector<Tokens> gather(const std::vector<Tokens>& sequences, SequenceOrder& order, Index batch_size,
                           std::int64_t step) {
  std::vector<Tokens> rows;
  rows.reserve(static_cast<std::size_t>(batch_size));
  for (Index i = 0; i < batch_size; ++i) rows.push_back(sequences[order.at(step * batch_size + i)]);
  return rows;
}

template <typename MakeBatch>
RunSummary run_loop(Trainer& trainer, const RunOptions& options, MakeBatch make_batch) {
  RunSummary summary;
  const auto every = trainer.config().checkpoint_every;
  bool first = true;
  while (trainer.steps_done() < options.total_steps) {
    if (options.stop_after >= 0 && trainer.steps_done() >= options.stop_after) break;
    const Batch batch = make_batch(trainer.steps_done());
    const StepMetrics m = trainer.step(batch, options.total_steps);
    if (first) summary.first_loss = m.loss;
    first = false;
    summary.last_loss = m.loss;
    ++summary.steps;
    if (options.on_step) options.on_step(m);
    if (every > 0 && options.on_checkpoint && trainer.steps_done() % every == 0) {
      options.on_checkpoint(trainer);
    }
  }
  return summary;
}

}  // namespace

Batch make_pretrain_batch(const std::vector<Tokens>& sequences, SequenceOrder& order, Arch arch,
                          const TrainConfig& tc, std::int64_t step) {
  Batch batch;
  batch.tokens = gather(sequences, order, tc.batch_size, step);
  const Index T = batch.seq_len();
  if (arch == Arch::DoubleDecoder) {
    auto rng = step_rng(tc.seed, step, kPartitionStream);
    batch.partition = sample_partition(rng, T, {tc.min_blocks, tc.max_blocks, tc.min_block_len});
  }
  batch.loss_mask.assign(batch.tokens.size(), pretrain_loss_mask(T));
  return batch;
}

Batch make_sft_batch(const std::vector<Tokens>& sequences, SequenceOrder& order, const TrainConfig& tc,
                     std::int64_t step) {
  auto rng = step_rng(tc.seed, step, kBreakpointStream);
  return prefix_lm_collate(rng, gather(sequences, order, tc.sft_batch_size, step),
                           {tc.min_prefix, tc.min_suffix});
}

RunSummary pretrain(Trainer& trainer, const std::vector<Tokens>& sequences, const RunOptions& options) {
  if (trainer.phase() != Phase::Pretrain) throw Error(Errc::InvalidConfig, "trainer is not in pretraining");
  const auto& tc = trainer.config();
  if (trainer.model().config().arch == Arch::DoubleDecoder && !sequences.empty()) {
    check_feasible(static_cast<Index>(sequences.front().size()),
                   {tc.min_blocks, tc.max_blocks, tc.min_block_len});
  }
  SequenceOrder order(sequences.size(), tc.seed);
  const Arch arch = trainer.model().config().arch;
  return run_loop(trainer, options, [&](std::int64_t step) {
    return make_pretrain_batch(sequences, order, arch, tc, step);
  });
}

RunSummary sft_prefix_lm(Trainer& trainer, const std::vector<Tokens>& sequences,
                         const RunOptions& options) {
  if (trainer.phase() != Phase::Sft) throw Error(Errc::InvalidConfig, "trainer is not in fine-tuning");
  const auto& tc = trainer.config();
  SequenceOrder order(sequences.size(), tc.seed ^ kSftOrderSalt);
  return run_loop(trainer, options,
                  [&](std::int64_t step) { return make_sft_batch(sequences, order, tc, step); });
}

template <typename Scalar>
double prefix_lm_eval(const Model<Scalar>& model, const std::vector<Tokens>& sequences,
                      const PrefixBounds& bounds) {
  double sum = 0.0;
  Index count = 0;
  for (const Tokens& tokens : sequences) {
    const Index T = static_cast<Index>(tokens.size());
    const Tokens targets = next_token_targets(tokens);
    const auto points = eval_breakpoints(T, bounds);
    if (model.config().arch == Arch::DecoderOnly) {
      const Matrix<Scalar> logits = decoder_only_forward(model, tokens);
      for (const Index b : points) {
        const auto ce = cross_entropy(logits, targets, suffix_loss_mask(b, T), 0.0);
        sum += ce.sum;
        count += ce.count;
      }
    } else {
      // Context latents are causal, so one pass serves every breakpoint.
      const ContextLatents<Scalar> latents = context_decoder_forward(model, tokens);
      for (const Index b : points) {
        const Matrix<Scalar> logits = generation_decoder_forward(
            model, tokens, latents, BlockPartition::validate({0, b, T}, T));
        const auto ce = cross_entropy(logits, targets, suffix_loss_mask(b, T), 0.0);
        sum += ce.sum;
        count += ce.count;
      }
    }
  }
  if (count == 0) throw Error(Errc::EmptyMask, "no evaluation targets");
  return sum / static_cast<double>(count);
}

#define DDEC_INSTANTIATE(S)                                                                        \
  template CrossEntropy<S> cross_entropy(const Matrix<S>&, std::span<const TokenId>,              \
                                         std::span<const std::uint8_t>, double);                   \
  template double lm_loss(const Matrix<S>&, const Tokens&, const LossMask&);                      \
  template void adamw_update(ModelParams<S>&, const ModelParams<S>&, AdamState<S>&,               \
                             const std::vector<ParamGroup>&, double, const TrainConfig&);          \
  template double clip_global_norm(ModelParams<S>&, double);                                      \
  template double global_norm(const ModelParams<S>&);                                             \
  template double batch_loss_and_grad(const Model<S>&, const Batch&, ModelParams<S>&);            \
  template double batch_loss(const Model<S>&, const Batch&);                                      \
  template double prefix_lm_eval(const Model<S>&, const std::vector<Tokens>&, const PrefixBounds&);

DDEC_INSTANTIATE(float)
DDEC_INSTANTIATE(double)

#undef DDEC_INSTANTIATE

}  // namespace ddec
