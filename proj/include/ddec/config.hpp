#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "ddec/common.hpp"

namespace ddec {

enum class Arch { DecoderOnly, DoubleDecoder };

std::string_view to_string(Arch arch) noexcept;

/// Accepts "decoder_only" and "double_decoder". "sed"/"encoder_decoder" are
/// rejected with Errc::OutOfScope, anything else with Errc::InvalidConfig.
Arch parse_arch(std::string_view name);

struct ModelConfig {
  Arch arch = Arch::DoubleDecoder;
  Index d = 256;
  Index head_dim = 64;
  Index layers = 12;             // decoder-only depth
  Index context_layers = 8;      // double decoder: context stack
  Index generation_layers = 4;   // double decoder: generation stack
  Index vocab_size = 259;
  Index base_width = 64;         // muP d0
  Index ffn_mult = 4;
  Index max_seq_len = 2048;
  double rope_base = 10000.0;

  Index n_heads() const noexcept { return d / head_dim; }
  Index ffn_width() const noexcept { return ffn_mult * d; }

  /// Depth of the stack that consumes the token stream causally: L for the
  /// decoder-only model, L_enc for the context decoder.
  Index causal_layers() const noexcept {
    return arch == Arch::DecoderOnly ? layers : context_layers;
  }

  /// sqrt(d0 / d), applied after the tied output projection.
  double logit_multiplier() const;

  /// Throws Errc::InvalidConfig on a violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TrainConfig {
  double base_lr = 0.01;
  std::optional<double> weight_decay;  // unset: 0.1 decoder-only, 0.5 double decoder
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double warmup_frac = 0.05;
  double final_lr_frac = 0.1;
  double grad_clip = 1.0;
  Index batch_size = 8;
  std::int64_t total_tokens = 1'000'000;
  std::uint64_t seed = 1234;

  // block partition sampler
  Index min_blocks = 2;
  Index max_blocks = 32;
  Index min_block_len = 8;

  // prefix-LM collator and fine-tuning
  Index min_prefix = 16;
  Index min_suffix = 16;
  double sft_base_lr = 2e-4;
  Index sft_batch_size = 32;
  double sft_token_fraction = 0.1;

  std::int64_t checkpoint_every = 0;  // steps; 0 disables periodic checkpoints

  double resolved_weight_decay(Arch arch) const;

  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

}  // namespace ddec
