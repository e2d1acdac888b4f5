#include "ddec/config.hpp"

#include <cmath>

namespace ddec {

std::string_view to_string(Arch arch) noexcept {
  return arch == Arch::DecoderOnly ? "decoder_only" : "double_decoder";
}

Arch parse_arch(std::string_view name) {
  if (name == "decoder_only") return Arch::DecoderOnly;
  if (name == "double_decoder") return Arch::DoubleDecoder;
  if (name == "sed" || name == "encoder_decoder") {
    throw Error(Errc::OutOfScope,
                "architecture '" + std::string(name) + "' is out of scope; use decoder_only or double_decoder");
  }
  throw Error(Errc::InvalidConfig, "unknown architecture '" + std::string(name) + "'");
}

double ModelConfig::logit_multiplier() const {
  return std::sqrt(static_cast<double>(base_width) / static_cast<double>(d));
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(Errc::InvalidConfig, what); };
  if (head_dim <= 0 || head_dim % 2 != 0) fail("head_dim must be positive and even");
  if (d <= 0 || d % head_dim != 0) fail("d must be a positive multiple of head_dim");
  if (layers < 1 || context_layers < 1 || generation_layers < 1) fail("all layer counts must be >= 1");
  if (base_width < 1 || base_width > d) fail("base_width must lie in [1, d]");
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (ffn_mult < 1) fail("ffn_mult must be positive");
  if (max_seq_len < 2) fail("max_seq_len must be at least 2");
  if (!(rope_base > 1.0)) fail("rope_base must exceed 1");
}

double TrainConfig::resolved_weight_decay(Arch arch) const {
  if (weight_decay) return *weight_decay;
  return arch == Arch::DecoderOnly ? 0.1 : 0.5;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(Errc::InvalidConfig, what); };
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) fail("warmup_frac must lie in (0, 1)");
  if (!(final_lr_frac > 0.0 && final_lr_frac <= 1.0)) fail("final_lr_frac must lie in (0, 1]");
  if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
  if (!(base_lr > 0.0) || !(sft_base_lr > 0.0)) fail("learning rates must be positive");
  if (weight_decay && *weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (batch_size < 1 || sft_batch_size < 1) fail("batch sizes must be positive");
  if (total_tokens < 1) fail("total_tokens must be positive");
  if (min_prefix < 1 || min_suffix < 1) fail("min_prefix and min_suffix must be positive");
  if (!(sft_token_fraction > 0.0)) fail("sft_token_fraction must be positive");
  if (checkpoint_every < 0) fail("checkpoint_every must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
    fail("AdamW betas must lie in [0, 1) and eps must be positive");
  }
}

}  // namespace ddec
