#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "ddec/config.hpp"

namespace ddec {

using Count = std::uint64_t;

/// Train-time FLOPs per sequence: L(72Td^2 + 12T^2d).
Count flops_decoder_only(Index T, Index d, Index L);

/// L((52T_in + 28T_out)d^2 + (4T_out^2 + 4T_in T_out + 8T_in^2)d), with the
/// 2/3 encoder, 1/3 decoder split folded in.
Count flops_encoder_decoder(Index T_in, Index T_out, Index d, Index L);

/// L(76Td^2 + 12T^2d): context decoder with 2L/3 layers, generation decoder
/// with L/3, attention counted as one causal-equivalent SDPA per layer.
Count flops_double_decoder(Index T, Index d, Index L);

Count six_nt_heuristic(Count n_params, Count tokens);

enum class AttentionAccounting {
  Implementation,  // both SDPAs of every dual-key layer, as executed
  Ideal,           // one SDPA per dual-key layer
};

/// Walks the model's matmul inventory, sums 2mnk per product and multiplies
/// by 3 (forward plus both backward products). The tied output head, norms,
/// activations and softmax are left out.
Count layer_walk_audit(const ModelConfig& cfg, Index T,
                       AttentionAccounting accounting = AttentionAccounting::Implementation);

/// Exact fraction num/den.
struct Ratio {
  Count num = 0;
  Count den = 1;
  double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Ratio& a, const Ratio& b) noexcept {
    __extension__ using Wide = unsigned __int128;
    return static_cast<Wide>(a.num) * b.den == static_cast<Wide>(b.num) * a.den;
  }
};

struct InferenceRatios {
  Ratio kv;
  Ratio ttft;
  Ratio per_token;
};

/// kv = per_token = L_dec / L, ttft = L_enc / L. Throws Errc::InvalidConfig
/// for an empty stack or a stack deeper than L.
InferenceRatios inference_ratios(Index L_enc, Index L_dec, Index L);

enum class CostArch { DecoderOnly, EncoderDecoder, DoubleDecoder };

std::string_view to_string(CostArch arch) noexcept;
/// Accepts decoder_only, encoder_decoder and double_decoder.
CostArch parse_cost_arch(std::string_view name);

struct CostInputs {
  CostArch arch = CostArch::DoubleDecoder;
  Index d = 256;
  Index L = 12;      // total depth
  Index L_enc = 8;   // context decoder or encoder
  Index L_dec = 4;
  Index T = 2048;    // training length; also T_in at inference for decoder-only and double decoder
  Index T_in = 2048;
  Index T_out = 256;
  Index b = 2;       // bytes per cached value
  Index head_dim = 64;
};

struct CostReport {
  CostInputs inputs;
  Count train_flops_per_seq = 0;
  Count six_nt = 0;
  std::optional<Count> audit_implementation;  // layer walk over the real model
  std::optional<Count> audit_ideal;
  Count kv_bytes = 0;
  double kv_ratio = 1.0;
  double ttft_ratio = 1.0;
  double per_token_ratio = 1.0;
  std::string note;
};

/// Validates inputs (positive, L_enc + L_dec = L for stacked models) and
/// fills every column.
CostReport cost_report(const CostInputs& in);

/// Encoder-decoder to decoder-only FLOP ratio at (T_in, T_out, d); the bounds
/// of this ratio over all d are its d -> 0 and d -> infinity limits.
double encoder_decoder_ratio(Index T_in, Index T_out, Index d);

}  // namespace ddec
