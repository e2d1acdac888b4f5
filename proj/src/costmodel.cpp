#include "ddec/costmodel.hpp"

#include <cstdio>

#include "ddec/model.hpp"

namespace ddec {
namespace {

Count positive(Index v, const char* name) {
  if (v <= 0) throw Error(Errc::OutOfRange, std::string(name) + " must be positive");
  return static_cast<Count>(v);
}

Count mul(Count a, Count b) {
  Count out = 0;
  if (__builtin_mul_overflow(a, b, &out)) throw Error(Errc::OutOfRange, "FLOP count overflows 64 bits");
  return out;
}

Count add(Count a, Count b) {
  Count out = 0;
  if (__builtin_add_overflow(a, b, &out)) throw Error(Errc::OutOfRange, "FLOP count overflows 64 bits");
  return out;
}

Count mul(std::initializer_list<Count> xs) {
  Count out = 1;
  for (const Count x : xs) out = mul(out, x);
  return out;
}

Count gcd(Count a, Count b) {
  while (b != 0) {
    const Count r = a % b;
    a = b;
    b = r;
  }
  return a;
}

Ratio reduced(Count num, Count den) {
  const Count g = gcd(num, den);
  return {num / g, den / g};
}

Count inventory_flops(const std::vector<MatmulShape>& shapes, AttentionAccounting accounting) {
  Count sum = 0;
  for (const auto& s : shapes) {
    if (s.cross_attention && accounting == AttentionAccounting::Ideal) continue;
    sum = add(sum, mul(matmul_flops(s.m, s.n, s.k), static_cast<Count>(s.count)));
  }
  return sum;
}

}  // namespace

Count flops_decoder_only(Index T, Index d, Index L) {
  const Count t = positive(T, "T"), dd = positive(d, "d"), l = positive(L, "L");
  return mul(l, add(mul({72, t, dd, dd}), mul({12, t, t, dd})));
}

Count flops_encoder_decoder(Index T_in, Index T_out, Index d, Index L) {
  const Count ti = positive(T_in, "T_in"), to = positive(T_out, "T_out");
  const Count dd = positive(d, "d"), l = positive(L, "L");
  const Count linear = mul(add(mul(52, ti), mul(28, to)), mul(dd, dd));
  const Count attention = mul(add(add(mul({4, to, to}), mul({4, ti, to})), mul({8, ti, ti})), dd);
  return mul(l, add(linear, attention));
}

Count flops_double_decoder(Index T, Index d, Index L) {
  const Count t = positive(T, "T"), dd = positive(d, "d"), l = positive(L, "L");
  return mul(l, add(mul({76, t, dd, dd}), mul({12, t, t, dd})));
}

Count six_nt_heuristic(Count n_params, Count tokens) { return mul({6, n_params, tokens}); }

Count layer_walk_audit(const ModelConfig& cfg, Index T, AttentionAccounting accounting) {
  cfg.validate();
  positive(T, "T");
  Count forward = mul(static_cast<Count>(cfg.causal_layers()),
                      inventory_flops(causal_layer_matmuls(cfg, T), accounting));
  if (cfg.arch == Arch::DoubleDecoder) {
    forward = add(forward, mul(static_cast<Count>(cfg.generation_layers),
                               inventory_flops(generation_layer_matmuls(cfg, T), accounting)));
  }
  return mul(3, forward);
}

InferenceRatios inference_ratios(Index L_enc, Index L_dec, Index L) {
  if (L_enc <= 0 || L_dec <= 0 || L <= 0) {
    throw Error(Errc::InvalidConfig, "every stack needs at least one layer");
  }
  if (L_enc > L || L_dec > L) throw Error(Errc::InvalidConfig, "a stack cannot be deeper than L");
  const Count l = static_cast<Count>(L);
  const Ratio dec = reduced(static_cast<Count>(L_dec), l);
  return {dec, reduced(static_cast<Count>(L_enc), l), dec};
}

std::string_view to_string(CostArch arch) noexcept {
  switch (arch) {
    case CostArch::DecoderOnly: return "decoder_only";
    case CostArch::EncoderDecoder: return "encoder_decoder";
    case CostArch::DoubleDecoder: return "double_decoder";
  }
  return "?";
}

CostArch parse_cost_arch(std::string_view name) {
  if (name == "decoder_only") return CostArch::DecoderOnly;
  if (name == "encoder_decoder") return CostArch::EncoderDecoder;
  if (name == "double_decoder") return CostArch::DoubleDecoder;
  if (name == "sed") throw Error(Errc::OutOfScope, "architecture 'sed' is out of scope");
  throw Error(Errc::InvalidConfig, "unknown architecture '" + std::string(name) + "'");
}

double encoder_decoder_ratio(Index T_in, Index T_out, Index d) {
  return static_cast<double>(flops_encoder_decoder(T_in, T_out, d, 1)) /
         static_cast<double>(flops_decoder_only(T_in, d, 1));
}

CostReport cost_report(const CostInputs& in) {
  CostReport r;
  r.inputs = in;
  const Count d = positive(in.d, "d");
  const Count b = positive(in.b, "b");
  positive(in.L, "L");
  const Count t_in = positive(in.T_in, "T_in");
  const Count t_out = positive(in.T_out, "T_out");
  const Count d2 = mul(d, d);
  const bool stacked = in.arch != CostArch::DecoderOnly;
  if (stacked && in.L_enc + in.L_dec != in.L) {
    throw Error(Errc::InvalidConfig, "L_enc + L_dec must equal L");
  }

  char buf[256];
  switch (in.arch) {
    case CostArch::DecoderOnly: {
      r.train_flops_per_seq = flops_decoder_only(in.T, in.d, in.L);
      r.six_nt = six_nt_heuristic(mul({12, static_cast<Count>(in.L), d2}), positive(in.T, "T"));
      r.kv_bytes = mul({2, d, b, static_cast<Count>(in.L), add(t_in, t_out)});
      break;
    }
    case CostArch::EncoderDecoder: {
      r.train_flops_per_seq = flops_encoder_decoder(in.T_in, in.T_out, in.d, in.L);
      const Count n = add(mul({12, static_cast<Count>(in.L_enc), d2}), mul({16, static_cast<Count>(in.L_dec), d2}));
      r.six_nt = six_nt_heuristic(n, add(t_in, t_out));
      r.kv_bytes = mul({2, d, b, static_cast<Count>(in.L_dec), add(t_in, t_out)});
      const double ratio = encoder_decoder_ratio(in.T_in, in.T_out, in.d);
      // ratio(d) = (A d + B) / (C d + D); its limits are B/D and A/C.
      const double ti = static_cast<double>(t_in), to = static_cast<double>(t_out);
      const double small_d = (4.0 * to * to + 4.0 * ti * to + 8.0 * ti * ti) / (12.0 * ti * ti);
      const double large_d = (52.0 * ti + 28.0 * to) / (72.0 * ti);
      std::snprintf(buf, sizeof buf,
                    "encoder_decoder/decoder_only = %.4f (%.1f%% fewer FLOPs) at T = T_in; over all d the "
                    "ratio stays within [%.4f, %.4f], so a 21%% saving is not reachable from these formulas",
                    ratio, 100.0 * (1.0 - ratio), std::min(small_d, large_d),
                    std::max(small_d, large_d));
      r.note = buf;
      break;
    }
    case CostArch::DoubleDecoder: {
      r.train_flops_per_seq = flops_double_decoder(in.T, in.d, in.L);
      const Count n = add(mul({12, static_cast<Count>(in.L_enc), d2}), mul({14, static_cast<Count>(in.L_dec), d2}));
      r.six_nt = six_nt_heuristic(n, positive(in.T, "T"));
      r.kv_bytes = mul({2, d, b, static_cast<Count>(in.L_dec), add(t_in, t_out)});
      ModelConfig cfg;
      cfg.arch = Arch::DoubleDecoder;
      cfg.d = in.d;
      cfg.head_dim = in.head_dim;
      cfg.layers = in.L;
      cfg.context_layers = in.L_enc;
      cfg.generation_layers = in.L_dec;
      cfg.base_width = std::min(cfg.base_width, in.d);
      if (in.d % in.head_dim == 0) {
        r.audit_implementation = layer_walk_audit(cfg, in.T, AttentionAccounting::Implementation);
        r.audit_ideal = layer_walk_audit(cfg, in.T, AttentionAccounting::Ideal);
      }
      const double overhead = static_cast<double>(r.train_flops_per_seq) /
                              static_cast<double>(flops_decoder_only(in.T, in.d, in.L));
      std::snprintf(buf, sizeof buf, "double_decoder/decoder_only train FLOPs = %.4f (%+.1f%%)", overhead,
                    100.0 * (overhead - 1.0));
      r.note = buf;
      break;
    }
  }
  if (in.arch == CostArch::DecoderOnly) {
    ModelConfig cfg;
    cfg.arch = Arch::DecoderOnly;
    cfg.d = in.d;
    cfg.head_dim = in.head_dim;
    cfg.layers = in.L;
    cfg.base_width = std::min(cfg.base_width, in.d);
    if (in.d % in.head_dim == 0) {
      r.audit_implementation = layer_walk_audit(cfg, in.T);
      r.audit_ideal = r.audit_implementation;
    }
  } else {
    const auto ratios = inference_ratios(in.L_enc, in.L_dec, in.L);
    r.kv_ratio = ratios.kv.value();
    r.ttft_ratio = ratios.ttft.value();
    r.per_token_ratio = ratios.per_token.value();
  }
  return r;
}

}  // namespace ddec
