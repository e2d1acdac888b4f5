#include "ddec/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "ddec/data.hpp"

namespace ddec {
namespace {

struct AllVisible {
  bool operator()(Index, Index) const noexcept { return true; }
};

template <typename Scalar>
void require_arch(const Model<Scalar>& model, Arch arch, const char* what) {
  if (model.config().arch != arch) {
    throw Error(Errc::InvalidConfig, std::string(what) + " needs a " + std::string(to_string(arch)) + " model");
  }
}

}  // namespace

template <typename Scalar>
std::size_t CausalCache<Scalar>::stored_elements() const {
  std::size_t n = 0;
  for (const auto& layer : layers) n += layer.k.elements() + layer.v.elements();
  return n;
}

template <typename Scalar>
std::size_t GenKVCache<Scalar>::stored_elements() const {
  std::size_t n = 0;
  for (const auto& layer : layers) {
    n += static_cast<std::size_t>(layer.cross_k.size() + layer.cross_v.size());
    n += layer.self_k.elements() + layer.self_v.elements();
  }
  return n;
}

template <typename Scalar>
Matrix<Scalar> causal_extend(const Model<Scalar>& model, CausalCache<Scalar>& cache, const Tokens& tokens,
                             OpCounter* ops) {
  const auto& cfg = model.config();
  const auto& params = model.params();
  const Index d = cfg.d;
  const Index dh = cfg.head_dim;
  const Index p0 = cache.length();
  const Index m = static_cast<Index>(tokens.size());
  if (m == 0) return Matrix<Scalar>(0, d);
  if (p0 + m > cfg.max_seq_len) {
    throw Error(Errc::SeqTooLong, std::to_string(p0 + m) + " positions exceed max_seq_len " +
                                      std::to_string(cfg.max_seq_len));
  }
  if (cache.layers.empty()) {
    cache.layers.resize(params.causal.size(), LayerKV<Scalar>{RowCache<Scalar>(d), RowCache<Scalar>(d)});
  } else if (cache.layers.size() != params.causal.size()) {
    throw Error(Errc::PrefixMismatch, "cache depth differs from the model's causal stack");
  }
  std::uint64_t* proj = ops ? &ops->projection : nullptr;

  Matrix<Scalar> x = embed(model, tokens);
  for (std::size_t i = 0; i < params.causal.size(); ++i) {
    const auto& block = params.causal[i];
    auto& layer = cache.layers[i];
    Matrix<Scalar> a = layer_norm_forward(block.norm1, x);
    Matrix<Scalar> q = linear_forward(block.attn.q, a, proj);
    Matrix<Scalar> k = linear_forward(block.attn.k, a, proj);
    Matrix<Scalar> v = linear_forward(block.attn.v, a, proj);
    model.rotary().apply(q, p0);
    model.rotary().apply(k, p0);
    layer.k.append(k);
    layer.v.append(v);
    const auto keys = layer.k.view();
    const auto values = layer.v.view();
    Matrix<Scalar> heads(m, d);
    for (Index h = 0; h < cfg.n_heads(); ++h) {
      heads.middleCols(h * dh, dh) = sdpa(q.middleCols(h * dh, dh), keys.middleCols(h * dh, dh),
                                          values.middleCols(h * dh, dh), CausalPredicate{p0},
                                          model.attention_scale())
                                         .output;
      if (ops) ops->attention += 2 * matmul_flops(m, p0 + m, dh);
    }
    x += linear_forward(block.attn.o, heads, proj);
    x += feed_forward(block.ffn, layer_norm_forward(block.norm2, x), ops);
  }
  Matrix<Scalar> out = layer_norm_forward(params.causal_norm, x);
  cache.tokens.insert(cache.tokens.end(), tokens.begin(), tokens.end());
  if (cfg.arch == Arch::DoubleDecoder) {
    cache.latents.conservativeResize(p0 + m, d);
    cache.latents.bottomRows(m) = out;
  }
  return out;
}

template <typename Scalar>
PrefixCache<Scalar> build_prefix_cache(const Model<Scalar>& model, const Tokens& prefix, OpCounter* ops) {
  require_arch(model, Arch::DoubleDecoder, "a prefix cache");
  PrefixCache<Scalar> cache;
  causal_extend(model, cache, prefix, ops);
  return cache;
}

template <typename Scalar>
ContextPhaseResult<Scalar> context_phase(const Model<Scalar>& model, const Tokens& context,
                                         const PrefixCache<Scalar>* prefix, OpCounter* ops) {
  require_arch(model, Arch::DoubleDecoder, "context_phase");
  if (context.empty()) throw Error(Errc::ShapeMismatch, "context phase needs at least one token");
  const auto& cfg = model.config();
  ContextPhaseResult<Scalar> result;
  if (prefix) {
    if (prefix->tokens.size() > context.size() ||
        !std::equal(prefix->tokens.begin(), prefix->tokens.end(), context.begin())) {
      throw Error(Errc::PrefixMismatch, "cached prefix of " + std::to_string(prefix->tokens.size()) +
                                            " tokens does not start the prompt");
    }
    if (!prefix->tokens.empty() && (prefix->layers.size() != model.params().causal.size() ||
                                    prefix->latents.rows() != prefix->length() ||
                                    prefix->latents.cols() != cfg.d)) {
      throw Error(Errc::PrefixMismatch, "cached prefix was built for a different model shape");
    }
    result.prefix = *prefix;
  }
  const Tokens suffix(context.begin() + static_cast<std::ptrdiff_t>(result.prefix.tokens.size()),
                      context.end());
  result.new_tokens = static_cast<Index>(suffix.size());
  causal_extend(model, result.prefix, suffix, ops);
  result.latents.h = result.prefix.latents;

  std::uint64_t* proj = ops ? &ops->projection : nullptr;
  const Index T = static_cast<Index>(context.size());
  result.cache.context_len = T;
  result.cache.layers.reserve(model.params().generation.size());
  for (const auto& block : model.params().generation) {
    typename GenKVCache<Scalar>::Layer layer;
    layer.cross_k = linear_forward(block.attn.k_cross, result.latents.h, proj);
    layer.cross_v = linear_forward(block.attn.v_cross, result.latents.h, proj);
    model.rotary().apply(layer.cross_k, 0);
    layer.self_k = RowCache<Scalar>(cfg.d);
    layer.self_v = RowCache<Scalar>(cfg.d);
    result.cache.layers.push_back(std::move(layer));
  }
  return result;
}

template <typename Scalar>
Matrix<Scalar> decode_step(const Model<Scalar>& model, GenKVCache<Scalar>& cache, TokenId token,
                           Index position, OpCounter* ops) {
  require_arch(model, Arch::DoubleDecoder, "decode_step");
  const auto& cfg = model.config();
  const auto& params = model.params();
  if (cache.layers.size() != params.generation.size()) {
    throw Error(Errc::ShapeMismatch, "decode_step before the context phase");
  }
  if (position >= cfg.max_seq_len) {
    throw Error(Errc::CacheExhausted, "position " + std::to_string(position) + " reaches max_seq_len " +
                                          std::to_string(cfg.max_seq_len));
  }
  if (position != cache.next_position()) {
    throw Error(Errc::ShapeMismatch, "decode position " + std::to_string(position) + ", cache expects " +
                                         std::to_string(cache.next_position()));
  }
  const Index dh = cfg.head_dim;
  std::uint64_t* proj = ops ? &ops->projection : nullptr;

  Matrix<Scalar> x = embed(model, Tokens{token});
  for (std::size_t i = 0; i < params.generation.size(); ++i) {
    const auto& block = params.generation[i];
    auto& layer = cache.layers[i];
    Matrix<Scalar> a = layer_norm_forward(block.norm1, x);
    Matrix<Scalar> q = linear_forward(block.attn.q, a, proj);
    Matrix<Scalar> k = linear_forward(block.attn.k_self, a, proj);
    Matrix<Scalar> v = linear_forward(block.attn.v_self, a, proj);
    model.rotary().apply(q, position);
    model.rotary().apply(k, position);
    layer.self_k.append(k);
    layer.self_v.append(v);
    const auto self_k = layer.self_k.view();
    const auto self_v = layer.self_v.view();
    Matrix<Scalar> heads(1, cfg.d);
    for (Index h = 0; h < cfg.n_heads(); ++h) {
      const Index c = h * dh;
      auto ps = sdpa(q.middleCols(c, dh), self_k.middleCols(c, dh), self_v.middleCols(c, dh), AllVisible{},
                     model.attention_scale());
      auto pc = sdpa(q.middleCols(c, dh), layer.cross_k.middleCols(c, dh), layer.cross_v.middleCols(c, dh),
                     AllVisible{}, model.attention_scale());
      heads.middleCols(c, dh) = lse_merge(ps, pc);
      if (ops) {
        ops->attention += 2 * matmul_flops(1, self_k.rows(), dh) + 2 * matmul_flops(1, cache.context_len, dh);
      }
    }
    x += linear_forward(block.attn.o, heads, proj);
    x += feed_forward(block.ffn, layer_norm_forward(block.norm2, x), ops);
  }
  ++cache.generated_count;
  return output_logits(model, layer_norm_forward(params.generation_norm, x), ops);
}

template <typename Scalar>
Matrix<Scalar> baseline_prefill(const Model<Scalar>& model, CausalCache<Scalar>& cache, const Tokens& prompt,
                                OpCounter* ops) {
  require_arch(model, Arch::DecoderOnly, "baseline_prefill");
  if (prompt.empty()) throw Error(Errc::ShapeMismatch, "prefill needs at least one token");
  if (cache.length() != 0) throw Error(Errc::ShapeMismatch, "prefill into a non-empty cache");
  const Matrix<Scalar> out = causal_extend(model, cache, prompt, ops);
  return output_logits(model, Matrix<Scalar>(out.bottomRows(1)), ops);
}

template <typename Scalar>
Matrix<Scalar> baseline_decode_step(const Model<Scalar>& model, CausalCache<Scalar>& cache, TokenId token,
                                    OpCounter* ops) {
  require_arch(model, Arch::DecoderOnly, "baseline_decode_step");
  if (cache.length() >= model.config().max_seq_len) {
    throw Error(Errc::CacheExhausted, "position " + std::to_string(cache.length()) + " reaches max_seq_len " +
                                          std::to_string(model.config().max_seq_len));
  }
  return output_logits(model, causal_extend(model, cache, Tokens{token}, ops), ops);
}

TokenId sample_token(std::span<const double> logits, const SamplerSpec& sampler, std::mt19937_64& rng) {
  if (logits.empty()) throw Error(Errc::ShapeMismatch, "no logits to sample from");
  const auto best = std::max_element(logits.begin(), logits.end());
  if (sampler.temperature <= 0.0) return static_cast<TokenId>(best - logits.begin());
  std::vector<double> weights(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    weights[i] = std::exp((logits[i] - *best) / sampler.temperature);
    total += weights[i];
  }
  const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(best - logits.begin());
}

namespace {

template <typename Scalar>
TokenId pick(const Matrix<Scalar>& logits, const SamplerSpec& sampler, std::mt19937_64& rng) {
  std::vector<double> row(static_cast<std::size_t>(logits.cols()));
  for (Index i = 0; i < logits.cols(); ++i) row[static_cast<std::size_t>(i)] = static_cast<double>(logits(0, i));
  return sample_token(row, sampler, rng);
}

}  // namespace

template <typename Scalar>
GenerationReport generate(const Model<Scalar>& model, const Tokens& prompt, Index max_new,
                          const SamplerSpec& sampler, std::uint64_t seed, Index bytes_per_value,
                          const PrefixCache<Scalar>* prefix, PrefixCache<Scalar>* prefix_out) {
  const auto start = std::chrono::steady_clock::now();
  if (max_new < 0) throw Error(Errc::OutOfRange, "max_new must be non-negative");
  std::mt19937_64 rng(seed);
  GenerationReport report;
  std::uint64_t step_ops = 0;
  auto finish = [&](Index steps) {
    report.decode_steps = steps;
    report.per_token_ops = steps > 0 ? step_ops / static_cast<std::uint64_t>(steps) : 0;
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  auto done = [&](TokenId token) {
    report.tokens.push_back(token);
    return static_cast<Index>(report.tokens.size()) >= max_new ||
           (sampler.stop_at_eos && token == ByteTokenizer::kEos);
  };

  if (model.config().arch == Arch::DoubleDecoder) {
    if (prompt.size() < 2) throw Error(Errc::ShapeMismatch, "the double decoder needs a prompt of at least 2 tokens");
    const Tokens context(prompt.begin(), prompt.end() - 1);
    OpCounter ctx_ops;
    auto ctx = context_phase(model, context, prefix, &ctx_ops);
    report.context_ops = ctx_ops.total();
    report.context_len = ctx.cache.context_len;
    report.new_context_tokens = ctx.new_tokens;
    if (prefix_out) *prefix_out = ctx.prefix;
    TokenId next = prompt.back();
    Index steps = 0;
    while (max_new > 0) {
      OpCounter ops;
      const Matrix<Scalar> logits = decode_step(model, ctx.cache, next, ctx.cache.next_position(), &ops);
      if (steps == 0) report.ttft_ops = report.context_ops + ops.total();
      step_ops += ops.total();
      ++steps;
      next = pick(logits, sampler, rng);
      if (done(next)) break;
    }
    report.kv_bytes = kv_bytes(ctx.cache, bytes_per_value);
    finish(steps);
    return report;
  }

  if (prompt.empty()) throw Error(Errc::ShapeMismatch, "empty prompt");
  if (prefix) throw Error(Errc::InvalidConfig, "prefix caches apply to the double decoder only");
  CausalCache<Scalar> cache;
  OpCounter prefill_ops;
  Matrix<Scalar> logits = baseline_prefill(model, cache, prompt, &prefill_ops);
  report.context_ops = prefill_ops.total();
  report.ttft_ops = report.context_ops;
  report.context_len = static_cast<Index>(prompt.size());
  report.new_context_tokens = report.context_len;
  Index steps = 0;
  if (max_new > 0) {
    TokenId next = pick(logits, sampler, rng);
    while (!done(next)) {
      OpCounter ops;
      logits = baseline_decode_step(model, cache, next, &ops);
      step_ops += ops.total();
      ++steps;
      next = pick(logits, sampler, rng);
    }
  }
  report.kv_bytes = kv_bytes(cache, bytes_per_value);
  finish(steps);
  return report;
}

std::uint64_t kv_bytes_decoder_only(Index d, Index bytes_per_value, Index layers, Index t_in, Index t_out) {
  return 2ull * static_cast<std::uint64_t>(d) * static_cast<std::uint64_t>(bytes_per_value) *
         static_cast<std::uint64_t>(layers) * static_cast<std::uint64_t>(t_in + t_out);
}

std::uint64_t kv_bytes_dual_stack(Index d, Index bytes_per_value, Index generation_layers, Index t_in,
                                  Index t_out) {
  return kv_bytes_decoder_only(d, bytes_per_value, generation_layers, t_in, t_out);
}

KvBytes kv_bytes(const ModelConfig& cfg, Index bytes_per_value, Index t_in, Index t_out) {
  const Index total_layers =
      cfg.arch == Arch::DoubleDecoder ? cfg.context_layers + cfg.generation_layers : cfg.layers;
  KvBytes out;
  out.decoder_only = kv_bytes_decoder_only(cfg.d, bytes_per_value, total_layers, t_in, t_out);
  out.dual_stack = kv_bytes_dual_stack(cfg.d, bytes_per_value, cfg.generation_layers, t_in, t_out);
  out.ratio = static_cast<double>(cfg.generation_layers) / static_cast<double>(total_layers);
  return out;
}

#define DDEC_INSTANTIATE(S)                                                                              \
  template struct CausalCache<S>;                                                                        \
  template struct GenKVCache<S>;                                                                         \
  template Matrix<S> causal_extend(const Model<S>&, CausalCache<S>&, const Tokens&, OpCounter*);       \
  template PrefixCache<S> build_prefix_cache(const Model<S>&, const Tokens&, OpCounter*);              \
  template ContextPhaseResult<S> context_phase(const Model<S>&, const Tokens&, const PrefixCache<S>*,   \
                                               OpCounter*);                                              \
  template Matrix<S> decode_step(const Model<S>&, GenKVCache<S>&, TokenId, Index, OpCounter*);         \
  template Matrix<S> baseline_prefill(const Model<S>&, CausalCache<S>&, const Tokens&, OpCounter*);    \
  template Matrix<S> baseline_decode_step(const Model<S>&, CausalCache<S>&, TokenId, OpCounter*);      \
  template GenerationReport generate(const Model<S>&, const Tokens&, Index, const SamplerSpec&,        \
                                     std::uint64_t, Index, const PrefixCache<S>*, PrefixCache<S>*);

DDEC_INSTANTIATE(float)
DDEC_INSTANTIATE(double)

#undef DDEC_INSTANTIATE

}  // namespace ddec
