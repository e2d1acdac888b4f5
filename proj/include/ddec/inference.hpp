#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "ddec/model.hpp"

namespace ddec {

/// Append-only row storage (rows x width, row-major) whose footprint is
/// exactly the live rows.
template <typename Scalar>
class RowCache {
 public:
  using ConstMap = Eigen::Map<const Matrix<Scalar>>;

  RowCache() = default;
  explicit RowCache(Index width) : width_(width) {}
  RowCache(const Matrix<Scalar>& rows) : width_(rows.cols()) { append(rows); }

  template <typename Derived>
  void append(const Eigen::MatrixBase<Derived>& rows) {
    if (rows.cols() != width_) throw Error(Errc::ShapeMismatch, "cache row width mismatch");
    for (Index r = 0; r < rows.rows(); ++r) {
      for (Index c = 0; c < width_; ++c) data_.push_back(rows(r, c));
    }
  }

  Index rows() const noexcept { return width_ == 0 ? 0 : static_cast<Index>(data_.size()) / width_; }
  Index width() const noexcept { return width_; }
  std::size_t elements() const noexcept { return data_.size(); }
  ConstMap view() const { return ConstMap(data_.data(), rows(), width_); }

 private:
  Index width_ = 0;
  std::vector<Scalar> data_;
};

/// Rotated keys and values of one causal layer.
template <typename Scalar>
struct LayerKV {
  RowCache<Scalar> k;
  RowCache<Scalar> v;
};

/// Causal-stack state for a token prefix: per-layer K/V plus, for the
/// context decoder, the final latents h of every cached position (the cross
/// keys of the generation decoder are projected from them).
template <typename Scalar>
struct CausalCache {
  Tokens tokens;
  std::vector<LayerKV<Scalar>> layers;
  Matrix<Scalar> latents;  // tokens x d, normed output of the causal stack

  Index length() const noexcept { return static_cast<Index>(tokens.size()); }
  /// K/V values only; latents are not counted.
  std::size_t stored_elements() const;
};

/// Reusable context-decoder state of a fixed prefix.
template <typename Scalar>
using PrefixCache = CausalCache<Scalar>;

/// Generation-decoder cache for one session. Cross K/V are written once by the
/// context phase; self K/V grow by one row per decode step.
template <typename Scalar>
struct GenKVCache {
  struct Layer {
    Matrix<Scalar> cross_k;  // T_in x (n_heads * head_dim), rotated
    Matrix<Scalar> cross_v;
    RowCache<Scalar> self_k;
    RowCache<Scalar> self_v;
  };
  std::vector<Layer> layers;
  Index context_len = 0;
  Index generated_count = 0;

  Index next_position() const noexcept { return context_len + generated_count; }
  std::size_t stored_elements() const;
};

template <typename Scalar>
struct ContextPhaseResult {
  ContextLatents<Scalar> latents;
  GenKVCache<Scalar> cache;
  PrefixCache<Scalar> prefix;  // covers every context token
  Index new_tokens = 0;        // tokens the context decoder actually processed
};

/// Runs the context decoder over `context`, resuming from `prefix` when given,
/// and projects the cross K/V of every generation layer.
/// Throws Errc::PrefixMismatch when prefix->tokens does not start `context`.
template <typename Scalar>
ContextPhaseResult<Scalar> context_phase(const Model<Scalar>& model, const Tokens& context,
                                         const PrefixCache<Scalar>* prefix = nullptr,
                                         OpCounter* ops = nullptr);

/// Feeds `token` at absolute `position` (which must equal
/// cache.next_position()) through the generation decoder as the next member
/// of the response block. Returns 1 x vocab logits.
/// Throws Errc::CacheExhausted once position reaches max_seq_len.
template <typename Scalar>
Matrix<Scalar> decode_step(const Model<Scalar>& model, GenKVCache<Scalar>& cache, TokenId token,
                           Index position, OpCounter* ops = nullptr);

/// Extends a causal cache by `tokens` and returns their normed final states.
template <typename Scalar>
Matrix<Scalar> causal_extend(const Model<Scalar>& model, CausalCache<Scalar>& cache, const Tokens& tokens,
                             OpCounter* ops = nullptr);

/// Decoder-only baseline: prefill returns logits of the last prompt token.
template <typename Scalar>
Matrix<Scalar> baseline_prefill(const Model<Scalar>& model, CausalCache<Scalar>& cache,
                                const Tokens& prompt, OpCounter* ops = nullptr);

template <typename Scalar>
Matrix<Scalar> baseline_decode_step(const Model<Scalar>& model, CausalCache<Scalar>& cache,
                                    TokenId token, OpCounter* ops = nullptr);

/// temperature <= 0 selects greedy decoding.
struct SamplerSpec {
  double temperature = 0.0;
  bool stop_at_eos = false;
};

TokenId sample_token(std::span<const double> logits, const SamplerSpec& sampler, std::mt19937_64& rng);

struct GenerationReport {
  Tokens tokens;                  // newly generated ids
  std::uint64_t context_ops = 0;  // context phase (double decoder) or prefill (decoder-only)
  std::uint64_t ttft_ops = 0;     // every op up to the first token's logits
  std::uint64_t per_token_ops = 0;  // mean over decode steps
  std::uint64_t kv_bytes = 0;     // live cache at the end, at bytes_per_value
  Index context_len = 0;
  Index new_context_tokens = 0;   // context tokens not covered by a prefix cache
  Index decode_steps = 0;
  double seconds = 0.0;
};

/// Prompt layout for the double decoder: prompt[0..n-1) is the context and the
/// last prompt token opens the response block, so the first decode step
/// already yields the first new token. Needs at least two prompt tokens.
/// `prefix_out` receives the context decoder's cache of the whole context.
template <typename Scalar>
GenerationReport generate(const Model<Scalar>& model, const Tokens& prompt, Index max_new,
                          const SamplerSpec& sampler, std::uint64_t seed, Index bytes_per_value = 2,
                          const PrefixCache<Scalar>* prefix = nullptr,
                          PrefixCache<Scalar>* prefix_out = nullptr);

std::uint64_t kv_bytes_decoder_only(Index d, Index bytes_per_value, Index layers, Index t_in, Index t_out);
std::uint64_t kv_bytes_dual_stack(Index d, Index bytes_per_value, Index generation_layers, Index t_in,
                                  Index t_out);

struct KvBytes {
  std::uint64_t decoder_only = 0;
  std::uint64_t dual_stack = 0;
  double ratio = 0.0;  // L_dec / L
};

KvBytes kv_bytes(const ModelConfig& cfg, Index bytes_per_value, Index t_in, Index t_out);

/// Live cache footprint in bytes at the given width per stored value.
template <typename Scalar>
std::uint64_t kv_bytes(const GenKVCache<Scalar>& cache, Index bytes_per_value) {
  return static_cast<std::uint64_t>(cache.stored_elements()) * static_cast<std::uint64_t>(bytes_per_value);
}

/// K/V bytes of a causal cache (latents excluded).
template <typename Scalar>
std::uint64_t kv_bytes(const CausalCache<Scalar>& cache, Index bytes_per_value) {
  return static_cast<std::uint64_t>(cache.stored_elements()) * static_cast<std::uint64_t>(bytes_per_value);
}

/// Builds a prefix cache by running the context decoder over `prefix`.
template <typename Scalar>
PrefixCache<Scalar> build_prefix_cache(const Model<Scalar>& model, const Tokens& prefix,
                                       OpCounter* ops = nullptr);

}  // namespace ddec
