#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddec/config.hpp"
#include "ddec/layers.hpp"

namespace ddec {

template <typename Scalar>
struct SelfAttentionWeights {
  Linear<Scalar> q, k, v, o;
};

/// Shared-query dual-key attention: one query projection, separate key/value
/// projections for within-block hidden states and for context latents.
template <typename Scalar>
struct DualAttentionWeights {
  Linear<Scalar> q, k_self, v_self, k_cross, v_cross, o;
};

template <typename Scalar>
struct FeedForward {
  Linear<Scalar> up, down;
};

template <typename Scalar>
struct DecoderBlock {
  LayerNorm<Scalar> norm1;
  SelfAttentionWeights<Scalar> attn;
  LayerNorm<Scalar> norm2;
  FeedForward<Scalar> ffn;
};

template <typename Scalar>
struct GenerationBlock {
  LayerNorm<Scalar> norm1;
  DualAttentionWeights<Scalar> attn;
  LayerNorm<Scalar> norm2;
  FeedForward<Scalar> ffn;
};

/// All trainable tensors. `causal` is the decoder-only stack or the context
/// decoder; `causal_norm` is its final norm (producing logits input or context
/// latents). The generation stack is empty for the decoder-only model.
/// `embedding` (vocab x d) doubles as the transposed output projection.
template <typename Scalar>
struct ModelParams {
  Matrix<Scalar> embedding;
  std::vector<DecoderBlock<Scalar>> causal;
  LayerNorm<Scalar> causal_norm;
  std::vector<GenerationBlock<Scalar>> generation;
  LayerNorm<Scalar> generation_norm;
};

template <typename Scalar>
struct NamedParam {
  std::string name;
  Matrix<Scalar>* value;
};

template <typename Scalar>
struct ConstNamedParam {
  std::string name;
  const Matrix<Scalar>* value;
};

/// Every tensor in a fixed order, named like "causal.3.attn.q.weight".
template <typename Scalar>
std::vector<NamedParam<Scalar>> parameter_list(ModelParams<Scalar>& params);

template <typename Scalar>
std::vector<ConstNamedParam<Scalar>> parameter_list(const ModelParams<Scalar>& params);

/// Names in parameter_list order, without allocating tensors.
std::vector<std::string> parameter_names(const ModelConfig& cfg);

/// Xavier-uniform matrices (embedding included), zero biases, unit norm gains.
template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Correctly shaped tensors, zero matrices and biases, unit norm gains.
template <typename Scalar>
ModelParams<Scalar> zero_params(const ModelConfig& cfg);

/// Same structure as `like`, every entry zero.
template <typename Scalar>
ModelParams<Scalar> zeros_like(const ModelParams<Scalar>& like);

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& params);

/// Closed-form parameter census; agrees with summing parameter_list sizes.
std::int64_t parameter_count(const ModelConfig& cfg);

/// Matmul weights outside the embedding, the N of the 6NT heuristic.
std::int64_t non_embedding_matmul_params(const ModelConfig& cfg);

}  // namespace ddec
