#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ddec/attention.hpp"
#include "ddec/config.hpp"
#include "ddec/layers.hpp"
#include "ddec/masks.hpp"
#include "ddec/params.hpp"
#include "ddec/partition.hpp"

namespace ddec {

/// Parameters plus the derived rotary tables for one configuration.
template <typename Scalar>
class Model {
 public:
  Model(ModelConfig config, ModelParams<Scalar> params);

  static Model initialized(const ModelConfig& config, std::uint64_t seed) {
    return Model(config, init_params<Scalar>(config, seed));
  }

  const ModelConfig& config() const noexcept { return config_; }
  const ModelParams<Scalar>& params() const noexcept { return params_; }
  ModelParams<Scalar>& params() noexcept { return params_; }
  const RotaryTable<Scalar>& rotary() const noexcept { return rotary_; }
  Scalar attention_scale() const { return default_attention_scale<Scalar>(config_.head_dim); }

 private:
  ModelConfig config_;
  ModelParams<Scalar> params_;
  RotaryTable<Scalar> rotary_;
};

/// Final-layer context-decoder states h_t, one row per token.
template <typename Scalar>
struct ContextLatents {
  Matrix<Scalar> h;
};

template <typename Scalar>
struct DecoderBlockTape {
  Matrix<Scalar> x;
  LayerNormCache<Scalar> ln1;
  Matrix<Scalar> a;
  Matrix<Scalar> q, k, v;  // q and k after rotation
  std::vector<Matrix<Scalar>> probs;
  std::vector<Matrix<Scalar>> head_out;
  Matrix<Scalar> heads;  // concatenated head outputs, input of the o projection
  Matrix<Scalar> x_mid;
  LayerNormCache<Scalar> ln2;
  Matrix<Scalar> b;
  Matrix<Scalar> u;  // FFN pre-activation
  Matrix<Scalar> g;  // FFN activation
};

template <typename Scalar>
struct GenerationBlockTape {
  Matrix<Scalar> x;
  LayerNormCache<Scalar> ln1;
  Matrix<Scalar> a;
  Matrix<Scalar> q, k_self, v_self, k_cross, v_cross;
  std::vector<Matrix<Scalar>> probs_self, probs_cross;
  std::vector<PartialAttention<Scalar>> part_self, part_cross;
  std::vector<Vector<Scalar>> weight_self;
  Matrix<Scalar> heads;  // merged per-head outputs
  Matrix<Scalar> x_mid;
  LayerNormCache<Scalar> ln2;
  Matrix<Scalar> b;
  Matrix<Scalar> u;
  Matrix<Scalar> g;
};

/// Activations recorded by a forward pass for backward().
template <typename Scalar>
struct ForwardTape {
  Tokens tokens;
  bool has_causal = false;
  bool has_generation = false;
  std::vector<DecoderBlockTape<Scalar>> causal;
  LayerNormCache<Scalar> causal_norm;
  Matrix<Scalar> causal_out;  // normed output of the causal stack (context latents or head input)
  std::vector<GenerationBlockTape<Scalar>> generation;
  LayerNormCache<Scalar> generation_norm;
  Matrix<Scalar> generation_out;
  Matrix<Scalar> latents;  // latents consumed by the generation stack
};

/// Standard causal stack of L blocks, tied head, logit multiplier.
template <typename Scalar>
Matrix<Scalar> decoder_only_forward(const Model<Scalar>& model, const Tokens& tokens,
                                    ForwardTape<Scalar>* tape = nullptr, OpCounter* ops = nullptr);

/// L_enc causal blocks and a final norm; no output head.
template <typename Scalar>
ContextLatents<Scalar> context_decoder_forward(const Model<Scalar>& model, const Tokens& tokens,
                                               ForwardTape<Scalar>* tape = nullptr,
                                               OpCounter* ops = nullptr);

/// L_dec dual-key blocks over the token stream, attending within-block to its
/// own states and across blocks to `latents`; returns T x vocab logits.
template <typename Scalar>
Matrix<Scalar> generation_decoder_forward(const Model<Scalar>& model, const Tokens& tokens,
                                          const ContextLatents<Scalar>& latents,
                                          const BlockPartition& partition,
                                          ForwardTape<Scalar>* tape = nullptr,
                                          OpCounter* ops = nullptr);

template <typename Scalar>
Matrix<Scalar> double_decoder_forward(const Model<Scalar>& model, const Tokens& tokens,
                                      const BlockPartition& partition,
                                      ForwardTape<Scalar>* tape = nullptr, OpCounter* ops = nullptr);

/// Dispatches on the configured architecture; the partition is ignored by the
/// decoder-only model.
template <typename Scalar>
Matrix<Scalar> forward(const Model<Scalar>& model, const Tokens& tokens,
                       const BlockPartition& partition, ForwardTape<Scalar>* tape = nullptr,
                       OpCounter* ops = nullptr);

/// Reverse pass over a recorded forward. Parameter gradients are accumulated
/// into `grads`. For a tape produced by generation_decoder_forward alone the
/// gradient with respect to the supplied latents is returned.
template <typename Scalar>
std::optional<Matrix<Scalar>> backward(const Model<Scalar>& model, const ForwardTape<Scalar>& tape,
                                       const Matrix<Scalar>& d_logits, ModelParams<Scalar>& grads);

// Building blocks shared with the incremental inference path.

template <typename Scalar>
Matrix<Scalar> embed(const Model<Scalar>& model, const Tokens& tokens);

template <typename Scalar>
Matrix<Scalar> feed_forward(const FeedForward<Scalar>& ffn, const Matrix<Scalar>& x, OpCounter* ops);

/// Tied output projection of normed hidden states, times sqrt(d0/d).
template <typename Scalar>
Matrix<Scalar> output_logits(const Model<Scalar>& model, const Matrix<Scalar>& normed, OpCounter* ops);

/// One matmul the forward pass executes per layer, repeated `count` times
/// (once per head for attention products).
struct MatmulShape {
  std::string name;
  Index m = 0;
  Index n = 0;
  Index k = 0;
  Index count = 1;
  bool attention = false;
  bool cross_attention = false;  // second SDPA of a dual-key layer
};

std::vector<MatmulShape> causal_layer_matmuls(const ModelConfig& cfg, Index seq_len);
std::vector<MatmulShape> generation_layer_matmuls(const ModelConfig& cfg, Index seq_len);

}  // namespace ddec
