#include "ddec/model.hpp"

namespace ddec {
namespace {

template <typename Scalar>
void check_tokens(const Model<Scalar>& model, const Tokens& tokens) {
  const auto& cfg = model.config();
  if (tokens.empty()) throw Error(Errc::ShapeMismatch, "empty token sequence");
  if (static_cast<Index>(tokens.size()) > cfg.max_seq_len) {
    throw Error(Errc::SeqTooLong, std::to_string(tokens.size()) + " tokens exceed max_seq_len " +
                                      std::to_string(cfg.max_seq_len));
  }
  for (const TokenId id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw Error(Errc::IdOutOfRange, "token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

template <typename Scalar>
Matrix<Scalar> causal_block_forward(const Model<Scalar>& model, const DecoderBlock<Scalar>& block,
                                    Matrix<Scalar> x, DecoderBlockTape<Scalar>* tape, OpCounter* ops) {
  const auto& cfg = model.config();
  const Index T = x.rows();
  const Index dh = cfg.head_dim;
  std::uint64_t* proj = ops ? &ops->projection : nullptr;

  LayerNormCache<Scalar> ln1;
  Matrix<Scalar> a = layer_norm_forward(block.norm1, x, tape ? &ln1 : nullptr);
  Matrix<Scalar> q = linear_forward(block.attn.q, a, proj);
  Matrix<Scalar> k = linear_forward(block.attn.k, a, proj);
  Matrix<Scalar> v = linear_forward(block.attn.v, a, proj);
  model.rotary().apply(q, 0);
  model.rotary().apply(k, 0);

  Matrix<Scalar> heads(T, cfg.d);
  std::vector<Matrix<Scalar>> probs(tape ? static_cast<std::size_t>(cfg.n_heads()) : 0);
  std::vector<Matrix<Scalar>> head_out(probs.size());
  for (Index h = 0; h < cfg.n_heads(); ++h) {
    auto part = sdpa(q.middleCols(h * dh, dh), k.middleCols(h * dh, dh), v.middleCols(h * dh, dh),
                     CausalPredicate{}, model.attention_scale(),
                     tape ? &probs[static_cast<std::size_t>(h)] : nullptr);
    if (ops) ops->attention += 2 * matmul_flops(T, T, dh);
    heads.middleCols(h * dh, dh) = part.output;
    if (tape) head_out[static_cast<std::size_t>(h)] = std::move(part.output);
  }
  Matrix<Scalar> x_mid = x + linear_forward(block.attn.o, heads, proj);

  LayerNormCache<Scalar> ln2;
  Matrix<Scalar> b = layer_norm_forward(block.norm2, x_mid, tape ? &ln2 : nullptr);
  std::uint64_t* ffn_ops = ops ? &ops->ffn : nullptr;
  Matrix<Scalar> u = linear_forward(block.ffn.up, b, ffn_ops);
  Matrix<Scalar> g = gelu_forward(u);
  Matrix<Scalar> y = x_mid + linear_forward(block.ffn.down, g, ffn_ops);

  if (tape) {
    *tape = {std::move(x), std::move(ln1), std::move(a), std::move(q), std::move(k), std::move(v),
             std::move(probs), std::move(head_out), std::move(heads), std::move(x_mid),
             std::move(ln2), std::move(b), std::move(u), std::move(g)};
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> causal_block_backward(const Model<Scalar>& model, const DecoderBlock<Scalar>& block,
                                     const DecoderBlockTape<Scalar>& t, const Matrix<Scalar>& dy,
                                     DecoderBlock<Scalar>& grad) {
  const auto& cfg = model.config();
  const Index dh = cfg.head_dim;
  const Index T = dy.rows();

  Matrix<Scalar> dg = linear_backward(block.ffn.down, t.g, dy, grad.ffn.down);
  Matrix<Scalar> du = gelu_backward(t.u, dg);
  Matrix<Scalar> db = linear_backward(block.ffn.up, t.b, du, grad.ffn.up);
  Matrix<Scalar> dx_mid = dy + layer_norm_backward(block.norm2, t.ln2, db, grad.norm2);

  Matrix<Scalar> d_heads = linear_backward(block.attn.o, t.heads, dx_mid, grad.attn.o);
  Matrix<Scalar> dq(T, cfg.d), dk(T, cfg.d), dv(T, cfg.d);
  const Vector<Scalar> no_lse;
  for (Index h = 0; h < cfg.n_heads(); ++h) {
    const auto hi = static_cast<std::size_t>(h);
    auto g = sdpa_backward(t.q.middleCols(h * dh, dh), t.k.middleCols(h * dh, dh),
                           t.v.middleCols(h * dh, dh), t.probs[hi], t.head_out[hi],
                           Matrix<Scalar>(d_heads.middleCols(h * dh, dh)), no_lse,
                           model.attention_scale());
    dq.middleCols(h * dh, dh) = g.dq;
    dk.middleCols(h * dh, dh) = g.dk;
    dv.middleCols(h * dh, dh) = g.dv;
  }
  model.rotary().apply(dq, 0, true);
  model.rotary().apply(dk, 0, true);
  Matrix<Scalar> da = linear_backward(block.attn.q, t.a, dq, grad.attn.q);
  da += linear_backward(block.attn.k, t.a, dk, grad.attn.k);
  da += linear_backward(block.attn.v, t.a, dv, grad.attn.v);
  return dx_mid + layer_norm_backward(block.norm1, t.ln1, da, grad.norm1);
}

template <typename Scalar>
Matrix<Scalar> generation_block_forward(const Model<Scalar>& model,
                                        const GenerationBlock<Scalar>& block, Matrix<Scalar> x,
                                        const Matrix<Scalar>& latents, const AttentionMaskPair& masks,
                                        GenerationBlockTape<Scalar>* tape, OpCounter* ops) {
  const auto& cfg = model.config();
  const Index T = x.rows();
  const Index dh = cfg.head_dim;
  const auto n_heads = static_cast<std::size_t>(cfg.n_heads());
  std::uint64_t* proj = ops ? &ops->projection : nullptr;

  LayerNormCache<Scalar> ln1;
  Matrix<Scalar> a = layer_norm_forward(block.norm1, x, tape ? &ln1 : nullptr);
  Matrix<Scalar> q = linear_forward(block.attn.q, a, proj);
  Matrix<Scalar> k_self = linear_forward(block.attn.k_self, a, proj);
  Matrix<Scalar> v_self = linear_forward(block.attn.v_self, a, proj);
  Matrix<Scalar> k_cross = linear_forward(block.attn.k_cross, latents, proj);
  Matrix<Scalar> v_cross = linear_forward(block.attn.v_cross, latents, proj);
  // Latent s sits at absolute position s, like the token it summarizes.
  model.rotary().apply(q, 0);
  model.rotary().apply(k_self, 0);
  model.rotary().apply(k_cross, 0);

  Matrix<Scalar> heads(T, cfg.d);
  std::vector<Matrix<Scalar>> probs_self(tape ? n_heads : 0), probs_cross(tape ? n_heads : 0);
  std::vector<PartialAttention<Scalar>> part_self(tape ? n_heads : 0), part_cross(tape ? n_heads : 0);
  std::vector<Vector<Scalar>> weight_self(tape ? n_heads : 0);
  for (std::size_t hi = 0; hi < n_heads; ++hi) {
    const Index c = static_cast<Index>(hi) * dh;
    auto ps = sdpa(q.middleCols(c, dh), k_self.middleCols(c, dh), v_self.middleCols(c, dh),
                   masks.self_mask, model.attention_scale(), tape ? &probs_self[hi] : nullptr);
    auto pc = sdpa(q.middleCols(c, dh), k_cross.middleCols(c, dh), v_cross.middleCols(c, dh),
                   masks.cross_mask, model.attention_scale(), tape ? &probs_cross[hi] : nullptr);
    if (ops) ops->attention += 4 * matmul_flops(T, T, dh);
    Vector<Scalar> w;
    heads.middleCols(c, dh) = lse_merge(ps, pc, &w);
    if (tape) {
      part_self[hi] = std::move(ps);
      part_cross[hi] = std::move(pc);
      weight_self[hi] = std::move(w);
    }
  }
  Matrix<Scalar> x_mid = x + linear_forward(block.attn.o, heads, proj);

  LayerNormCache<Scalar> ln2;
  Matrix<Scalar> b = layer_norm_forward(block.norm2, x_mid, tape ? &ln2 : nullptr);
  std::uint64_t* ffn_ops = ops ? &ops->ffn : nullptr;
  Matrix<Scalar> u = linear_forward(block.ffn.up, b, ffn_ops);
  Matrix<Scalar> g = gelu_forward(u);
  Matrix<Scalar> y = x_mid + linear_forward(block.ffn.down, g, ffn_ops);

  if (tape) {
    *tape = {std::move(x),          std::move(ln1),        std::move(a),          std::move(q),
             std::move(k_self),     std::move(v_self),     std::move(k_cross),    std::move(v_cross),
             std::move(probs_self), std::move(probs_cross), std::move(part_self), std::move(part_cross),
             std::move(weight_self), std::move(heads),     std::move(x_mid),      std::move(ln2),
             std::move(b),          std::move(u),          std::move(g)};
  }
  return y;
}

// Returns dL/dx; adds dL/dlatents into d_latents.
template <typename Scalar>
Matrix<Scalar> generation_block_backward(const Model<Scalar>& model,
                                         const GenerationBlock<Scalar>& block,
                                         const GenerationBlockTape<Scalar>& t,
                                         const Matrix<Scalar>& latents, const Matrix<Scalar>& dy,
                                         GenerationBlock<Scalar>& grad, Matrix<Scalar>& d_latents) {
  const auto& cfg = model.config();
  const Index dh = cfg.head_dim;
  const Index T = dy.rows();

  Matrix<Scalar> dg = linear_backward(block.ffn.down, t.g, dy, grad.ffn.down);
  Matrix<Scalar> du = gelu_backward(t.u, dg);
  Matrix<Scalar> db = linear_backward(block.ffn.up, t.b, du, grad.ffn.up);
  Matrix<Scalar> dx_mid = dy + layer_norm_backward(block.norm2, t.ln2, db, grad.norm2);

  Matrix<Scalar> d_heads = linear_backward(block.attn.o, t.heads, dx_mid, grad.attn.o);
  Matrix<Scalar> dq(T, cfg.d), dks(T, cfg.d), dvs(T, cfg.d), dkc(T, cfg.d), dvc(T, cfg.d);
  for (Index h = 0; h < cfg.n_heads(); ++h) {
    const auto hi = static_cast<std::size_t>(h);
    const Index c = h * dh;
    const Matrix<Scalar> merged = t.heads.middleCols(c, dh);
    const Matrix<Scalar> d_merged = d_heads.middleCols(c, dh);
    auto mg = lse_merge_backward(t.part_self[hi], t.part_cross[hi], t.weight_self[hi], merged, d_merged);
    auto gs = sdpa_backward(t.q.middleCols(c, dh), t.k_self.middleCols(c, dh),
                            t.v_self.middleCols(c, dh), t.probs_self[hi], t.part_self[hi].output,
                            mg.d_output_a, mg.d_lse_a, model.attention_scale());
    auto gc = sdpa_backward(t.q.middleCols(c, dh), t.k_cross.middleCols(c, dh),
                            t.v_cross.middleCols(c, dh), t.probs_cross[hi], t.part_cross[hi].output,
                            mg.d_output_b, mg.d_lse_b, model.attention_scale());
    dq.middleCols(c, dh) = gs.dq + gc.dq;
    dks.middleCols(c, dh) = gs.dk;
    dvs.middleCols(c, dh) = gs.dv;
    dkc.middleCols(c, dh) = gc.dk;
    dvc.middleCols(c, dh) = gc.dv;
  }
  model.rotary().apply(dq, 0, true);
  model.rotary().apply(dks, 0, true);
  model.rotary().apply(dkc, 0, true);
  Matrix<Scalar> da = linear_backward(block.attn.q, t.a, dq, grad.attn.q);
  da += linear_backward(block.attn.k_self, t.a, dks, grad.attn.k_self);
  da += linear_backward(block.attn.v_self, t.a, dvs, grad.attn.v_self);
  d_latents += linear_backward(block.attn.k_cross, latents, dkc, grad.attn.k_cross);
  d_latents += linear_backward(block.attn.v_cross, latents, dvc, grad.attn.v_cross);
  return dx_mid + layer_norm_backward(block.norm1, t.ln1, da, grad.norm1);
}

template <typename Scalar>
Matrix<Scalar> causal_stack_forward(const Model<Scalar>& model, const Tokens& tokens,
                                    ForwardTape<Scalar>* tape, OpCounter* ops) {
  check_tokens(model, tokens);
  const auto& params = model.params();
  Matrix<Scalar> x = embed(model, tokens);
  if (tape) {
    tape->tokens = tokens;
    tape->has_causal = true;
    tape->causal.resize(params.causal.size());
  }
  for (std::size_t i = 0; i < params.causal.size(); ++i) {
    x = causal_block_forward(model, params.causal[i], std::move(x), tape ? &tape->causal[i] : nullptr, ops);
  }
  Matrix<Scalar> out = layer_norm_forward(params.causal_norm, x, tape ? &tape->causal_norm : nullptr);
  if (tape) tape->causal_out = out;
  return out;
}

template <typename Scalar>
Matrix<Scalar> generation_stack_forward(const Model<Scalar>& model, const Tokens& tokens,
                                        const Matrix<Scalar>& latents, const BlockPartition& partition,
                                        ForwardTape<Scalar>* tape, OpCounter* ops) {
  check_tokens(model, tokens);
  const Index T = static_cast<Index>(tokens.size());
  if (partition.seq_len() != T || latents.rows() != T || latents.cols() != model.config().d) {
    throw Error(Errc::ShapeMismatch, "generation decoder: tokens, latents and partition disagree");
  }
  const auto& params = model.params();
  if (params.generation.empty()) {
    throw Error(Errc::InvalidConfig, "model has no generation decoder");
  }
  const AttentionMaskPair masks = block_masks(partition);
  Matrix<Scalar> x = embed(model, tokens);
  if (tape) {
    tape->tokens = tokens;
    tape->has_generation = true;
    tape->generation.resize(params.generation.size());
    tape->latents = latents;
  }
  for (std::size_t i = 0; i < params.generation.size(); ++i) {
    x = generation_block_forward(model, params.generation[i], std::move(x), latents, masks,
                                 tape ? &tape->generation[i] : nullptr, ops);
  }
  Matrix<Scalar> out =
      layer_norm_forward(params.generation_norm, x, tape ? &tape->generation_norm : nullptr);
  Matrix<Scalar> logits = output_logits(model, out, ops);
  if (tape) tape->generation_out = std::move(out);
  return logits;
}

template <typename Scalar>
void head_backward(const Model<Scalar>& model, const Matrix<Scalar>& normed,
                   const Matrix<Scalar>& d_logits, ModelParams<Scalar>& grads, Matrix<Scalar>& d_normed) {
  const Scalar mult = static_cast<Scalar>(model.config().logit_multiplier());
  d_normed.noalias() = mult * (d_logits * model.params().embedding);
  grads.embedding.noalias() += mult * (d_logits.transpose() * normed);
}

template <typename Scalar>
void embedding_backward(const Tokens& tokens, const Matrix<Scalar>& dx, ModelParams<Scalar>& grads) {
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    grads.embedding.row(tokens[t]) += dx.row(static_cast<Index>(t));
  }
}

}  // namespace

template <typename Scalar>
Model<Scalar>::Model(ModelConfig config, ModelParams<Scalar> params)
    : config_(std::move(config)),
      params_(std::move(params)),
      rotary_(config_.max_seq_len, config_.head_dim, config_.rope_base) {
  config_.validate();
  if (params_.embedding.rows() != config_.vocab_size || params_.embedding.cols() != config_.d ||
      static_cast<Index>(params_.causal.size()) != config_.causal_layers() ||
      (config_.arch == Arch::DoubleDecoder &&
       static_cast<Index>(params_.generation.size()) != config_.generation_layers) ||
      (config_.arch == Arch::DecoderOnly && !params_.generation.empty())) {
    throw Error(Errc::ShapeMismatch, "parameters do not match the model configuration");
  }
}

template <typename Scalar>
Matrix<Scalar> embed(const Model<Scalar>& model, const Tokens& tokens) {
  const auto& table = model.params().embedding;
  Matrix<Scalar> x(static_cast<Index>(tokens.size()), table.cols());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || tokens[t] >= table.rows()) {
      throw Error(Errc::IdOutOfRange, "token id " + std::to_string(tokens[t]) + " outside vocabulary");
    }
    x.row(static_cast<Index>(t)) = table.row(tokens[t]);
  }
  return x;
}

template <typename Scalar>
Matrix<Scalar> feed_forward(const FeedForward<Scalar>& ffn, const Matrix<Scalar>& x, OpCounter* ops) {
  std::uint64_t* ffn_ops = ops ? &ops->ffn : nullptr;
  return linear_forward(ffn.down, gelu_forward(linear_forward(ffn.up, x, ffn_ops)), ffn_ops);
}

template <typename Scalar>
Matrix<Scalar> output_logits(const Model<Scalar>& model, const Matrix<Scalar>& normed, OpCounter* ops) {
  const auto& table = model.params().embedding;
  Matrix<Scalar> logits(normed.rows(), table.rows());
  logits.noalias() = normed * table.transpose();
  logits *= static_cast<Scalar>(model.config().logit_multiplier());
  if (ops) ops->head += matmul_flops(normed.rows(), table.rows(), table.cols());
  return logits;
}

template <typename Scalar>
Matrix<Scalar> decoder_only_forward(const Model<Scalar>& model, const Tokens& tokens,
                                    ForwardTape<Scalar>* tape, OpCounter* ops) {
  if (model.config().arch != Arch::DecoderOnly) {
    throw Error(Errc::InvalidConfig, "decoder_only_forward on a double-decoder model");
  }
  if (tape) *tape = {};
  Matrix<Scalar> out = causal_stack_forward(model, tokens, tape, ops);
  return output_logits(model, out, ops);
}

template <typename Scalar>
ContextLatents<Scalar> context_decoder_forward(const Model<Scalar>& model, const Tokens& tokens,
                                               ForwardTape<Scalar>* tape, OpCounter* ops) {
  if (model.config().arch != Arch::DoubleDecoder) {
    throw Error(Errc::InvalidConfig, "context decoder requested from a decoder-only model");
  }
  if (tape) *tape = {};
  return {causal_stack_forward(model, tokens, tape, ops)};
}

template <typename Scalar>
Matrix<Scalar> generation_decoder_forward(const Model<Scalar>& model, const Tokens& tokens,
                                          const ContextLatents<Scalar>& latents,
                                          const BlockPartition& partition, ForwardTape<Scalar>* tape,
                                          OpCounter* ops) {
  if (tape) *tape = {};
  return generation_stack_forward(model, tokens, latents.h, partition, tape, ops);
}

template <typename Scalar>
Matrix<Scalar> double_decoder_forward(const Model<Scalar>& model, const Tokens& tokens,
                                      const BlockPartition& partition, ForwardTape<Scalar>* tape,
                                      OpCounter* ops) {
  if (model.config().arch != Arch::DoubleDecoder) {
    throw Error(Errc::InvalidConfig, "double_decoder_forward on a decoder-only model");
  }
  if (tape) *tape = {};
  const Matrix<Scalar> latents = causal_stack_forward(model, tokens, tape, ops);
  return generation_stack_forward(model, tokens, latents, partition, tape, ops);
}

template <typename Scalar>
Matrix<Scalar> forward(const Model<Scalar>& model, const Tokens& tokens,
                       const BlockPartition& partition, ForwardTape<Scalar>* tape, OpCounter* ops) {
  if (model.config().arch == Arch::DecoderOnly) return decoder_only_forward(model, tokens, tape, ops);
  return double_decoder_forward(model, tokens, partition, tape, ops);
}

template <typename Scalar>
std::optional<Matrix<Scalar>> backward(const Model<Scalar>& model, const ForwardTape<Scalar>& tape,
                                       const Matrix<Scalar>& d_logits, ModelParams<Scalar>& grads) {
  const auto& params = model.params();
  Matrix<Scalar> d_causal_out;

  if (tape.has_generation) {
    Matrix<Scalar> d_normed;
    head_backward(model, tape.generation_out, d_logits, grads, d_normed);
    Matrix<Scalar> dx = layer_norm_backward(params.generation_norm, tape.generation_norm, d_normed,
                                            grads.generation_norm);
    Matrix<Scalar> d_latents = Matrix<Scalar>::Zero(tape.latents.rows(), tape.latents.cols());
    for (std::size_t i = params.generation.size(); i-- > 0;) {
      dx = generation_block_backward(model, params.generation[i], tape.generation[i], tape.latents, dx,
                                     grads.generation[i], d_latents);
    }
    embedding_backward(tape.tokens, dx, grads);
    if (!tape.has_causal) return d_latents;
    d_causal_out = std::move(d_latents);
  } else {
    head_backward(model, tape.causal_out, d_logits, grads, d_causal_out);
  }

  Matrix<Scalar> dx =
      layer_norm_backward(params.causal_norm, tape.causal_norm, d_causal_out, grads.causal_norm);
  for (std::size_t i = params.causal.size(); i-- > 0;) {
    dx = causal_block_backward(model, params.causal[i], tape.causal[i], dx, grads.causal[i]);
  }
  embedding_backward(tape.tokens, dx, grads);
  return std::nullopt;
}

std::vector<MatmulShape> causal_layer_matmuls(const ModelConfig& cfg, Index seq_len) {
  const Index T = seq_len;
  const Index d = cfg.d;
  const Index heads = cfg.n_heads();
  return {
      {"attn.q", T, d, d},
      {"attn.k", T, d, d},
      {"attn.v", T, d, d},
      {"attn.scores", T, T, cfg.head_dim, heads, true, false},
      {"attn.values", T, cfg.head_dim, T, heads, true, false},
      {"attn.o", T, d, d},
      {"ffn.up", T, cfg.ffn_width(), d},
      {"ffn.down", T, d, cfg.ffn_width()},
  };
}

std::vector<MatmulShape> generation_layer_matmuls(const ModelConfig& cfg, Index seq_len) {
  const Index T = seq_len;
  const Index d = cfg.d;
  const Index heads = cfg.n_heads();
  return {
      {"attn.q", T, d, d},
      {"attn.k_self", T, d, d},
      {"attn.v_self", T, d, d},
      {"attn.k_cross", T, d, d},
      {"attn.v_cross", T, d, d},
      {"attn.self_scores", T, T, cfg.head_dim, heads, true, false},
      {"attn.self_values", T, cfg.head_dim, T, heads, true, false},
      {"attn.cross_scores", T, T, cfg.head_dim, heads, true, true},
      {"attn.cross_values", T, cfg.head_dim, T, heads, true, true},
      {"attn.o", T, d, d},
      {"ffn.up", T, cfg.ffn_width(), d},
      {"ffn.down", T, d, cfg.ffn_width()},
  };
}

#define DDEC_INSTANTIATE(S)                                                                          \
  template class Model<S>;                                                                           \
  template Matrix<S> decoder_only_forward(const Model<S>&, const Tokens&, ForwardTape<S>*,          \
                                          OpCounter*);                                               \
  template ContextLatents<S> context_decoder_forward(const Model<S>&, const Tokens&,                \
                                                     ForwardTape<S>*, OpCounter*);                   \
  template Matrix<S> generation_decoder_forward(const Model<S>&, const Tokens&,                     \
                                                const ContextLatents<S>&, const BlockPartition&,    \
                                                ForwardTape<S>*, OpCounter*);                        \
  template Matrix<S> double_decoder_forward(const Model<S>&, const Tokens&, const BlockPartition&,  \
                                            ForwardTape<S>*, OpCounter*);                            \
  template Matrix<S> forward(const Model<S>&, const Tokens&, const BlockPartition&,                 \
                             ForwardTape<S>*, OpCounter*);                                           \
  template std::optional<Matrix<S>> backward(const Model<S>&, const ForwardTape<S>&,                \
                                             const Matrix<S>&, ModelParams<S>&);                     \
  template Matrix<S> embed(const Model<S>&, const Tokens&);                                         \
  template Matrix<S> feed_forward(const FeedForward<S>&, const Matrix<S>&, OpCounter*);             \
  template Matrix<S> output_logits(const Model<S>&, const Matrix<S>&, OpCounter*);

DDEC_INSTANTIATE(float)
DDEC_INSTANTIATE(double)

#undef DDEC_INSTANTIATE

}  // namespace ddec
