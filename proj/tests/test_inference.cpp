#include <doctest.h>

#include <random>

#include "ddec/inference.hpp"
#include "support/fixtures.hpp"

using namespace ddec;

namespace {

Index argmax(const Matrix<double>& row) {
  Index best = 0;
  row.row(0).maxCoeff(&best);
  return best;
}

}  // namespace

TEST_CASE("cached decoding reproduces the full forward pass") {
  std::mt19937_64 rng(1);
  const auto model = Model<double>::initialized(testing::tiny_config(Arch::DoubleDecoder), 2);
  for (int trial = 0; trial < 5; ++trial) {
    const Index n = 2 + static_cast<Index>(rng() % 10);
    Tokens seq = testing::random_tokens(rng, n);
    const Tokens context(seq.begin(), seq.end() - 1);
    auto ctx = context_phase(model, context);
    TokenId next = seq.back();
    for (int j = 0; j < 8; ++j) {
      const Matrix<double> step = decode_step(model, ctx.cache, next, ctx.cache.next_position());
      const Index T = static_cast<Index>(seq.size());
      const Matrix<double> full = forward(model, seq, BlockPartition::validate({0, n - 1, T}, T));
      CHECK((step - full.bottomRows(1)).cwiseAbs().maxCoeff() < 1e-10);
      next = static_cast<TokenId>(argmax(step));
      seq.push_back(next);
    }
  }
}

TEST_CASE("decoder-only prefill and decode reproduce the full forward pass") {
  std::mt19937_64 rng(2);
  const auto model = Model<double>::initialized(testing::tiny_config(Arch::DecoderOnly), 2);
  Tokens seq = testing::random_tokens(rng, 5);
  CausalCache<double> cache;
  Matrix<double> logits = baseline_prefill(model, cache, seq);
  for (int j = 0; j < 6; ++j) {
    const Matrix<double> full = forward(model, seq, BlockPartition::single(static_cast<Index>(seq.size())));
    CHECK((logits - full.bottomRows(1)).cwiseAbs().maxCoeff() < 1e-10);
    seq.push_back(static_cast<TokenId>(argmax(logits)));
    logits = baseline_decode_step(model, cache, seq.back());
  }
}

TEST_CASE("latents from a cached prefix equal a fresh run") {
  std::mt19937_64 rng(3);
  const auto model = Model<double>::initialized(testing::tiny_config(Arch::DoubleDecoder), 4);
  const Tokens context = testing::random_tokens(rng, 20);
  const Tokens head(context.begin(), context.begin() + 12);
  OpCounter prefix_ops, fresh_ops, suffix_ops;
  const auto prefix = build_prefix_cache(model, head, &prefix_ops);
  const auto fresh = context_phase<double>(model, context, nullptr, &fresh_ops);
  const auto cached = context_phase(model, context, &prefix, &suffix_ops);
  CHECK(cached.new_tokens == 8);
  CHECK(fresh.new_tokens == 20);
  CHECK((cached.latents.h - fresh.latents.h).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((cached.latents.h - context_decoder_forward(model, context).h).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(suffix_ops.total() < fresh_ops.total());
  CHECK(cached.prefix.length() == 20);

  Tokens other = context;
  other[3] ^= 1;
  try {
    context_phase(model, other, &prefix);
    FAIL("mismatched prefix accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::PrefixMismatch);
  }
}

TEST_CASE("cache footprint is exact at every step") {
  std::mt19937_64 rng(4);
  for (const Index b : {Index{2}, Index{4}}) {
    const auto cfg = testing::tiny_config(Arch::DoubleDecoder);
    const auto model = Model<double>::initialized(cfg, 1);
    const Tokens context = testing::random_tokens(rng, 9);
    auto ctx = context_phase(model, context);
    CHECK(kv_bytes(ctx.cache, b) == kv_bytes_dual_stack(cfg.d, b, cfg.generation_layers, 9, 0));
    for (Index g = 1; g <= 5; ++g) {
      decode_step(model, ctx.cache, 7, ctx.cache.next_position());
      CHECK(kv_bytes(ctx.cache, b) ==
            2ull * static_cast<std::uint64_t>(cfg.d * b * cfg.generation_layers * (9 + g)));
    }

    const auto dcfg = testing::tiny_config(Arch::DecoderOnly);
    const auto dmodel = Model<double>::initialized(dcfg, 1);
    CausalCache<double> cache;
    baseline_prefill(dmodel, cache, context);
    for (Index g = 1; g <= 5; ++g) {
      baseline_decode_step(dmodel, cache, 7);
      CHECK(kv_bytes(cache, b) == 2ull * static_cast<std::uint64_t>(dcfg.d * b * dcfg.layers * (9 + g)));
    }
  }
}

TEST_CASE("analytic memory figures") {
  ModelConfig cfg;
  const auto kv = kv_bytes(cfg, 2, 2048, 256);
  CHECK(kv.decoder_only == 2ull * 256 * 2 * 12 * 2304);
  CHECK(kv.dual_stack == 2ull * 256 * 2 * 4 * 2304);
  CHECK(kv.ratio == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("greedy generation follows the argmax") {
  std::mt19937_64 rng(5);
  for (const Arch arch : {Arch::DecoderOnly, Arch::DoubleDecoder}) {
    const auto model = Model<double>::initialized(testing::tiny_config(arch), 6);
    const Tokens prompt = testing::random_tokens(rng, 6);
    const auto report = generate(model, prompt, 5, SamplerSpec{}, 0);
    REQUIRE(report.tokens.size() == 5);
    Tokens seq = prompt;
    for (const TokenId t : report.tokens) {
      const Index T = static_cast<Index>(seq.size());
      const auto p = arch == Arch::DoubleDecoder ? BlockPartition::validate({0, 5, T}, T) : BlockPartition::single(T);
      CHECK(t == argmax(forward(model, seq, p).bottomRows(1)));
      seq.push_back(t);
    }
    CHECK(report.decode_steps == (arch == Arch::DoubleDecoder ? 5 : 4));
    CHECK(report.ttft_ops > 0);
  }
}

TEST_CASE("sampling") {
  std::mt19937_64 rng(7);
  const std::vector<double> logits{0.0, 5.0, 1.0};
  CHECK(sample_token(logits, SamplerSpec{}, rng) == 1);
  std::vector<int> hits(3, 0);
  for (int i = 0; i < 3000; ++i) hits[static_cast<std::size_t>(sample_token(logits, SamplerSpec{1.0, false}, rng))]++;
  CHECK(hits[1] > 2800);
  CHECK(hits[0] > 0);
  for (int i = 0; i < 3000; ++i) hits[static_cast<std::size_t>(sample_token(logits, SamplerSpec{100.0, false}, rng))]++;
  CHECK(hits[0] > 800);
}

TEST_CASE("per-token work scales with the generation stack") {
  std::mt19937_64 rng(8);
  auto dd = testing::tiny_config(Arch::DoubleDecoder);
  dd.context_layers = 8;
  dd.generation_layers = 4;
  auto dec = dd;
  dec.arch = Arch::DecoderOnly;
  dec.layers = 12;
  const Tokens prompt = testing::random_tokens(rng, 40);
  const auto a = generate(Model<double>::initialized(dd, 1), prompt, 8, SamplerSpec{}, 0);
  const auto b = generate(Model<double>::initialized(dec, 1), prompt, 8, SamplerSpec{}, 0);
  const double per_token = static_cast<double>(a.per_token_ops) / static_cast<double>(b.per_token_ops);
  const double ttft = static_cast<double>(a.ttft_ops) / static_cast<double>(b.ttft_ops);
  CHECK(per_token < 0.5);
  CHECK(ttft < 0.85);
  CHECK(a.kv_bytes * 3 < b.kv_bytes + 3 * 4 * 2 * 16 * 2);
}

TEST_CASE("positions past the table") {
  auto cfg = testing::tiny_config(Arch::DoubleDecoder);
  cfg.max_seq_len = 8;
  const auto model = Model<double>::initialized(cfg, 1);
  auto ctx = context_phase(model, Tokens{1, 2, 3, 4, 5, 6, 7});
  decode_step(model, ctx.cache, 1, 7);
  try {
    decode_step(model, ctx.cache, 1, 8);
    FAIL("decoded past max_seq_len");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::CacheExhausted);
  }
  CausalCache<double> cache;
  try {
    build_prefix_cache(model, Tokens(9, 1));
    FAIL("prefix past max_seq_len");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::SeqTooLong);
  }
}
