#include <doctest.h>

#include <random>

#include "ddec/costmodel.hpp"
#include "ddec/model.hpp"
#include "ddec/training.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace ddec;

namespace {

Batch pretrain_batch(std::vector<Tokens> tokens, std::optional<BlockPartition> partition) {
  Batch b;
  b.loss_mask.assign(tokens.size(), pretrain_loss_mask(static_cast<Index>(tokens.front().size())));
  b.tokens = std::move(tokens);
  b.partition = std::move(partition);
  return b;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = testing::tiny_config(Arch::DoubleDecoder);
  CHECK_NOTHROW(cfg.validate());
  cfg.d = 12;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = testing::tiny_config(Arch::DoubleDecoder);
  cfg.generation_layers = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK(parse_arch("decoder_only") == Arch::DecoderOnly);
  try {
    parse_arch("sed");
    FAIL("accepted sed");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::OutOfScope);
  }
  try {
    parse_arch("gpt");
    FAIL("accepted gpt");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::InvalidConfig);
  }
}

TEST_CASE("parameter census") {
  for (const Arch arch : {Arch::DecoderOnly, Arch::DoubleDecoder}) {
    const ModelConfig cfg = testing::tiny_config(arch);
    const auto params = init_params<double>(cfg, 1);
    std::int64_t total = 0;
    const auto list = parameter_list(params);
    const auto names = parameter_names(cfg);
    REQUIRE(list.size() == names.size());
    for (std::size_t i = 0; i < list.size(); ++i) {
      total += list[i].value->size();
      CHECK(list[i].name == names[i]);
    }
    CHECK(total == parameter_count(cfg));
  }
  // A dual-key layer adds two d x d projections over a causal one.
  ModelConfig dd;
  ModelConfig dec = dd;
  dec.arch = Arch::DecoderOnly;
  CHECK(non_embedding_matmul_params(dd) - non_embedding_matmul_params(dec) == 4 * 2 * dd.d * dd.d);
}

TEST_CASE("initialization is seeded and Xavier-bounded") {
  const ModelConfig cfg = testing::tiny_config(Arch::DoubleDecoder);
  const auto a = init_params<double>(cfg, 5);
  const auto b = init_params<double>(cfg, 5);
  const auto c = init_params<double>(cfg, 6);
  CHECK(a.embedding == b.embedding);
  CHECK(a.embedding != c.embedding);
  const auto& w = a.causal[0].ffn.up.weight;
  const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
  CHECK(w.cwiseAbs().maxCoeff() <= bound);
  CHECK(w.cwiseAbs().maxCoeff() > 0.9 * bound);
  CHECK(a.causal[0].ffn.up.bias.isZero(0.0));
  CHECK(a.causal[0].norm1.gain.isOnes(0.0));
  // float parameters are the rounded double draws.
  const auto f = init_params<float>(cfg, 5);
  CHECK(f.embedding == a.embedding.cast<float>());
}

TEST_CASE("double causality: a later token never moves an earlier logit") {
  std::mt19937_64 rng(21);
  for (const Arch arch : {Arch::DecoderOnly, Arch::DoubleDecoder}) {
    const auto model = Model<double>::initialized(testing::tiny_config(arch), 3);
    for (int trial = 0; trial < 10; ++trial) {
      const Index T = 2 + static_cast<Index>(rng() % 15);
      Tokens tokens = testing::random_tokens(rng, T);
      const auto p = testing::random_cuts(rng, T);
      const Matrix<double> base = forward(model, tokens, p);
      const Index s = static_cast<Index>(rng() % static_cast<std::uint64_t>(T));
      tokens[static_cast<std::size_t>(s)] = (tokens[static_cast<std::size_t>(s)] + 1) % 259;
      const Matrix<double> moved = forward(model, tokens, p);
      CHECK(base.topRows(s) == moved.topRows(s));
      CHECK(base.row(s) != moved.row(s));
    }
  }
}

TEST_CASE("a single block reduces the generation decoder to a causal transformer") {
  ModelConfig dd = testing::tiny_config(Arch::DoubleDecoder);
  const auto model = Model<double>::initialized(dd, 8);

  ModelConfig dec = dd;
  dec.arch = Arch::DecoderOnly;
  dec.layers = dd.generation_layers;
  ModelParams<double> p = zero_params<double>(dec);
  p.embedding = model.params().embedding;
  for (Index l = 0; l < dd.generation_layers; ++l) {
    const auto& g = model.params().generation[static_cast<std::size_t>(l)];
    auto& c = p.causal[static_cast<std::size_t>(l)];
    c.norm1 = g.norm1;
    c.norm2 = g.norm2;
    c.ffn = g.ffn;
    c.attn.q = g.attn.q;
    c.attn.k = g.attn.k_self;
    c.attn.v = g.attn.v_self;
    c.attn.o = g.attn.o;
  }
  p.causal_norm = model.params().generation_norm;
  const Model<double> reference(dec, std::move(p));

  std::mt19937_64 rng(2);
  const Tokens tokens = testing::random_tokens(rng, 11);
  const Matrix<double> got = double_decoder_forward(model, tokens, BlockPartition::single(11));
  const Matrix<double> want = decoder_only_forward(reference, tokens);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("logit multiplier scales the tied head") {
  ModelConfig cfg = testing::tiny_config(Arch::DecoderOnly, 32, 8);
  cfg.base_width = 8;
  CHECK(cfg.logit_multiplier() == doctest::Approx(0.5));
}

TEST_CASE("analytic gradients match central differences") {
  std::mt19937_64 rng(31);
  for (const Arch arch : {Arch::DecoderOnly, Arch::DoubleDecoder}) {
    CAPTURE(to_string(arch));
    auto model = Model<double>::initialized(testing::tiny_config(arch), 4);
    const Index T = 8;
    std::vector<Tokens> tokens{testing::random_tokens(rng, T), testing::random_tokens(rng, T)};
    const auto batch = pretrain_batch(tokens, arch == Arch::DoubleDecoder
                                                  ? std::optional(BlockPartition::parse("0,3,5,8"))
                                                  : std::nullopt);
    for (const auto& c : testing::gradient_check(model, batch, 1e-5, 6, rng)) {
      CAPTURE(c.name);
      CHECK(c.relative_error < 1e-6);
    }
  }
}

TEST_CASE("op counts of a forward pass agree with the layer walk") {
  std::mt19937_64 rng(41);
  for (const Arch arch : {Arch::DecoderOnly, Arch::DoubleDecoder}) {
    const ModelConfig cfg = testing::tiny_config(arch);
    const auto model = Model<double>::initialized(cfg, 1);
    const Index T = 12;
    OpCounter ops;
    const Tokens tokens = testing::random_tokens(rng, T);
    forward<double>(model, tokens, testing::random_cuts(rng, T), nullptr, &ops);
    CHECK(3 * ops.per_layer() == layer_walk_audit(cfg, T));
    CHECK(ops.head == matmul_flops(T, cfg.vocab_size, cfg.d));
  }
}

TEST_CASE("forward validates its input") {
  const auto model = Model<double>::initialized(testing::tiny_config(Arch::DoubleDecoder), 1);
  auto code = [&](const Tokens& t, const BlockPartition& p) {
    try {
      forward(model, t, p);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::Io;
  };
  CHECK(code({1, 2, 999}, BlockPartition::single(3)) == Errc::IdOutOfRange);
  CHECK(code({1, 2, 3}, BlockPartition::single(4)) == Errc::ShapeMismatch);
  CHECK(code(Tokens(65, 1), BlockPartition::single(65)) == Errc::SeqTooLong);
}
