#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "ddec/training.hpp"
#include "support/fixtures.hpp"

using namespace ddec;

TEST_CASE("cross entropy against a direct log-softmax") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 3.0);
  Matrix<double> logits(4, 7);
  for (Index i = 0; i < logits.size(); ++i) logits.data()[i] = n(rng);
  const std::vector<TokenId> targets{3, 0, 6, 2};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  const auto ce = cross_entropy(logits, targets, mask, 0.5);
  double want = 0.0;
  for (const Index t : {0, 2, 3}) {
    want -= std::log(std::exp(logits(t, targets[static_cast<std::size_t>(t)])) / logits.row(t).array().exp().sum());
  }
  CHECK(ce.count == 3);
  CHECK(ce.sum == doctest::Approx(want).epsilon(1e-12));
  CHECK(ce.d_logits.row(1).isZero(0.0));
  // Each supervised gradient row is 0.5 * (softmax - onehot) and sums to zero.
  for (const Index t : {0, 2, 3}) CHECK(std::abs(ce.d_logits.row(t).sum()) < 1e-12);
  CHECK(ce.d_logits(0, 3) < 0.0);

  const std::vector<TokenId> bad{3, 0, 7, 2};
  CHECK_THROWS_AS(cross_entropy(logits, bad, mask, 1.0), Error);
}

TEST_CASE("lm_loss") {
  Matrix<double> logits = Matrix<double>::Zero(3, 5);
  const Tokens tokens{1, 2, 3};
  CHECK(lm_loss(logits, tokens, pretrain_loss_mask(3)) == doctest::Approx(std::log(5.0)));
  try {
    lm_loss(logits, tokens, LossMask{0, 0, 0});
    FAIL("empty mask accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::EmptyMask);
  }
  CHECK_THROWS_AS(lm_loss(logits, tokens, LossMask{1, 1, 1}), Error);
  CHECK_THROWS_AS(lm_loss(logits, tokens, LossMask{1, 1}), Error);
}

TEST_CASE("pretraining masks supervise T-1 targets under every sampled partition") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 300; ++i) {
    const Index T = 16 + static_cast<Index>(rng() % 100);
    const auto p = sample_partition(rng, T, {2, 4, 4});
    Batch b;
    b.tokens.assign(2, Tokens(static_cast<std::size_t>(T), 1));
    b.partition = p;
    b.loss_mask.assign(2, pretrain_loss_mask(T));
    CHECK(b.supervised_targets() == 2 * (T - 1));
  }
}

TEST_CASE("suffix masks and breakpoints") {
  const auto m = suffix_loss_mask(3, 6);
  CHECK(m == LossMask{0, 0, 1, 1, 1, 0});
  CHECK_THROWS_AS(suffix_loss_mask(0, 6), Error);
  CHECK_THROWS_AS(suffix_loss_mask(6, 6), Error);

  CHECK(breakpoint_range(64, {16, 16}) == std::pair<Index, Index>{16, 48});
  CHECK(breakpoint_range(20, {16, 16}) == std::pair<Index, Index>{16, 16});
  CHECK(breakpoint_range(8, {16, 16}) == std::pair<Index, Index>{7, 7});
  CHECK(eval_breakpoints(64, {16, 16}) == std::vector<Index>{16, 32, 48});
  CHECK(eval_breakpoints(64, {1, 1}) == std::vector<Index>{16, 32, 48});
  CHECK(eval_breakpoints(8, {16, 16}) == std::vector<Index>{7});
}

TEST_CASE("prefix-LM collation shares one breakpoint") {
  std::mt19937_64 rng(2);
  std::set<Index> seen;
  for (int i = 0; i < 200; ++i) {
    const auto b = prefix_lm_collate(rng, std::vector<Tokens>(3, Tokens(40, 5)), {8, 8});
    REQUIRE(b.breakpoint);
    seen.insert(*b.breakpoint);
    CHECK(*b.breakpoint >= 8);
    CHECK(*b.breakpoint <= 32);
    for (const auto& mask : b.loss_mask) CHECK(mask == suffix_loss_mask(*b.breakpoint, 40));
    CHECK(b.effective_partition() == BlockPartition::validate({0, *b.breakpoint, 40}, 40));
  }
  CHECK(seen.size() == 25);
  CHECK_THROWS_AS(prefix_lm_collate(rng, {Tokens(4, 1), Tokens(5, 1)}, {1, 1}), Error);
}

TEST_CASE("muP parameter groups") {
  for (const Arch arch : {Arch::DecoderOnly, Arch::DoubleDecoder}) {
    ModelConfig cfg = testing::tiny_config(arch, 32, 8);
    const auto names = parameter_names(cfg);
    const auto groups = mup_param_groups(cfg, names, 0.02, 0.3);
    REQUIRE(groups.size() == 3);
    std::vector<int> hits(names.size(), 0);
    for (const auto& g : groups) {
      for (const auto i : g.members) hits[i]++;
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      CAPTURE(names[i]);
      CHECK(hits[i] == 1);
    }
    CHECK(groups[0].name == "hidden");
    CHECK(groups[0].lr == doctest::Approx(0.02 * 8.0 / 32.0));
    CHECK(groups[0].weight_decay == 0.3);
    CHECK(groups[1].lr == 0.02);
    CHECK(groups[1].members.size() == 1);
    CHECK(names[groups[1].members[0]] == "embedding");
    CHECK(groups[2].lr == 0.02);
    CHECK(groups[2].weight_decay == 0.0);
    for (const auto i : groups[0].members) CHECK(names[i].ends_with(".weight"));
  }
  try {
    mup_param_groups(ModelConfig{}, {"embedding", "mystery"}, 0.01, 0.1);
    FAIL("unclassified parameter accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::UnclassifiedParameter);
  }
}

TEST_CASE("weight decay defaults by architecture") {
  TrainConfig tc;
  CHECK(tc.resolved_weight_decay(Arch::DecoderOnly) == 0.1);
  CHECK(tc.resolved_weight_decay(Arch::DoubleDecoder) == 0.5);
  tc.weight_decay = 0.0;
  CHECK(tc.resolved_weight_decay(Arch::DoubleDecoder) == 0.0);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig tc;
  tc.warmup_frac = 0.1;
  tc.final_lr_frac = 0.1;
  CHECK(lr_schedule(0, 100, tc) == 0.0);
  CHECK(lr_schedule(5, 100, tc) == doctest::Approx(0.5));
  CHECK(lr_schedule(10, 100, tc) == doctest::Approx(1.0));
  CHECK(lr_schedule(55, 100, tc) == doctest::Approx(0.55));
  CHECK(lr_schedule(100, 100, tc) == doctest::Approx(0.1));
  double prev = 2.0;
  for (int s = 10; s <= 100; ++s) {
    const double v = lr_schedule(s, 100, tc);
    CHECK(v <= prev);
    prev = v;
  }
  CHECK_THROWS_AS(lr_schedule(101, 100, tc), Error);
  CHECK_THROWS_AS(lr_schedule(-1, 100, tc), Error);
  CHECK_THROWS_AS(lr_schedule(0, 0, tc), Error);
}

TEST_CASE("AdamW matches a scalar reference") {
  const ModelConfig cfg = testing::tiny_config(Arch::DecoderOnly);
  auto params = init_params<double>(cfg, 1);
  auto grads = zeros_like(params);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  TrainConfig tc;
  const auto groups = mup_param_groups(cfg, parameter_names(cfg), 0.01, 0.1);
  AdamState<double> state;

  const double p0 = params.causal[0].attn.q.weight(1, 2);
  const double e0 = params.embedding(3, 4);
  double mq = 0, vq = 0;
  double pq = p0, pe = e0;
  for (int t = 1; t <= 3; ++t) {
    for (auto& e : parameter_list(grads)) {
      for (Index i = 0; i < e.value->size(); ++i) e.value->data()[i] = n(rng);
    }
    const double gq = grads.causal[0].attn.q.weight(1, 2);
    adamw_update(params, grads, state, groups, 0.5, tc);
    // Hidden weight: lr = 0.01 * d0/d * 0.5, decoupled decay, bias-corrected moments.
    const double lr = groups[0].lr * 0.5;
    mq = tc.beta1 * mq + (1 - tc.beta1) * gq;
    vq = tc.beta2 * vq + (1 - tc.beta2) * gq * gq;
    const double mhat = mq / (1 - std::pow(tc.beta1, t));
    const double vhat = vq / (1 - std::pow(tc.beta2, t));
    pq = pq * (1 - lr * 0.1) - lr * mhat / (std::sqrt(vhat) + tc.eps);
    CHECK(params.causal[0].attn.q.weight(1, 2) == doctest::Approx(pq).epsilon(1e-12));
  }
  CHECK(state.t == 3);
  CHECK(pe != params.embedding(3, 4));
  // Norm gains never decay: from a fresh state a zero gradient leaves them put,
  // while hidden weights shrink by 1 - lr * wd.
  AdamState<double> fresh;
  const double gain = params.causal[0].norm1.gain(0, 0);
  const double w = params.causal[0].attn.q.weight(1, 2);
  adamw_update(params, zeros_like(params), fresh, groups, 1.0, tc);
  CHECK(params.causal[0].norm1.gain(0, 0) == gain);
  CHECK(params.causal[0].attn.q.weight(1, 2) == doctest::Approx(w * (1 - groups[0].lr * 0.1)).epsilon(1e-14));
}

TEST_CASE("global-norm clipping") {
  const ModelConfig cfg = testing::tiny_config(Arch::DecoderOnly);
  auto g = zeros_like(init_params<double>(cfg, 1));
  g.embedding(0, 0) = 3.0;
  g.causal[0].ffn.up.weight(0, 0) = 4.0;
  CHECK(global_norm(g) == doctest::Approx(5.0));
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(global_norm(g) == doctest::Approx(1.0));
  CHECK(g.embedding(0, 0) == doctest::Approx(0.6));
  CHECK(clip_global_norm(g, 10.0) == doctest::Approx(1.0));
  CHECK(g.embedding(0, 0) == doctest::Approx(0.6));
}

TEST_CASE("batches depend only on seed and step") {
  std::mt19937_64 rng(3);
  std::vector<Tokens> seqs;
  for (int i = 0; i < 10; ++i) seqs.push_back(testing::random_tokens(rng, 32));
  TrainConfig tc;
  tc.batch_size = 3;
  tc.min_blocks = 2;
  tc.max_blocks = 4;
  tc.min_block_len = 4;
  SequenceOrder forward_order(seqs.size(), tc.seed), backward_order(seqs.size(), tc.seed);
  std::vector<Batch> a, b(12);
  for (int s = 0; s < 12; ++s) a.push_back(make_pretrain_batch(seqs, forward_order, Arch::DoubleDecoder, tc, s));
  for (int s = 11; s >= 0; --s) b[static_cast<std::size_t>(s)] = make_pretrain_batch(seqs, backward_order, Arch::DoubleDecoder, tc, s);
  for (int s = 0; s < 12; ++s) {
    CHECK(a[static_cast<std::size_t>(s)].tokens == b[static_cast<std::size_t>(s)].tokens);
    CHECK(*a[static_cast<std::size_t>(s)].partition == *b[static_cast<std::size_t>(s)].partition);
  }
  // An epoch visits every sequence once.
  SequenceOrder order(seqs.size(), 77);
  std::set<std::size_t> epoch;
  for (int i = 0; i < 10; ++i) epoch.insert(order.at(i));
  CHECK(epoch.size() == 10);
  CHECK(steps_for_budget(1000, 2, 100) == 5);
  CHECK(steps_for_budget(10, 2, 100) == 1);
}

TEST_CASE("training reduces loss and is reproducible") {
  std::mt19937_64 rng(4);
  std::vector<Tokens> seqs;
  const Tokens motif{10, 20, 30, 40, 50, 60, 70, 80};
  for (int i = 0; i < 8; ++i) {
    Tokens t;
    for (int r = 0; r < 4; ++r) t.insert(t.end(), motif.begin(), motif.end());
    seqs.push_back(t);
  }
  for (const Arch arch : {Arch::DecoderOnly, Arch::DoubleDecoder}) {
    TrainConfig tc;
    tc.batch_size = 2;
    tc.base_lr = 0.03;
    tc.min_blocks = 2;
    tc.max_blocks = 4;
    tc.min_block_len = 4;
    auto run = [&] {
      Trainer trainer(Model<float>::initialized(testing::tiny_config(arch), 1), tc, Phase::Pretrain);
      RunOptions ro;
      ro.total_steps = 40;
      std::vector<double> losses;
      ro.on_step = [&](const StepMetrics& m) { losses.push_back(m.loss); };
      pretrain(trainer, seqs, ro);
      return std::make_pair(losses, trainer.model().params().embedding);
    };
    const auto [l1, e1] = run();
    const auto [l2, e2] = run();
    CHECK(l1 == l2);
    CHECK(e1 == e2);
    CHECK(l1.back() < l1.front() - 2.0);
  }
}

TEST_CASE("resuming mid-run reproduces the uninterrupted trajectory") {
  std::mt19937_64 rng(6);
  std::vector<Tokens> seqs;
  for (int i = 0; i < 6; ++i) seqs.push_back(testing::random_tokens(rng, 24, 40));
  TrainConfig tc;
  tc.batch_size = 2;
  tc.min_blocks = 2;
  tc.max_blocks = 3;
  tc.min_block_len = 4;
  const auto cfg = testing::tiny_config(Arch::DoubleDecoder);
  RunOptions full;
  full.total_steps = 10;
  Trainer a(Model<float>::initialized(cfg, 2), tc, Phase::Pretrain);
  pretrain(a, seqs, full);

  Trainer b(Model<float>::initialized(cfg, 2), tc, Phase::Pretrain);
  RunOptions first = full;
  first.stop_after = 4;
  pretrain(b, seqs, first);
  CHECK(b.steps_done() == 4);
  Trainer c(Model<float>(cfg, b.model().params()), tc, Phase::Pretrain);
  c.optimizer() = b.optimizer();
  c.restore_progress(b.steps_done(), b.tokens_seen());
  pretrain(c, seqs, full);
  CHECK(c.steps_done() == 10);
  for (std::size_t i = 0; const auto& e : parameter_list(std::as_const(a.model().params()))) {
    CAPTURE(e.name);
    CHECK(*e.value == *parameter_list(std::as_const(c.model().params()))[i++].value);
  }
}

TEST_CASE("a non-finite loss stops training") {
  TrainConfig tc;
  tc.batch_size = 1;
  auto cfg = testing::tiny_config(Arch::DecoderOnly);
  auto model = Model<float>::initialized(cfg, 1);
  model.params().embedding(5, 0) = std::nanf("");
  Trainer trainer(std::move(model), tc, Phase::Pretrain);
  Batch b;
  b.tokens = {Tokens{5, 6, 7, 8}};
  b.loss_mask = {pretrain_loss_mask(4)};
  try {
    trainer.step(b, 10);
    FAIL("NaN accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NonFiniteLoss);
  }
}

TEST_CASE("prefix-LM evaluation equals explicit per-breakpoint losses") {
  std::mt19937_64 rng(8);
  const std::vector<Tokens> seqs{testing::random_tokens(rng, 24), testing::random_tokens(rng, 24)};
  const PrefixBounds bounds{4, 4};
  for (const Arch arch : {Arch::DecoderOnly, Arch::DoubleDecoder}) {
    const auto model = Model<double>::initialized(testing::tiny_config(arch), 3);
    double sum = 0.0;
    Index count = 0;
    for (const auto& s : seqs) {
      for (const Index b : eval_breakpoints(24, bounds)) {
        const auto logits = forward(model, s, BlockPartition::validate({0, b, 24}, 24));
        sum += lm_loss(logits, s, suffix_loss_mask(b, 24)) * static_cast<double>(24 - b);
        count += 24 - b;
      }
    }
    CHECK(prefix_lm_eval(model, seqs, bounds) == doctest::Approx(sum / static_cast<double>(count)).epsilon(1e-12));
  }
}

TEST_CASE("prefix tokens reach the suffix block") {
  std::mt19937_64 rng(9);
  const auto model = Model<double>::initialized(testing::tiny_config(Arch::DoubleDecoder), 3);
  Tokens t = testing::random_tokens(rng, 16);
  const auto p = BlockPartition::validate({0, 8, 16}, 16);
  const auto base = forward(model, t, p);
  t[2] = (t[2] + 1) % 259;
  const auto moved = forward(model, t, p);
  CHECK(base.topRows(2) == moved.topRows(2));
  CHECK((base.bottomRows(8) - moved.bottomRows(8)).cwiseAbs().maxCoeff() > 0.0);
}
