#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "ddec/attention.hpp"
#include "ddec/layers.hpp"
#include "support/fixtures.hpp"

using namespace ddec;
using Mat = Matrix<double>;
using Vec = Vector<double>;

namespace {

Mat random_matrix(std::mt19937_64& rng, Index rows, Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Softmax attention written out term by term.
PartialAttention<double> naive_attention(const Mat& q, const Mat& k, const Mat& v, const BoolMatrix& mask,
                                         double scale) {
  PartialAttention<double> r{Mat::Zero(q.rows(), v.cols()), Vec(q.rows())};
  for (Index t = 0; t < q.rows(); ++t) {
    std::vector<double> logits;
    std::vector<Index> keys;
    for (Index s = 0; s < k.rows(); ++s) {
      if (!mask(t, s)) continue;
      logits.push_back(q.row(t).dot(k.row(s)) * scale);
      keys.push_back(s);
    }
    if (keys.empty()) {
      r.lse(t) = -std::numeric_limits<double>::infinity();
      continue;
    }
    double z = 0.0;
    for (const double l : logits) z += std::exp(l);
    r.lse(t) = std::log(z);
    for (std::size_t i = 0; i < keys.size(); ++i) r.output.row(t) += std::exp(logits[i]) / z * v.row(keys[i]);
  }
  return r;
}

}  // namespace

TEST_CASE("sdpa matches the naive formula, mask form and predicate form") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const Index T = 1 + static_cast<Index>(rng() % 12);
    const Mat q = random_matrix(rng, T, 4), k = random_matrix(rng, T, 4), v = random_matrix(rng, T, 3);
    const auto p = testing::random_cuts(rng, T);
    const auto masks = block_masks(p);
    const BlockMaskPredicate pred(p);
    for (const bool cross : {false, true}) {
      const BoolMatrix& mask = cross ? masks.cross_mask : masks.self_mask;
      const auto want = naive_attention(q, k, v, mask, 0.5);
      const auto got = sdpa(q, k, v, mask, 0.5);
      const auto got_pred = cross ? sdpa(q, k, v, pred.cross_view(), 0.5) : sdpa(q, k, v, pred.self_view(), 0.5);
      CHECK((got.output - want.output).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(got.output == got_pred.output);
      for (Index t = 0; t < T; ++t) {
        if (std::isinf(want.lse(t))) {
          CHECK(std::isinf(got.lse(t)));
          CHECK(got.output.row(t).isZero(0.0));
        } else {
          CHECK(got.lse(t) == doctest::Approx(want.lse(t)).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("lse_merge equals one softmax over the union of both key sets") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Index T = 2 + static_cast<Index>(rng() % 14);
    const Mat q = random_matrix(rng, T, 8, 2.0), ks = random_matrix(rng, T, 8), vs = random_matrix(rng, T, 8);
    const Mat kc = random_matrix(rng, T, 8), vc = random_matrix(rng, T, 8);
    const auto masks = block_masks(testing::random_cuts(rng, T));
    const double scale = default_attention_scale<double>(8);
    const Mat merged = lse_merge(sdpa(q, ks, vs, masks.self_mask, scale), sdpa(q, kc, vc, masks.cross_mask, scale));
    const auto oracle = dual_key_oracle(q, ks, vs, kc, vc, masks, scale);
    CHECK((merged - oracle.output).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("merge keeps the attention sink that adding two softmaxes loses") {
  // One dominant cross key: the merged output follows it; the sum of two
  // independently normalized attentions would not.
  Mat q(1, 2), ks(1, 2), vs(1, 2), kc(1, 2), vc(1, 2);
  q << 10, 0;
  ks << -1, 0;
  vs << 1, 0;
  kc << 1, 0;
  vc << 0, 1;
  BoolMatrix on(1, 1);
  on(0, 0) = true;
  const Mat merged = lse_merge(sdpa(q, ks, vs, on, 1.0), sdpa(q, kc, vc, on, 1.0));
  CHECK(merged(0, 1) > 0.999);
  CHECK(merged(0, 0) < 1e-3);
}

TEST_CASE("merge edge rows") {
  const double inf = std::numeric_limits<double>::infinity();
  Vec a(3), b(3);
  a << -inf, 0.0, 1.0;
  b << 0.0, -inf, 1.0;
  const Vec w = lse_merge_weights(a, b);
  CHECK(w(0) == 0.0);
  CHECK(w(1) == 1.0);
  CHECK(w(2) == doctest::Approx(0.5));
  Vec c(1), e(1);
  c << -inf;
  e << -inf;
  CHECK_THROWS_AS(lse_merge_weights(c, e), Error);
  PartialAttention<double> x{Mat::Zero(2, 2), Vec::Zero(2)};
  PartialAttention<double> y{Mat::Zero(3, 2), Vec::Zero(3)};
  CHECK_THROWS_AS(lse_merge(x, y), Error);
}

TEST_CASE("sdpa and merge backward against central differences") {
  std::mt19937_64 rng(3);
  const Index T = 6, dk = 4, dv = 3;
  const auto masks = block_masks(BlockPartition::parse("0,2,4,6"));
  Mat q = random_matrix(rng, T, dk), ks = random_matrix(rng, T, dk), vs = random_matrix(rng, T, dv);
  Mat kc = random_matrix(rng, T, dk), vc = random_matrix(rng, T, dv);
  const Mat R = random_matrix(rng, T, dv);
  const double scale = 0.7;

  auto loss = [&] {
    const Mat out = lse_merge(sdpa(q, ks, vs, masks.self_mask, scale), sdpa(q, kc, vc, masks.cross_mask, scale));
    return (out.array() * R.array()).sum();
  };

  Mat ps, pc;
  const auto a = sdpa(q, ks, vs, masks.self_mask, scale, &ps);
  const auto b = sdpa(q, kc, vc, masks.cross_mask, scale, &pc);
  Vec w;
  const Mat merged = lse_merge(a, b, &w);
  const auto mg = lse_merge_backward(a, b, w, merged, R);
  // Rows without keys carry lse = -inf; their gradients are zero by construction.
  Vec dla = mg.d_lse_a, dlb = mg.d_lse_b;
  const auto ga = sdpa_backward(q, ks, vs, ps, a.output, mg.d_output_a, dla, scale);
  const auto gb = sdpa_backward(q, kc, vc, pc, b.output, mg.d_output_b, dlb, scale);
  const Mat dq = ga.dq + gb.dq;

  auto check = [&](Mat& x, const Mat& analytic) {
    const double eps = 1e-6;
    for (Index i = 0; i < x.size(); ++i) {
      const double keep = x.data()[i];
      x.data()[i] = keep + eps;
      const double up = loss();
      x.data()[i] = keep - eps;
      const double down = loss();
      x.data()[i] = keep;
      CHECK(analytic.data()[i] == doctest::Approx((up - down) / (2 * eps)).epsilon(1e-6));
    }
  };
  check(q, dq);
  check(ks, ga.dk);
  check(vs, ga.dv);
  check(kc, gb.dk);
  check(vc, gb.dv);
}

TEST_CASE("rotary rotation") {
  std::mt19937_64 rng(4);
  const Index hd = 8;
  const RotaryTable<double> table(32, hd);
  Mat x = random_matrix(rng, 5, 2 * hd);
  const Mat original = x;

  SUBCASE("is orthogonal and inverted by its transpose") {
    table.apply(x, 3);
    CHECK(x.rowwise().norm().isApprox(original.rowwise().norm(), 1e-12));
    table.apply(x, 3, true);
    CHECK(x.isApprox(original, 1e-12));
  }
  SUBCASE("scores depend on relative position only") {
    Mat a = random_matrix(rng, 1, hd), b = random_matrix(rng, 1, hd);
    auto score = [&](Index pa, Index pb) {
      const std::vector<Index> ia{pa}, ib{pb};
      return rope(a, ia).row(0).dot(rope(b, ib).row(0));
    };
    CHECK(score(7, 3) == doctest::Approx(score(20, 16)).epsilon(1e-12));
    CHECK(score(0, 0) == doctest::Approx(a.row(0).dot(b.row(0))).epsilon(1e-12));
  }
  SUBCASE("table and free function agree") {
    std::vector<Index> pos{3, 4, 5, 6, 7};
    Mat head0 = original.leftCols(hd);
    table.apply(x, 3);
    CHECK(x.leftCols(hd).isApprox(rope(head0, pos), 1e-12));
  }
  SUBCASE("positions past the table") { CHECK_THROWS_AS(table.apply(x, 30), Error); }
}

TEST_CASE("layer norm and GELU backward against central differences") {
  std::mt19937_64 rng(5);
  LayerNorm<double> ln{random_matrix(rng, 1, 6), random_matrix(rng, 1, 6)};
  Mat x = random_matrix(rng, 3, 6);
  const Mat R = random_matrix(rng, 3, 6);
  auto loss = [&] { return (gelu_forward<double>(layer_norm_forward(ln, x)).array() * R.array()).sum(); };
  LayerNormCache<double> cache;
  const Mat y = layer_norm_forward(ln, x, &cache);
  LayerNorm<double> grad{Mat::Zero(1, 6), Mat::Zero(1, 6)};
  const Mat dx = layer_norm_backward(ln, cache, gelu_backward<double>(y, R), grad);
  const double eps = 1e-6;
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + eps;
    const double up = loss();
    x.data()[i] = keep - eps;
    const double down = loss();
    x.data()[i] = keep;
    CHECK(dx.data()[i] == doctest::Approx((up - down) / (2 * eps)).epsilon(1e-6));
  }
  for (Index i = 0; i < 6; ++i) {
    const double keep = ln.gain(0, i);
    ln.gain(0, i) = keep + eps;
    const double up = loss();
    ln.gain(0, i) = keep - eps;
    const double down = loss();
    ln.gain(0, i) = keep;
    CHECK(grad.gain(0, i) == doctest::Approx((up - down) / (2 * eps)).epsilon(1e-6));
  }
}

TEST_CASE("GELU is the exact erf form") {
  Mat x(1, 3);
  x << -1.0, 0.0, 2.0;
  const Mat y = gelu_forward<double>(x);
  CHECK(y(0, 0) == doctest::Approx(-0.15865525393145707).epsilon(1e-14));
  CHECK(y(0, 1) == 0.0);
  CHECK(y(0, 2) == doctest::Approx(1.9544997361036416).epsilon(1e-14));
}
