#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "kvlatent/attention.hpp"
#include "kvlatent/grad_check.hpp"
#include "support/random.hpp"

using namespace kvlatent;
using kvtest::randn;

namespace {

AttentionWeights<double> random_weights(const HeadGeometry& g, std::mt19937_64& rng,
                                        double std = 0.5) {
  return {randn(g.d_model, g.n_heads * g.d_qk, rng, std),
          randn(g.d_model, g.n_kv_heads * g.d_qk, rng, std),
          randn(g.d_model, g.n_kv_heads * g.d_vo, rng, std),
          randn(g.n_heads * g.d_vo, g.d_model, rng, std)};
}

// Half-split rotation computed from scratch with theta^(-j/half).
void rotate(std::vector<double>& v, std::size_t pos, double theta) {
  const std::size_t half = v.size() / 2;
  for (std::size_t j = 0; j < half; ++j) {
    const double a = static_cast<double>(pos) * std::pow(theta, -static_cast<double>(j) / half);
    const double x = v[j], y = v[j + half];
    v[j] = x * std::cos(a) - y * std::sin(a);
    v[j + half] = y * std::cos(a) + x * std::sin(a);
  }
}

// Direct summation over heads and positions.
Tensor<double> loop_oracle(const Tensor<double>& H, const AttentionWeights<double>& w,
                           const HeadGeometry& g, double theta) {
  const std::size_t n = H.rows();
  auto proj = [&](std::size_t t, const Tensor<double>& m, std::size_t col0, std::size_t width) {
    std::vector<double> out(width, 0.0);
    for (std::size_t c = 0; c < width; ++c)
      for (std::size_t i = 0; i < g.d_model; ++i) out[c] += H(t, i) * m(i, col0 + c);
    return out;
  };
  auto out = Tensor<double>::matrix(n, g.d_model);
  for (std::size_t h = 0; h < g.n_heads; ++h) {
    const std::size_t kv = h * g.n_kv_heads / g.n_heads;
    for (std::size_t t = 0; t < n; ++t) {
      auto q = proj(t, w.w_q, h * g.d_qk, g.d_qk);
      rotate(q, t, theta);
      std::vector<double> s(t + 1);
      for (std::size_t u = 0; u <= t; ++u) {
        auto k = proj(u, w.w_k, kv * g.d_qk, g.d_qk);
        rotate(k, u, theta);
        s[u] = std::inner_product(q.begin(), q.end(), k.begin(), 0.0) / std::sqrt(double(g.d_qk));
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      std::vector<double> o(g.d_vo, 0.0);
      for (std::size_t u = 0; u <= t; ++u) {
        auto v = proj(u, w.w_v, kv * g.d_vo, g.d_vo);
        for (std::size_t c = 0; c < g.d_vo; ++c) o[c] += s[u] / z * v[c];
      }
      for (std::size_t c = 0; c < g.d_vo; ++c)
        for (std::size_t m = 0; m < g.d_model; ++m) out(t, m) += o[c] * w.w_o(h * g.d_vo + c, m);
    }
  }
  return out;
}

}  // namespace

TEST(Geometry, Validation) {
  EXPECT_NO_THROW((HeadGeometry{16, 4, 2, 6, 10}.validate()));
  EXPECT_NO_THROW((HeadGeometry{16, 3, 3, 2, 2}.validate()));
  EXPECT_THROW((HeadGeometry{16, 4, 3, 6, 10}.validate()), ConfigError);
  EXPECT_THROW((HeadGeometry{16, 4, 2, 5, 10}.validate()), ConfigError);
  EXPECT_THROW((HeadGeometry{16, 4, 2, 6, 1}.validate()), ConfigError);
  EXPECT_THROW((HeadGeometry{0, 4, 2, 6, 10}.validate()), ConfigError);
}

TEST(Geometry, GroupedQueryMapIsBlockContiguous) {
  HeadGeometry g{16, 8, 2, 4, 4};
  const std::vector<std::size_t> expect = {0, 0, 0, 0, 1, 1, 1, 1};
  for (std::size_t h = 0; h < 8; ++h) EXPECT_EQ(g.kv_head_for(h), expect[h]);
  g.n_kv_heads = 8;
  for (std::size_t h = 0; h < 8; ++h) EXPECT_EQ(g.kv_head_for(h), h);
}

TEST(ScaleFactor, UsesQueryKeyWidth) {
  EXPECT_EQ(scale_factor(HeadGeometry{512, 8, 8, 64, 16}), 0.125);
  EXPECT_EQ(scale_factor(HeadGeometry{512, 8, 8, 16, 64}), 0.25);
  EXPECT_EQ(scale_factor(HeadGeometry{4096, 32, 8, 128, 128}), 1.0 / std::sqrt(128.0));
}

TEST(AttendFull, SingleTokenIsValueThroughOutput) {
  std::mt19937_64 rng(1);
  HeadGeometry g{8, 4, 2, 4, 6};
  auto w = random_weights(g, rng);
  RotaryTable t(RopeConfig::standard(10000, g.d_qk), 4);
  auto H = randn(1, 8, rng);
  auto out = attend_full(H, w, g, t);
  auto v = matmul_plain(H, w.w_v);
  auto expect = Tensor<double>::matrix(1, 8);
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t c = 0; c < g.d_vo; ++c)
      for (std::size_t m = 0; m < 8; ++m)
        expect(0, m) += v(0, g.kv_head_for(h) * g.d_vo + c) * w.w_o(h * g.d_vo + c, m);
  EXPECT_LT(max_abs_diff(out, expect), 1e-12);
}

TEST(AttendFull, IdentityWeightsAtPositionZeroAverageRows) {
  HeadGeometry g{4, 1, 1, 4, 4};
  AttentionWeights<double> w{Tensor<double>::identity(4), Tensor<double>::matrix(4, 4),
                             Tensor<double>::identity(4), Tensor<double>::identity(4)};
  RotaryTable t(RopeConfig::standard(10000, 4), 8);
  auto H = Tensor<double>::from_rows({{1, 2, 3, 4}, {5, 6, 7, 8}, {0, 1, 0, 1}});
  auto out = attend_full(H, w, g, t);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(out(0, c), H(0, c), 1e-12);
    EXPECT_NEAR(out(1, c), (H(0, c) + H(1, c)) / 2.0, 1e-12);
    EXPECT_NEAR(out(2, c), (H(0, c) + H(1, c) + H(2, c)) / 3.0, 1e-12);
  }
}

TEST(AttendFull, MatchesLoopOracle) {
  std::mt19937_64 rng(2);
  HeadGeometry g{16, 4, 2, 6, 10};
  auto w = random_weights(g, rng);
  RotaryTable t(RopeConfig::standard(10000, g.d_qk), 16);
  auto H = randn(7, 16, rng);
  EXPECT_LT(max_abs_diff(attend_full(H, w, g, t), loop_oracle(H, w, g, 10000)), 1e-5);
  auto Hf = H.cast<float>();
  AttentionWeights<float> wf{w.w_q.cast<float>(), w.w_k.cast<float>(), w.w_v.cast<float>(),
                             w.w_o.cast<float>()};
  auto of = attend_full(Hf, wf, g, t).cast<double>();
  EXPECT_LT(max_abs_diff(of, loop_oracle(H, w, g, 10000)), 1e-4);
}

TEST(AttendFull, ShapeErrors) {
  std::mt19937_64 rng(3);
  HeadGeometry g{16, 4, 2, 6, 10};
  auto w = random_weights(g, rng);
  RotaryTable t(RopeConfig::standard(10000, g.d_qk), 16);
  EXPECT_THROW(attend_full(randn(3, 15, rng), w, g, t), ShapeError);
  auto bad = w;
  bad.w_o = randn(4 * 9, 16, rng);
  EXPECT_THROW(attend_full(randn(3, 16, rng), bad, g, t), ShapeError);
  RotaryTable wrong(RopeConfig::standard(10000, 8), 16);
  EXPECT_THROW(attend_full(randn(3, 16, rng), w, g, wrong), ShapeError);
  EXPECT_THROW(attend_full(randn(17, 16, rng), w, g, t), ShapeError);
}

TEST(AttendFull, CausalityIsExact) {
  std::mt19937_64 rng(4);
  HeadGeometry g{12, 4, 1, 4, 8};
  auto w = random_weights(g, rng);
  RotaryTable t(RopeConfig::standard(10000, g.d_qk), 16);
  auto H = randn(10, 12, rng);
  const auto base = attend_full(H, w, g, t);
  for (std::size_t cut = 1; cut < 10; ++cut) {
    auto Z = H;
    for (std::size_t r = cut; r < 10; ++r)
      for (std::size_t c = 0; c < 12; ++c) Z(r, c) = 0.0;
    const auto out = attend_full(Z, w, g, t);
    for (std::size_t r = 0; r < cut; ++r)
      for (std::size_t c = 0; c < 12; ++c) ASSERT_EQ(out(r, c), base(r, c));
  }
}

TEST(AttendFull, SingleKvHeadSharedByAllQueries) {
  std::mt19937_64 rng(5);
  HeadGeometry g{8, 4, 1, 4, 4};
  auto w = random_weights(g, rng);
  // All query heads identical: with one shared kv head every head's output
  // block must then be identical, so w_o's blocks contribute equally.
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t h = 1; h < 4; ++h)
      for (std::size_t c = 0; c < 4; ++c) w.w_q(r, h * 4 + c) = w.w_q(r, c);
  for (std::size_t h = 1; h < 4; ++h)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t m = 0; m < 8; ++m) w.w_o(h * 4 + c, m) = w.w_o(c, m);
  RotaryTable t(RopeConfig::standard(10000, 4), 16);
  auto H = randn(6, 8, rng);
  auto single = w;
  single.w_q = randn(8, 4, rng);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 4; ++c) single.w_q(r, c) = w.w_q(r, c);
  single.w_o = randn(4, 8, rng);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t m = 0; m < 8; ++m) single.w_o(c, m) = 4.0 * w.w_o(c, m);
  const auto a = attend_full(H, w, g, t);
  const auto b = attend_full(H, single, HeadGeometry{8, 1, 1, 4, 4}, t);
  EXPECT_LT(max_abs_diff(a, b), 1e-12);

  KvCache<double> cache(1, g);
  for (std::size_t p = 0; p < 6; ++p) attend_incremental<double>(H.row(p), cache.layer(0), w, g, t, p);
  EXPECT_EQ(cache.layer(0).heads.size(), 1u);
  EXPECT_EQ(cache.elements(), 6u * (4 + 4));
}

TEST(AttendFull, ValueChannelPermutationInvariance) {
  std::mt19937_64 rng(6);
  HeadGeometry g{16, 4, 2, 6, 10};
  auto w = random_weights(g, rng);
  RotaryTable t(RopeConfig::standard(10000, g.d_qk), 16);
  auto H = randn(9, 16, rng);
  std::vector<std::size_t> perm(g.d_vo);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto pw = w;
  for (std::size_t kv = 0; kv < g.n_kv_heads; ++kv)
    for (std::size_t c = 0; c < g.d_vo; ++c)
      for (std::size_t r = 0; r < 16; ++r)
        pw.w_v(r, kv * g.d_vo + c) = w.w_v(r, kv * g.d_vo + perm[c]);
  for (std::size_t h = 0; h < g.n_heads; ++h)
    for (std::size_t c = 0; c < g.d_vo; ++c)
      for (std::size_t m = 0; m < 16; ++m) pw.w_o(h * g.d_vo + c, m) = w.w_o(h * g.d_vo + perm[c], m);
  EXPECT_LT(max_abs_diff(attend_full(H, w, g, t), attend_full(H, pw, g, t)), 1e-6);
}

TEST(AttendFull, GradientCheckThroughBlock) {
  std::mt19937_64 rng(7);
  HeadGeometry g{8, 4, 2, 4, 6};
  auto w = random_weights(g, rng);
  RotaryTable t(RopeConfig::standard(10000, g.d_qk), 8);
  auto H = randn(5, 8, rng);
  auto probe = randn(5, 8, rng);
  auto loss = [&](Var<double> out) { return ops::sum(ops::mul(out, out.tape->leaf(probe))); };
  EXPECT_LT(grad_check(
                [&](Var<double> x) { return loss(ops::attention(x, bind(*x.tape, w), g, t)); }, H),
            1e-4);
  EXPECT_LT(grad_check(
                [&](Var<double> wq) {
                  auto b = bind(*wq.tape, w);
                  b.w_q = wq;
                  return loss(ops::attention(wq.tape->leaf(H), b, g, t));
                },
                w.w_q),
            1e-4);
  EXPECT_LT(grad_check(
                [&](Var<double> wk) {
                  auto b = bind(*wk.tape, w);
                  b.w_k = wk;
                  return loss(ops::attention(wk.tape->leaf(H), b, g, t));
                },
                w.w_k),
            1e-4);
  EXPECT_LT(grad_check(
                [&](Var<double> wv) {
                  auto b = bind(*wv.tape, w);
                  b.w_v = wv;
                  return loss(ops::attention(wv.tape->leaf(H), b, g, t));
                },
                w.w_v),
            1e-4);
}

TEST(AttendIncremental, EmptyCacheEqualsSingleTokenFull) {
  std::mt19937_64 rng(8);
  HeadGeometry g{16, 4, 2, 6, 10};
  auto w = random_weights(g, rng);
  RotaryTable t(RopeConfig::standard(10000, g.d_qk), 4);
  auto H = randn(1, 16, rng);
  KvCache<double> cache(1, g);
  auto out = attend_incremental<double>(H.row(0), cache.layer(0), w, g, t, 0);
  auto full = attend_full(H, w, g, t);
  for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(out[c], full(0, c), 1e-12);
}

TEST(AttendIncremental, ThirtyTwoTokensMatchFullRows) {
  std::mt19937_64 rng(9);
  HeadGeometry g{32, 4, 2, 16, 8};
  auto w = random_weights(g, rng, 0.3);
  RotaryTable t(RopeConfig::standard(10000, g.d_qk), 32);
  auto H = randn(32, 32, rng);
  auto full = attend_full(H, w, g, t);
  KvCache<double> cache(1, g);
  for (std::size_t p = 0; p < 32; ++p) {
    auto o = attend_incremental<double>(H.row(p), cache.layer(0), w, g, t, p);
    for (std::size_t c = 0; c < 32; ++c) ASSERT_NEAR(o[c], full(p, c), 1e-5);
  }
}

TEST(AttendIncremental, TwentyRandomGeometries) {
  std::mt19937_64 rng(10);
  std::vector<HeadGeometry> geoms = {{16, 4, 2, 6, 10}, {32, 2, 2, 16, 64}, {8, 1, 1, 2, 2}};
  const std::size_t qk[] = {2, 4, 6, 8, 12, 16};
  const std::size_t vo[] = {2, 3, 5, 8, 10, 16, 20};
  const std::size_t heads[][2] = {{1, 1}, {2, 1}, {2, 2}, {4, 1}, {4, 2}, {4, 4}, {6, 3}};
  while (geoms.size() < 20) {
    const auto& hh = heads[rng() % 7];
    geoms.push_back({4 + 4 * (rng() % 6), hh[0], hh[1], qk[rng() % 6], vo[rng() % 7]});
  }
  std::size_t decoupled = 0;
  for (const auto& g : geoms) {
    decoupled += g.d_qk != g.d_vo;
    auto w = random_weights(g, rng, 0.4);
    for (auto layout : {RopeLayout::half_split, RopeLayout::adjacent}) {
      RotaryTable t(RopeConfig::standard(10000, g.d_qk, layout), 24);
      const std::size_t n = 3 + rng() % 22;
      auto H = randn(n, g.d_model, rng);
      auto full = attend_full(H, w, g, t);
      KvCache<double> cache(1, g);
      for (std::size_t p = 0; p < n; ++p) {
        auto o = attend_incremental<double>(H.row(p), cache.layer(0), w, g, t, p);
        for (std::size_t c = 0; c < g.d_model; ++c) ASSERT_NEAR(o[c], full(p, c), 1e-5);
      }
    }
  }
  EXPECT_GE(decoupled, 10u);
}

TEST(AttendIncremental, CacheHoldsRotatedKeysAndGrows) {
  std::mt19937_64 rng(11);
  HeadGeometry g{8, 2, 2, 4, 6};
  auto w = random_weights(g, rng);
  RotaryTable t(RopeConfig::standard(10000, 4), 64);
  auto H = randn(40, 8, rng);
  KvCache<double> cache(1, g);
  std::size_t reallocations = 0, last_cap = cache.capacity();
  for (std::size_t p = 0; p < 40; ++p) {
    attend_incremental<double>(H.row(p), cache.layer(0), w, g, t, p);
    if (cache.capacity() != last_cap) ++reallocations, last_cap = cache.capacity();
  }
  EXPECT_EQ(cache.len(), 40u);
  EXPECT_GE(cache.capacity(), 40u);
  EXPECT_LE(reallocations, 7u);
  auto k = matmul_plain(H, w.w_k);
  for (std::size_t p : {0u, 13u, 39u})
    for (std::size_t hd = 0; hd < 2; ++hd) {
      std::vector<double> kv(k.row(p).begin() + hd * 4, k.row(p).begin() + hd * 4 + 4);
      const auto rotated = apply_rope<double>(kv, p, t);
      const auto cached = cache.key(0, hd, p);
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(cached[c], rotated[c], 1e-12);
    }
}

TEST(AttendIncremental, PositionMismatchIsAnError) {
  std::mt19937_64 rng(12);
  HeadGeometry g{8, 2, 2, 4, 6};
  auto w = random_weights(g, rng);
  RotaryTable t(RopeConfig::standard(10000, 4), 8);
  auto H = randn(2, 8, rng);
  KvCache<double> cache(1, g);
  EXPECT_THROW(attend_incremental<double>(H.row(0), cache.layer(0), w, g, t, 1), Error);
  attend_incremental<double>(H.row(0), cache.layer(0), w, g, t, 0);
  EXPECT_THROW(attend_incremental<double>(H.row(1), cache.layer(0), w, g, t, 0), Error);
}
