#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <random>

#include "cld/rope.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cld;
using cld::testing::complex_score;
using cld::testing::grad_check;
using cld::testing::project;
using cld::testing::random_positions;
using cld::testing::random_tensor;

namespace {

// Plain softmax(q k^T / sqrt(d) + mask) v for one head, loops only.
std::vector<double> naive_attention(const std::vector<double>& q, const std::vector<double>& k,
                                    const std::vector<double>& v, std::size_t L, std::size_t H,
                                    std::size_t d, std::size_t head,
                                    const std::vector<std::uint8_t>& mask) {
  std::vector<double> out(L * d, 0.0);
  for (std::size_t n = 0; n < L; ++n) {
    std::vector<double> logits(L, -INFINITY);
    double mx = -INFINITY;
    for (std::size_t m = 0; m < L; ++m) {
      if (!mask.empty() && !mask[m]) continue;
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += q[(n * H + head) * d + c] * k[(m * H + head) * d + c];
      logits[m] = s / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, logits[m]);
    }
    double z = 0;
    for (std::size_t m = 0; m < L; ++m) z += std::isinf(logits[m]) ? 0.0 : std::exp(logits[m] - mx);
    for (std::size_t m = 0; m < L; ++m) {
      if (std::isinf(logits[m])) continue;
      const double p = std::exp(logits[m] - mx) / z;
      for (std::size_t c = 0; c < d; ++c) out[n * d + c] += p * v[(m * H + head) * d + c];
    }
  }
  return out;
}

}  // namespace

TEST(RopeConfig, DefaultSplits) {
  const auto c24 = RopeConfig::for_head_dim(24);
  EXPECT_EQ(c24.d_l + c24.d_h + c24.d_w, 24u);
  EXPECT_EQ(c24.d_l, 6u);
  const auto c32 = RopeConfig::for_head_dim(32);
  EXPECT_EQ(c32.d_l, 8u);
  EXPECT_EQ(c32.d_h, 12u);
  EXPECT_EQ(c32.d_w, 12u);
}

TEST(RopeConfig, InvalidSplitsAreRejected) {
  RopeConfig c;
  c.d_head = 32;
  c.d_l = 7;
  c.d_h = 13;
  c.d_w = 12;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(RopeConfig::for_head_dim(4), ConfigError);
  EXPECT_THROW(RopeConfig::for_head_dim(9), ConfigError);
}

TEST(ApplyRope, HeadDimMismatchIsAConfigError) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor({2, 1, 16}, rng, false);
  EXPECT_THROW(apply_rope(x, random_positions(2, rng), RopeConfig::for_head_dim(24)), ConfigError);
}

TEST(ApplyRope, ZeroPositionsAreIdentity) {
  std::mt19937_64 rng(2);
  const auto x = random_tensor({5, 2, 24}, rng, false);
  const auto y = apply_rope(x, std::vector<Position>(5, Position{0, 0, 0}), RopeConfig::for_head_dim(24));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(ApplyRope, PreservesPairNorms) {
  std::mt19937_64 rng(3);
  const auto x = random_tensor({7, 3, 24}, rng, false);
  const auto y = apply_rope(x, random_positions(7, rng), RopeConfig::for_head_dim(24));
  for (std::size_t i = 0; i < x.numel(); i += 2) {
    EXPECT_NEAR(std::hypot(x[i], x[i + 1]), std::hypot(y[i], y[i + 1]), 1e-12);
  }
}

TEST(ApplyRope, DotProductMatchesComplexForm) {
  std::mt19937_64 rng(4);
  const auto cfg = RopeConfig::for_head_dim(24);
  for (int trial = 0; trial < 100; ++trial) {
    const auto q = random_tensor({2, 1, 24}, rng, false);
    const auto k = random_tensor({2, 1, 24}, rng, false);
    const auto pos = random_positions(2, rng);
    const auto qr = apply_rope(q, pos, cfg), kr = apply_rope(k, pos, cfg);
    double dot = 0;
    for (std::size_t c = 0; c < 24; ++c) dot += qr[c] * kr[24 + c];
    EXPECT_NEAR(dot, complex_score(q.values().data(), k.values().data() + 24, pos[0], pos[1], cfg), 1e-10);
  }
}

// With only the first pair of each axis populated every frequency is 1,
// which is the single-constant reading with theta = 1.
TEST(ApplyRope, SingleConstantThetaSpecialCase) {
  std::mt19937_64 rng(5);
  const auto cfg = RopeConfig::for_head_dim(24);
  auto q = random_tensor({2, 1, 24}, rng, false), k = random_tensor({2, 1, 24}, rng, false);
  const std::size_t keep[3] = {0, cfg.d_l, cfg.d_l + cfg.d_h};
  for (auto* t : {&q, &k}) {
    auto v = t->mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::size_t c = i % 24;
      bool kept = false;
      for (std::size_t s : keep) kept |= c == s || c == s + 1;
      if (!kept) v[i] = 0.0;
    }
  }
  const auto pos = random_positions(2, rng);
  const auto qr = apply_rope(q, pos, cfg), kr = apply_rope(k, pos, cfg);
  double dot = 0;
  for (std::size_t c = 0; c < 24; ++c) dot += qr[c] * kr[24 + c];
  const int delta[3] = {pos[0].l - pos[1].l, pos[0].h - pos[1].h, pos[0].w - pos[1].w};
  double expected = 0;
  for (int a = 0; a < 3; ++a) {
    const std::complex<double> qc(q[keep[a]], q[keep[a] + 1]);
    const std::complex<double> kc(k[24 + keep[a]], k[24 + keep[a] + 1]);
    expected += std::real(qc * std::conj(kc) * std::polar(1.0, static_cast<double>(delta[a])));
  }
  EXPECT_NEAR(dot, expected, 1e-12);
}

TEST(ApplyRope, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor({4, 2, 16}, rng);
  const auto pos = random_positions(4, rng);
  const auto cfg = RopeConfig::for_head_dim(16);
  EXPECT_LT(grad_check([&] { return project(apply_rope(x, pos, cfg)); }, x), 1e-7);
}

TEST(Attention, SingleTokenReturnsValue) {
  std::mt19937_64 rng(7);
  const auto q = random_tensor({1, 2, 16}, rng, false), k = random_tensor({1, 2, 16}, rng, false);
  const auto v = random_tensor({1, 2, 16}, rng, false);
  const auto out = rope_attention(q, k, v, random_positions(1, rng), RopeConfig::for_head_dim(16));
  for (std::size_t i = 0; i < v.numel(); ++i) EXPECT_NEAR(out[i], v[i], 1e-15);
}

TEST(Attention, IdenticalTokensAverageValues) {
  std::mt19937_64 rng(8);
  const auto one = random_tensor({1, 1, 16}, rng, false);
  const auto q = concat_rows<double>({one, one, one, one});
  const auto v = random_tensor({4, 1, 16}, rng, false);
  const auto out = rope_attention(q, q, v, std::vector<Position>(4, Position{1, 2, 3}),
                                  RopeConfig::for_head_dim(16));
  for (std::size_t c = 0; c < 16; ++c) {
    double mean = 0;
    for (std::size_t n = 0; n < 4; ++n) mean += v[n * 16 + c] / 4.0;
    for (std::size_t n = 0; n < 4; ++n) EXPECT_NEAR(out[n * 16 + c], mean, 1e-12);
  }
}

TEST(Attention, MaskLengthMismatchIsAContractError) {
  std::mt19937_64 rng(9);
  const auto q = random_tensor({3, 1, 16}, rng, false);
  const std::vector<std::uint8_t> mask{1, 0};
  EXPECT_THROW(rope_attention(q, q, q, random_positions(3, rng), RopeConfig::for_head_dim(16), mask),
               ContractError);
}

TEST(Attention, GlobalShiftLeavesMatrixUnchanged) {
  std::mt19937_64 rng(10);
  const auto cfg = RopeConfig::for_head_dim(24);
  std::uniform_int_distribution<int> shift(-20, 20);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_tensor({12, 2, 24}, rng, false, -2, 2);
    const auto k = random_tensor({12, 2, 24}, rng, false, -2, 2);
    auto pos = random_positions(12, rng);
    const auto before = attention_matrices(q, k, pos, cfg);
    const Position d{shift(rng), shift(rng), shift(rng)};
    for (auto& p : pos) p = Position{p.l + d.l, p.h + d.h, p.w + d.w};
    const auto after = attention_matrices(q, k, pos, cfg);
    for (std::size_t h = 0; h < before.size(); ++h) {
      EXPECT_LE((before[h] - after[h]).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(Attention, RowsSumToOneOverUnmaskedKeys) {
  std::mt19937_64 rng(11);
  const auto q = random_tensor({6, 2, 16}, rng, false, -3, 3);
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 0};
  const auto probs = attention_matrices(q, q, random_positions(6, rng), RopeConfig::for_head_dim(16), mask);
  for (const auto& p : probs) {
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
      EXPECT_EQ(p(r, 2), 0.0);
      EXPECT_EQ(p(r, 5), 0.0);
    }
  }
}

// Zeroing the spatial slices leaves scores that depend on layer distance only.
TEST(Attention, AxisSeparability) {
  std::mt19937_64 rng(12);
  const auto cfg = RopeConfig::for_head_dim(24);
  auto q = random_tensor({1, 1, 24}, rng, false), k = random_tensor({1, 1, 24}, rng, false);
  for (auto* t : {&q, &k}) {
    auto v = t->mutable_values();
    for (std::size_t c = cfg.d_l; c < 24; ++c) v[c] = 0.0;
  }
  const auto score = [&](Position a, Position b) {
    const auto qr = apply_rope(q, {a}, cfg), kr = apply_rope(k, {b}, cfg);
    double s = 0;
    for (std::size_t c = 0; c < 24; ++c) s += qr[c] * kr[c];
    return s;
  };
  EXPECT_NEAR(score({3, 0, 0}, {1, 0, 0}), score({3, 9, 4}, {1, 2, 7}), 1e-12);
  EXPECT_GT(std::abs(score({3, 0, 0}, {1, 0, 0}) - score({5, 0, 0}, {1, 0, 0})), 1e-6);
}

TEST(Attention, MatchesNaiveReference) {
  std::mt19937_64 rng(13);
  const std::size_t L = 9, H = 2, d = 16;
  const auto cfg = RopeConfig::for_head_dim(d);
  const auto q = random_tensor({L, H, d}, rng, false), k = random_tensor({L, H, d}, rng, false);
  const auto v = random_tensor({L, H, d}, rng, false);
  const auto pos = random_positions(L, rng);
  const std::vector<std::uint8_t> mask{1, 1, 1, 1, 0, 1, 1, 1, 0};
  const auto out = rope_attention(q, k, v, pos, cfg, mask);
  const auto qr = apply_rope(q, pos, cfg), kr = apply_rope(k, pos, cfg);
  const std::vector<double> qv(qr.values().begin(), qr.values().end());
  const std::vector<double> kv(kr.values().begin(), kr.values().end());
  const std::vector<double> vv(v.values().begin(), v.values().end());
  for (std::size_t h = 0; h < H; ++h) {
    const auto ref = naive_attention(qv, kv, vv, L, H, d, h, mask);
    for (std::size_t n = 0; n < L; ++n) {
      for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out[(n * H + h) * d + c], ref[n * d + c], 1e-13);
    }
  }
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  const auto cfg = RopeConfig::for_head_dim(16);
  const auto q = random_tensor({5, 2, 16}, rng), k = random_tensor({5, 2, 16}, rng);
  const auto v = random_tensor({5, 2, 16}, rng);
  const auto pos = random_positions(5, rng);
  const std::vector<std::uint8_t> mask{1, 1, 1, 0, 1};
  const auto f = [&] { return project(rope_attention(q, k, v, pos, cfg, mask)); };
  EXPECT_LT(grad_check(f, q), 1e-7);
  EXPECT_LT(grad_check(f, k), 1e-7);
  EXPECT_LT(grad_check(f, v), 1e-7);
}
