#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "cld/metrics.hpp"
#include "cld/synth.hpp"

using namespace cld;

namespace {

RgbImage random_rgb(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  RgbImage img(h, w);
  for (double& v : img.data) v = u(rng);
  return img;
}

RgbImage constant_rgb(std::size_t h, std::size_t w, double v) {
  RgbImage img(h, w);
  std::fill(img.data.begin(), img.data.end(), v);
  return img;
}

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

LayerStack synth(std::uint64_t seed, std::size_t layers) {
  SynthConfig cfg;
  cfg.n_layers = layers;
  return synth_stack(seed, cfg);
}

}  // namespace

TEST(Psnr, IdenticalImagesHitTheCap) {
  std::mt19937_64 rng(1);
  const auto a = random_rgb(16, 16, rng);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
}

TEST(Psnr, HalfOffsetIsSixDecibels) {
  EXPECT_NEAR(psnr(constant_rgb(8, 8, 0.0), constant_rgb(8, 8, 0.5)), 6.0206, 1e-4);
}

TEST(Psnr, MatchesDirectFormula) {
  std::mt19937_64 rng(2);
  const auto a = random_rgb(12, 9, rng), b = random_rgb(12, 9, rng);
  double se = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) se += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  EXPECT_NEAR(psnr(a, b), -10.0 * std::log10(se / static_cast<double>(a.data.size())), 1e-10);
  EXPECT_THROW(psnr(a, RgbImage(12, 8)), ContractError);
}

TEST(Ssim, IdentityIsOne) {
  std::mt19937_64 rng(3);
  const auto a = random_rgb(24, 24, rng);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, ConstantImagesMatchLuminanceTerm) {
  const double m1 = 0.2, m2 = 0.7, c1 = 1e-4;
  const double expected = (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
  EXPECT_NEAR(ssim(constant_rgb(16, 16, m1), constant_rgb(16, 16, m2)), expected, 1e-12);
}

TEST(Ssim, InvertedNoiseIsNegative) {
  std::mt19937_64 rng(4);
  const auto a = random_rgb(32, 32, rng);
  RgbImage b = a;
  for (double& v : b.data) v = 1.0 - v;
  EXPECT_LT(ssim(a, b), 0.0);
}

TEST(Ssim, TooSmallImagesAreRejected) {
  EXPECT_THROW(ssim(RgbImage(8, 8), RgbImage(8, 8)), ContractError);
}

TEST(RgbL1, FlattensOntoGray) {
  RgbaImage a(4, 4), b(4, 4);
  // Fully transparent layers both flatten to gray whatever their color.
  for (std::size_t p = 0; p < 16; ++p) a.data[p * 4] = 1.0;
  EXPECT_EQ(rgb_l1(a, b), 0.0);
  for (std::size_t p = 0; p < 16; ++p) {
    a.data[p * 4 + 3] = 1.0;
    b.data[p * 4 + 3] = 1.0;
  }
  // Red channel differs by 1, the other two channels agree.
  EXPECT_NEAR(rgb_l1(a, b), 1.0 / 3.0, 1e-15);
}

TEST(Masks, IouAndF1OnHandCounts) {
  const std::vector<double> p{0.9, 0.9, 0.9, 0.1, 0.1};
  const std::vector<double> g{0.9, 0.9, 0.1, 0.9, 0.1};
  // tp 2, fp 1, fn 1.
  EXPECT_NEAR(mask_iou(p, g), 0.5, 1e-15);
  EXPECT_NEAR(f1_score(p, g), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(mask_iou({0.1}, {0.2}), 1.0);
  EXPECT_EQ(f1_score({0.1}, {0.2}), 1.0);
  EXPECT_THROW(mask_iou({0.1}, {0.2, 0.3}), ContractError);
}

TEST(Masks, ThresholdIsStrict) {
  EXPECT_EQ(mask_iou({0.5}, {0.9}), 0.0);
  EXPECT_EQ(mask_iou({0.5000001}, {0.9}), 1.0);
}

TEST(Masks, F1AndIouAreMonotoneRelated) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto p = random_vec(50, rng), g = random_vec(50, rng);
    const double iou = mask_iou(p, g), f1 = f1_score(p, g);
    EXPECT_NEAR(f1, 2 * iou / (1 + iou), 1e-12);
  }
}

TEST(SoftIou, HandValuesAndRange) {
  EXPECT_NEAR(alpha_soft_iou({0.2, 1.0}, {0.4, 0.5}), (0.2 + 0.5) / (0.4 + 1.0), 1e-15);
  EXPECT_EQ(alpha_soft_iou({0, 0}, {0, 0}), 1.0);
  std::mt19937_64 rng(6);
  for (int i = 0; i < 100; ++i) {
    const auto p = random_vec(20, rng);
    const double v = alpha_soft_iou(p, random_vec(20, rng));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(alpha_soft_iou(p, p), 1.0);
  }
}

// Reported values are rounded to four decimals, so agreement is to half a
// unit in the last place.
TEST(UnifiedScore, ReproducesReportedRows) {
  constexpr double kHalfUlp = 5e-5 + 1e-12;
  EXPECT_NEAR(unified_score(0.0653, 0.7055), 0.1799, kHalfUlp);
  EXPECT_NEAR(unified_score(0.0474, 0.7771), 0.1352, kHalfUlp);
  EXPECT_LT(unified_score(0.0474, 0.7771), unified_score(0.0653, 0.7055));
}

TEST(UnifiedScore, OutOfRangeInputsAreContractErrors) {
  EXPECT_THROW(unified_score(-0.1, 0.5), ContractError);
  EXPECT_THROW(unified_score(0.1, 1.5), ContractError);
  EXPECT_EQ(unified_score(0.0, 1.0), 0.0);
  EXPECT_EQ(unified_score(1.0, 0.0), 1.0);
}

TEST(Frechet, IdenticalSetsScoreZero) {
  std::mt19937_64 rng(7);
  std::vector<std::vector<double>> a;
  for (int i = 0; i < 40; ++i) a.push_back(random_vec(3, rng));
  const auto r = frechet_distance(a, a);
  EXPECT_NEAR(r.value, 0.0, 1e-9);
  EXPECT_FALSE(r.regularized);
}

TEST(Frechet, UnitMeanShiftScoresOne) {
  std::mt19937_64 rng(8);
  std::vector<std::vector<double>> a, b;
  for (int i = 0; i < 40; ++i) {
    a.push_back(random_vec(3, rng));
    b.push_back(a.back());
    b.back()[1] += 1.0;
  }
  EXPECT_NEAR(frechet_distance(a, b).value, 1.0, 1e-9);
}

// Two-dimensional closed form: Tr sqrt(A) = sqrt(Tr A + 2 sqrt(det A)) for a
// 2x2 PSD matrix, with Tr and det of Sa^1/2 Sb Sa^1/2 equal to those of Sa Sb.
TEST(Frechet, MatchesTwoDimensionalClosedForm) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> a, b;
    for (int i = 0; i < 30; ++i) {
      const double x = n(rng), y = n(rng);
      a.push_back({x, 0.5 * x + y});
      b.push_back({2.0 * n(rng) + 1.0, n(rng) - 0.5 * x});
    }
    const auto stats = [](const std::vector<std::vector<double>>& s) {
      std::array<double, 2> mu{0, 0};
      for (const auto& r : s) {
        mu[0] += r[0] / static_cast<double>(s.size());
        mu[1] += r[1] / static_cast<double>(s.size());
      }
      std::array<double, 4> cov{0, 0, 0, 0};
      for (const auto& r : s) {
        const double dx = r[0] - mu[0], dy = r[1] - mu[1];
        cov[0] += dx * dx;
        cov[1] += dx * dy;
        cov[3] += dy * dy;
      }
      for (double& c : cov) c /= static_cast<double>(s.size() - 1);
      cov[2] = cov[1];
      return std::pair{mu, cov};
    };
    const auto [ma, sa] = stats(a);
    const auto [mb, sb] = stats(b);
    const double tr_ab = sa[0] * sb[0] + sa[1] * sb[2] + sa[2] * sb[1] + sa[3] * sb[3];
    const double det = (sa[0] * sa[3] - sa[1] * sa[2]) * (sb[0] * sb[3] - sb[1] * sb[2]);
    const double expected = (ma[0] - mb[0]) * (ma[0] - mb[0]) + (ma[1] - mb[1]) * (ma[1] - mb[1]) +
                            sa[0] + sa[3] + sb[0] + sb[3] - 2.0 * std::sqrt(tr_ab + 2.0 * std::sqrt(det));
    const auto r = frechet_distance(a, b);
    EXPECT_NEAR(r.value, expected, 1e-9 * std::max(1.0, expected));
    EXPECT_NEAR(frechet_distance(b, a).value, r.value, 1e-9 * std::max(1.0, expected));
  }
}

TEST(Frechet, SingularCovarianceIsRegularizedAndFlagged) {
  std::vector<std::vector<double>> a{{0, 0}, {1, 0}, {2, 0}}, b{{0, 1}, {1, 1}, {2, 1}};
  const auto r = frechet_distance(a, b);
  EXPECT_TRUE(r.regularized);
  EXPECT_EQ(r.epsilon, kFrechetEpsilon);
  EXPECT_NEAR(r.value, 1.0, 1e-6);
  EXPECT_THROW(frechet_distance({{0.0}}, {{0.0}, {1.0}}), ContractError);
}

TEST(Pixel64, AveragesLumaOverCells) {
  const auto e = pixel64_embedding(constant_rgb(16, 16, 0.25));
  ASSERT_EQ(e.size(), 64u);
  for (double v : e) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(Dtw, DiagonalForSquareIdentityCost) {
  std::vector<std::vector<double>> c(3, std::vector<double>(3, 1.0));
  for (int i = 0; i < 3; ++i) c[i][i] = 0.0;
  const auto r = dtw_align(c);
  EXPECT_EQ(r.cost, 0.0);
  const std::vector<std::pair<std::size_t, std::size_t>> diag{{0, 0}, {1, 1}, {2, 2}};
  EXPECT_EQ(r.path, diag);
}

TEST(Dtw, ExtraPredictionIsAbsorbed) {
  const std::vector<std::vector<double>> c{{0, 1}, {1, 0}, {1, 0}};
  const auto r = dtw_align(c);
  EXPECT_EQ(r.cost, 0.0);
  EXPECT_EQ(r.path.size(), 3u);
  EXPECT_EQ(r.path.back(), (std::pair<std::size_t, std::size_t>{2, 1}));
}

TEST(Dtw, MatchesBruteForceOnSmallMatrices) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> c(3, std::vector<double>(4));
    for (auto& row : c) row = random_vec(4, rng);
    double best = std::numeric_limits<double>::infinity();
    const std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double acc) {
      acc += c[i][j];
      if (i == 2 && j == 3) {
        best = std::min(best, acc);
        return;
      }
      if (i < 2) walk(i + 1, j, acc);
      if (j < 3) walk(i, j + 1, acc);
      if (i < 2 && j < 3) walk(i + 1, j + 1, acc);
    };
    walk(0, 0, 0.0);
    const auto r = dtw_align(c);
    EXPECT_NEAR(r.cost, best, 1e-12);
    double along = 0;
    for (std::size_t k = 0; k < r.path.size(); ++k) {
      along += c[r.path[k].first][r.path[k].second];
      if (k > 0) {
        const auto [pi, pj] = r.path[k - 1];
        const auto [ci, cj] = r.path[k];
        EXPECT_TRUE(ci - pi <= 1 && cj - pj <= 1 && (ci > pi || cj > pj));
      }
    }
    EXPECT_NEAR(along, r.cost, 1e-12);
  }
  EXPECT_THROW(dtw_align({}), ContractError);
}

TEST(EvaluateStack, GroundTruthAgainstItself) {
  const LayerStack s = synth(11, 4);
  const auto r = evaluate_stack(s, s);
  EXPECT_EQ(r.per_layer.size(), 4u);
  EXPECT_EQ(r.mean_psnr, kPsnrCap);
  EXPECT_NEAR(r.mean_ssim, 1.0, 1e-12);
  EXPECT_EQ(r.mean_mask_iou, 1.0);
  EXPECT_EQ(r.mean_f1, 1.0);
  EXPECT_EQ(r.mean_alpha_soft_iou, 1.0);
  EXPECT_EQ(r.unified_score, 0.0);
  EXPECT_GT(r.recon_psnr, 40.0);
}

TEST(EvaluateStack, LayerCountMismatchNeedsDtw) {
  const LayerStack gt = synth(12, 3);
  LayerStack pred = gt;
  pred.foregrounds.insert(pred.foregrounds.begin(), pred.foregrounds.front());
  EXPECT_THROW(evaluate_stack(pred, gt), ValidationError);
  const auto r = evaluate_stack(pred, gt, EvalOptions{true});
  EXPECT_TRUE(r.dtw);
  EXPECT_EQ(r.dtw_cost, 0.0);
  EXPECT_EQ(r.per_layer.size(), 4u);
  EXPECT_EQ(r.mean_mask_iou, 1.0);
}

TEST(EvaluateStack, RandomPredictionsStayInRange) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0, 1);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const LayerStack gt = synth(seed, 1 + seed % 4);
    LayerStack pred = gt;
    for (double& v : pred.background.data) v = u(rng);
    for (auto& fg : pred.foregrounds) {
      for (double& v : fg.image.data) v = u(rng);
    }
    const auto r = evaluate_stack(pred, gt);
    for (const auto& m : r.per_layer) {
      EXPECT_GE(m.psnr, 0.0);
      EXPECT_LE(m.psnr, kPsnrCap);
      EXPECT_GE(m.ssim, -1.0);
      EXPECT_LE(m.ssim, 1.0);
      for (double v : {m.rgb_l1, m.alpha_soft_iou, m.mask_iou, m.f1}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
    EXPECT_GE(r.unified_score, 0.0);
    EXPECT_LE(r.unified_score, 1.0);
  }
}

TEST(EvaluateStack, PermutingBothStacksPermutesLayerMetrics) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0, 1);
  const LayerStack gt = synth(15, 4);
  LayerStack pred = gt;
  for (auto& fg : pred.foregrounds) {
    for (double& v : fg.image.data) v = std::clamp(v + 0.2 * (u(rng) - 0.5), 0.0, 1.0);
  }
  const auto a = evaluate_stack(pred, gt);
  LayerStack gt2 = gt, pred2 = pred;
  std::swap(gt2.foregrounds[0], gt2.foregrounds[2]);
  std::swap(pred2.foregrounds[0], pred2.foregrounds[2]);
  const auto b = evaluate_stack(pred2, gt2);
  EXPECT_EQ(a.per_layer[1].psnr, b.per_layer[3].psnr);
  EXPECT_EQ(a.per_layer[3].mask_iou, b.per_layer[1].mask_iou);
  EXPECT_NEAR(a.mean_psnr, b.mean_psnr, 1e-12);
  EXPECT_NEAR(a.unified_score, b.unified_score, 1e-12);
}
