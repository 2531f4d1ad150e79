#include <gtest/gtest.h>

#include <random>
#include <set>

#include "cld/flow.hpp"
#include "cld/synth.hpp"
#include "grad_suite.hpp"
#include "test_util.hpp"

using namespace cld;
using cld::testing::small_model_config;

namespace {

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<TrainingExample<double>> small_dataset(std::size_t n, const ModelConfig& cfg) {
  std::vector<TrainingExample<double>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_example<double>(cld::testing::small_stack(100 + i), cfg));
  return out;
}

}  // namespace

TEST(Interpolate, EndpointsAndMidpoint) {
  std::mt19937_64 rng(1);
  const auto x0 = cld::testing::random_tensor({3, 4}, rng, false);
  const auto x1 = cld::testing::random_tensor({3, 4}, rng, false);
  const auto a = interpolate(x0, x1, 0.0), b = interpolate(x0, x1, 1.0), m = interpolate(x0, x1, 0.5);
  for (std::size_t i = 0; i < x0.numel(); ++i) {
    EXPECT_EQ(a[i], x0[i]);
    EXPECT_EQ(b[i], x1[i]);
    EXPECT_NEAR(m[i], 0.5 * (x0[i] + x1[i]), 1e-15);
  }
}

TEST(Interpolate, InvalidArguments) {
  const Tensor<double> a(Shape{2, 2}), b(Shape{2, 3});
  EXPECT_THROW(interpolate(a, a, -0.1), ConfigError);
  EXPECT_THROW(interpolate(a, a, 1.1), ConfigError);
  EXPECT_THROW(interpolate(a, b, 0.5), DimensionError);
}

TEST(Interpolate, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  const auto x0 = cld::testing::random_tensor({3, 4}, rng);
  const auto x1 = cld::testing::random_tensor({3, 4}, rng);
  const auto f = [&] { return cld::testing::project(square(interpolate(x0, x1, 0.3))); };
  EXPECT_LT(cld::testing::grad_check(f, x0), 1e-7);
  EXPECT_LT(cld::testing::grad_check(f, x1), 1e-7);
}

TEST(ModelSpace, RoundTripAndRange) {
  const Tensor<double> px(Shape{3}, {0.0, 0.5, 1.0});
  const auto m = to_model_space(px);
  EXPECT_EQ(m[0], -1.0);
  EXPECT_EQ(m[1], 0.0);
  EXPECT_EQ(m[2], 1.0);
  const auto back = from_model_space(m);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back[i], px[i]);
}

TEST(VelocityLoss, ZeroResidualIsZeroAndLossIsNonNegative) {
  std::mt19937_64 rng(3);
  const auto v = cld::testing::random_tensor({4, 6}, rng, false);
  const auto u = cld::testing::random_tensor({4, 6}, rng, false);
  const std::vector<double> w{1, 1, 0.5, 0};
  EXPECT_EQ(velocity_loss(v, v, w).item(), 0.0);
  EXPECT_GE(velocity_loss(v, u, w).item(), 0.0);
  // Independent weighted mean.
  double num = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 6; ++j) num += w[i] * (v[i * 6 + j] - u[i * 6 + j]) * (v[i * 6 + j] - u[i * 6 + j]);
  }
  EXPECT_NEAR(velocity_loss(v, u, w).item(), num / (2.5 * 6), 1e-12);
  EXPECT_THROW(velocity_loss(v, u, std::vector<double>(4, 0.0)), ContractError);
  EXPECT_THROW(velocity_loss(v, u, std::vector<double>(3, 1.0)), DimensionError);
}

TEST(TokenWeights, CompositeAndLayerWeightsArePlacedBySegment) {
  const ModelConfig cfg = small_model_config();
  const auto ex = make_example<double>(cld::testing::small_stack(1), cfg);
  const auto padded = pad_sequence(ex.seq, 3);
  const auto w = token_weights(padded, LossWeights{2.0, 0.25});
  for (std::size_t i = 0; i < padded.length(); ++i) {
    if (i >= ex.seq.length()) {
      EXPECT_EQ(w[i], 0.0);
    } else {
      EXPECT_EQ(w[i], padded.positions[i].l == kCompositeLayer ? 0.25 : 2.0);
    }
  }
}

TEST(FmLoss, EmptyBatchIsAContractError) {
  const ModelConfig cfg = small_model_config();
  const auto params = ModelParams<double>::init(cfg, 1);
  EXPECT_THROW(fm_loss<double>(params, cfg, {}, {}, LossWeights{}), ContractError);
}

TEST(FmLoss, IsMeanOfExampleLosses) {
  const ModelConfig cfg = small_model_config();
  const auto params = ModelParams<double>::init(cfg, 2);
  const auto data = small_dataset(2, cfg);
  std::mt19937_64 rng(4);
  const std::vector<FlowDraw<double>> draws{draw_flow(data[0], 0.0, rng), draw_flow(data[1], 0.0, rng)};
  const double joint = fm_loss<double>(params, cfg, {&data[0], &data[1]}, draws, LossWeights{}).item();
  const double a = example_loss(params, cfg, data[0], draws[0], LossWeights{}).item();
  const double b = example_loss(params, cfg, data[1], draws[1], LossWeights{}).item();
  EXPECT_NEAR(joint, 0.5 * (a + b), 1e-12);
}

TEST(Trainer, LossDecreasesOnFixedBatch) {
  const ModelConfig cfg = small_model_config();
  TrainConfig tc;
  tc.steps = 200;
  tc.batch_size = 4;
  tc.lr = 3e-3;
  tc.warmup_steps = 10;
  tc.text_drop = 0.0;
  tc.seed = 5;
  Trainer<float> trainer(cfg, tc, [&] {
    std::vector<TrainingExample<float>> out;
    for (std::size_t i = 0; i < 4; ++i) out.push_back(make_example<float>(cld::testing::small_stack(200 + i), cfg));
    return out;
  }());
  double first = 0, last = 0;
  for (std::size_t s = 0; s < tc.steps; ++s) {
    const double l = trainer.train_step();
    if (s < 20) first += l / 20;
    if (s >= tc.steps - 20) last += l / 20;
  }
  EXPECT_LT(last, 0.8 * first);
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  const ModelConfig cfg = small_model_config();
  TrainConfig tc;
  tc.steps = 6;
  tc.batch_size = 2;
  tc.warmup_steps = 2;
  tc.seed = 6;
  const auto data = small_dataset(3, cfg);
  Trainer<double> full(cfg, tc, data);
  for (int i = 0; i < 6; ++i) full.train_step();

  const auto dir = cld::testing::temp_dir("flow_resume");
  const std::string path = (dir / "half.ckpt").string();
  Trainer<double> first(cfg, tc, data);
  for (int i = 0; i < 3; ++i) first.train_step();
  first.save(path);
  Trainer<double> second(cfg, tc, data);
  second.resume(path);
  EXPECT_EQ(second.step(), 3u);
  for (int i = 0; i < 3; ++i) second.train_step();

  const auto a = full.params().named(), b = second.params().named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(max_abs_diff(a[i].second.values(), b[i].second.values()), 0.0) << a[i].first;
  }
}

TEST(Trainer, BatchesCoverEveryExampleOncePerEpoch) {
  const ModelConfig cfg = small_model_config();
  TrainConfig tc;
  tc.batch_size = 2;
  Trainer<double> trainer(cfg, tc, small_dataset(4, cfg));
  std::vector<int> counts(4, 0);
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t i : trainer.batch_indices(s)) ++counts[i];
  }
  for (int c : counts) EXPECT_EQ(c, 1);
}

TEST(TrainConfig, InvalidValuesAreConfigErrors) {
  TrainConfig tc;
  tc.lr = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.loss_weights = LossWeights{0, 0};
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.lr_schedule = "step";
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.text_drop = 1.5;
  EXPECT_THROW(tc.validate(), ConfigError);
  SampleConfig sc;
  sc.n_steps = 0;
  EXPECT_THROW(sc.validate(), ConfigError);
}

TEST(TrainConfig, ScheduleWarmsUpAndDecays) {
  TrainConfig tc;
  tc.steps = 1000;
  tc.warmup_steps = 10;
  EXPECT_NEAR(tc.lr_at(0), tc.lr * 0.1 * (tc.min_lr_ratio + (1 - tc.min_lr_ratio) * 1.0), 1e-9);
  EXPECT_GT(tc.lr_at(100), tc.lr_at(900));
  EXPECT_NEAR(tc.lr_at(1000), tc.lr * tc.min_lr_ratio, 1e-12);
  tc.lr_schedule = "constant";
  EXPECT_EQ(tc.lr_at(500), tc.lr);
}

struct CfgFixture {
  ModelConfig cfg = small_model_config();
  ModelParams<double> params = ModelParams<double>::init(cfg, 7);
  LayerStack stack = cld::testing::small_stack(7);
  TokenSequence<double> layout =
      make_layout<double>(32, 32, {stack.foregrounds[0].bbox}, cfg.patch_size, cfg.max_layers);
  GuidanceSequence<double> g =
      build_guidance(encode_condition(params.mlca, stack.composite, cfg.patch_size), layout);
  Tensor<double> x = gaussian_tokens<double>(layout.tokens.shape(), 3);
  std::vector<int> text = encode_prompt(stack.global_prompt);
};

TEST(Cfg, ScaleOneIsConditionalOnly) {
  CfgFixture f;
  CfgStats stats;
  const auto v = cfg_velocity(f.params, f.cfg, f.x, f.layout, 0.5, f.text, &f.g, &f.g, 1.0, &stats);
  const auto c = forward(f.params, f.cfg, f.x, f.layout, 0.5, f.text, &f.g);
  EXPECT_EQ(max_abs_diff(v.values(), c.values()), 0.0);
  EXPECT_EQ(stats.conditional, 1u);
  EXPECT_EQ(stats.unconditional, 0u);
}

TEST(Cfg, ScaleZeroIsUnconditionalOnly) {
  CfgFixture f;
  CfgStats stats;
  const auto v = cfg_velocity(f.params, f.cfg, f.x, f.layout, 0.5, f.text, &f.g, &f.g, 0.0, &stats);
  const auto u = forward(f.params, f.cfg, f.x, f.layout, 0.5, {}, &f.g);
  EXPECT_EQ(max_abs_diff(v.values(), u.values()), 0.0);
  EXPECT_EQ(stats.conditional, 0u);
  EXPECT_EQ(stats.unconditional, 1u);
}

TEST(Cfg, IsAffineInScale) {
  CfgFixture f;
  const auto c = forward(f.params, f.cfg, f.x, f.layout, 0.5, f.text, &f.g);
  const auto u = forward(f.params, f.cfg, f.x, f.layout, 0.5, {}, &f.g);
  for (double s : {0.5, 2.0, 4.5}) {
    const auto v = cfg_velocity(f.params, f.cfg, f.x, f.layout, 0.5, f.text, &f.g, &f.g, s);
    for (std::size_t i = 0; i < v.numel(); ++i) EXPECT_NEAR(v[i], u[i] + s * (c[i] - u[i]), 1e-12);
  }
  EXPECT_THROW(cfg_velocity(f.params, f.cfg, f.x, f.layout, 0.5, f.text, &f.g, &f.g, -1.0), ValidationError);
}

TEST(Sample, SingleEulerStepIsNoiseMinusVelocity) {
  CfgFixture f;
  SampleConfig sc;
  sc.n_steps = 1;
  sc.cfg_scale = 1.0;
  sc.seed = 3;
  const LayerStack out = sample(f.params, f.cfg, SampleRequest{f.stack.composite, {f.stack.foregrounds[0].bbox}, f.stack.global_prompt}, sc);
  const auto v = forward(f.params, f.cfg, f.x, f.layout, 1.0, f.text, &f.g);
  auto expected = f.layout;
  std::vector<double> vals(f.x.numel());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = (f.x[i] - v[i] + 1.0) * 0.5;
  expected.tokens = Tensor<double>(f.x.shape(), vals);
  const LayerStack ref = scatter_to_layers(expected);
  for (std::size_t i = 0; i < ref.background.data.size(); ++i) {
    EXPECT_NEAR(out.background.data[i], ref.background.data[i], 1e-12);
  }
  for (std::size_t i = 0; i < ref.foregrounds[0].image.data.size(); ++i) {
    EXPECT_NEAR(out.foregrounds[0].image.data[i], ref.foregrounds[0].image.data[i], 1e-12);
  }
}

TEST(Sample, DeterministicAndBranchCounts) {
  CfgFixture f;
  SampleConfig sc;
  sc.n_steps = 4;
  sc.seed = 9;
  const SampleRequest req{f.stack.composite, {f.stack.foregrounds[0].bbox}, f.stack.global_prompt};
  CfgStats stats;
  const LayerStack a = sample(f.params, f.cfg, req, sc, &stats);
  const LayerStack b = sample(f.params, f.cfg, req, sc);
  EXPECT_EQ(a.background, b.background);
  EXPECT_EQ(a.foregrounds[0].image, b.foregrounds[0].image);
  EXPECT_EQ(stats.conditional, 4u);
  EXPECT_EQ(stats.unconditional, 4u);
  sc.cfg_scale = 1.0;
  CfgStats one;
  sample(f.params, f.cfg, req, sc, &one);
  EXPECT_EQ(one.conditional, 4u);
  EXPECT_EQ(one.unconditional, 0u);
  sc.seed = 10;
  const LayerStack c = sample(f.params, f.cfg, req, sc);
  EXPECT_NE(a.background, c.background);
}

TEST(Sample, WrongFrameSizeIsAValidationError) {
  CfgFixture f;
  EXPECT_THROW(sample(f.params, f.cfg, SampleRequest{RgbImage(16, 16), {}, {}}, SampleConfig{}), ValidationError);
}

TEST(MixSeed, StreamsAndIndicesAreDistinct) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 4; ++s) {
    for (std::uint64_t i = 0; i < 50; ++i) EXPECT_TRUE(seen.insert(detail::mix_seed(3, s, i)).second);
  }
}
