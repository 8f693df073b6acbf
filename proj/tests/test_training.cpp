#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gabornet/data.hpp"
#include "gabornet/train.hpp"
#include "support/grad_check.hpp"

using namespace gabornet;

namespace {

Dataset small_textures(std::size_t per_class, Split split = Split::Train, double noise = 0.5) {
  TextureSpec s;
  s.seed = 7;
  s.n_per_class = per_class;
  s.noise = noise;
  s.split = split;
  return synth_textures(s);
}

ToySpec tiny_toy() {
  ToySpec s;
  s.c1 = 4;
  s.c2 = 4;
  s.k1 = 5;
  s.k2 = 3;
  return s;
}

}  // namespace

TEST(Loss, MatchesDirectFormula) {
  Rng rng(1);
  const auto logits = test_support::random_tensor({3, 5, 1, 1}, rng, 3.0);
  const std::vector<int> labels = {4, 0, 2};
  const auto r = softmax_cross_entropy<double>(logits, labels);
  double expect = 0.0;
  for (std::size_t b = 0; b < 3; ++b) {
    double z = 0.0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(logits(b, j, 0, 0));
    expect += -std::log(std::exp(logits(b, labels[b], 0, 0)) / z);
    for (std::size_t j = 0; j < 5; ++j) {
      const double p = std::exp(logits(b, j, 0, 0)) / z;
      EXPECT_NEAR(r.grad(b, j, 0, 0), (p - (static_cast<int>(j) == labels[b])) / 3.0, 1e-15);
    }
  }
  EXPECT_NEAR(r.loss, expect / 3.0, 1e-14);
}

TEST(Loss, StableForLargeLogits) {
  Tensor4<double> z(1, 3, 1, 1);
  z[0] = 1000.0;
  z[1] = -1000.0;
  z[2] = 999.0;
  const auto r = softmax_cross_entropy<double>(z, std::vector<int>{2});
  EXPECT_NEAR(r.loss, std::log1p(std::exp(1.0)), 1e-12);
}

TEST(Loss, LabelChecks) {
  Tensor4<double> z(2, 3, 1, 1);
  EXPECT_THROW(softmax_cross_entropy<double>(z, std::vector<int>{0}), DimensionError);
  EXPECT_THROW(softmax_cross_entropy<double>(z, std::vector<int>{0, 3}), InvalidArgumentError);
}

TEST(Loss, ArgmaxTiesGoLow) {
  const double row[] = {1.0, 3.0, 3.0};
  EXPECT_EQ(argmax_row(row, 3), 1u);
}

TEST(Sgd, ClosedFormDecayWithZeroGradient) {
  // v_t = mu v_{t-1} + wd p_{t-1};  p_t = p_{t-1} - lr v_t  iterated by hand.
  const double lr = 0.1, mu = 0.9, wd = 0.01;
  std::vector<double> value = {2.0, -1.0};
  std::vector<double> grad = {0.0, 0.0};
  Sgd<double> opt(mu, wd);
  std::vector<ParamRef<double>> ps = {{"w", value, grad, DecayRule::All}};
  double p = 2.0, v = 0.0;
  for (int t = 0; t < 50; ++t) {
    opt.step(ps, lr);
    v = mu * v + wd * p;
    p = p - lr * v;
    EXPECT_DOUBLE_EQ(value[0], p);
  }
  EXPECT_DOUBLE_EQ(value[1], -p / 2.0);
}

TEST(Sgd, MomentumWithConstantGradient) {
  std::vector<double> value = {0.0};
  std::vector<double> grad = {1.0};
  Sgd<double> opt(0.5, 0.0);
  std::vector<ParamRef<double>> ps = {{"w", value, grad, DecayRule::All}};
  opt.step(ps, 1.0);
  EXPECT_DOUBLE_EQ(value[0], -1.0);
  opt.step(ps, 1.0);
  EXPECT_DOUBLE_EQ(value[0], -2.5);
}

TEST(Sgd, GaborDecayTouchesAmplitudeOnly) {
  std::vector<double> value(16, 1.0);
  std::vector<double> grad(16, 0.0);
  Sgd<double> opt(0.0, 0.5);
  std::vector<ParamRef<double>> ps = {{"g", value, grad, DecayRule::GaborAmplitude}};
  opt.step(ps, 1.0);
  for (std::size_t j = 0; j < 16; ++j) {
    EXPECT_EQ(value[j], j % 8 == static_cast<std::size_t>(GaborField::a) ? 0.5 : 1.0) << j;
  }
}

TEST(Sgd, NoDecayRule) {
  std::vector<double> value = {3.0};
  std::vector<double> grad = {0.0};
  Sgd<double> opt(0.9, 1.0);
  std::vector<ParamRef<double>> ps = {{"w", value, grad, DecayRule::None}};
  opt.step(ps, 1.0);
  EXPECT_EQ(value[0], 3.0);
}

TEST(Schedule, MilestonesAndLr) {
  EXPECT_EQ(milestones_at(350), (std::vector<std::size_t>{175, 262}));
  EXPECT_EQ(milestones_at(1), (std::vector<std::size_t>{1, 1}));
  OptimizerConfig c;
  c.lr = 0.1;
  c.milestones = milestones_at(8);
  EXPECT_DOUBLE_EQ(c.lr_at(3), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at(4), 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at(6), 0.1 * 0.1 * 0.1);
}

TEST(Schedule, InvalidConfigRejected) {
  Rng rng(1);
  auto m = make_toy<float>(tiny_toy(), rng);
  const Dataset d = small_textures(2);
  OptimizerConfig c;
  c.batch_size = 0;
  EXPECT_THROW(train(m, d, nullptr, c, rng), ConfigError);
  c.batch_size = 4;
  c.momentum = 1.0;
  EXPECT_THROW(train(m, d, nullptr, c, rng), ConfigError);
  c.momentum = 0.9;
  c.lr = -1;
  EXPECT_THROW(train(m, d, nullptr, c, rng), ConfigError);
}

TEST(Train, ZeroLearningRateOnlyMovesBatchNormStatistics) {
  Rng rng(2);
  ToySpec s = tiny_toy();
  s.batch_norm = true;
  auto m = make_toy<float>(s, rng);
  const auto before = m.state();
  OptimizerConfig c;
  c.lr = 0.0;
  c.epochs = 2;
  c.batch_size = 8;
  train(m, small_textures(8), nullptr, c, rng);
  const auto after = m.state();
  for (const auto& [k, v] : before.tensors) {
    const bool stat = k.find("running_") != std::string::npos;
    if (stat) {
      EXPECT_NE(after.tensors.at(k).data, v.data) << k;
    } else {
      EXPECT_EQ(after.tensors.at(k).data, v.data) << k;
    }
  }
}

TEST(Train, BitReproducibleWithAugmentation) {
  auto run = [] {
    Rng rng(42);
    auto m = make_toy<float>(tiny_toy(), rng);
    OptimizerConfig c;
    c.lr = 0.05;
    c.epochs = 2;
    c.batch_size = 16;
    c.milestones = milestones_at(2);
    Dataset d = small_textures(16);
    d.augment = true;
    const auto h = train(m, d, nullptr, c, rng);
    return std::tuple{m.state().tensors, h.epochs.back().train_loss, rng_state(rng)};
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(std::get<1>(a), std::get<1>(b));
  EXPECT_EQ(std::get<2>(a), std::get<2>(b));
  for (const auto& [k, v] : std::get<0>(a)) EXPECT_EQ(v.data, std::get<0>(b).at(k).data) << k;
}

TEST(Train, DifferentSeedsDiverge) {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    auto m = make_toy<float>(tiny_toy(), rng);
    OptimizerConfig c;
    c.epochs = 1;
    c.batch_size = 10;
    train(m, small_textures(10), nullptr, c, rng);
    return m.state().tensors.at("conv1.weight").data;
  };
  EXPECT_NE(run(1), run(2));
}

TEST(Train, LearnsEasyTextures) {
  Rng rng(3);
  auto m = make_toy<float>(ToySpec{}, rng);
  OptimizerConfig c;
  c.lr = 0.05;
  c.epochs = 6;
  c.batch_size = 16;
  c.weight_decay = 5e-4;
  c.milestones = milestones_at(6);
  const Dataset tr = small_textures(60, Split::Train, 0.3);
  const Dataset te = small_textures(60, Split::Test, 0.3);
  train(m, tr, nullptr, c, rng);
  EXPECT_GT(evaluate(m, te).percent(), 90.0);
}

TEST(Train, DivergenceDetected) {
  Rng rng(4);
  auto m = make_toy<float>(tiny_toy(), rng);
  OptimizerConfig c;
  c.lr = 1e30;
  c.epochs = 3;
  c.batch_size = 8;
  EXPECT_THROW(train(m, small_textures(8), nullptr, c, rng), DivergenceError);
}

TEST(Train, EpochCallbackAndHistory) {
  Rng rng(5);
  auto m = make_toy<float>(tiny_toy(), rng);
  OptimizerConfig c;
  c.epochs = 3;
  c.batch_size = 8;
  c.milestones = milestones_at(3);
  TrainOptions o;
  o.eval_every = 2;
  std::size_t calls = 0;
  o.on_epoch = [&](const EpochStats&) { ++calls; };
  const Dataset d = small_textures(4);
  const auto h = train(m, d, &d, c, rng, o);
  EXPECT_EQ(calls, 3u);
  EXPECT_LT(h.epochs[0].eval_accuracy, 0.0);
  EXPECT_GE(h.epochs[1].eval_accuracy, 0.0);
  EXPECT_GE(h.epochs[2].eval_accuracy, 0.0);
}

TEST(Evaluate, TenThousandImagesUseSeventyNineBatches) {
  Dataset d;
  d.images = Tensor4<float>(10000, 3, 16, 16);
  d.labels.assign(10000, 0);
  d.num_classes = 4;
  Rng rng(6);
  auto m = make_toy<float>(tiny_toy(), rng);
  const auto r = evaluate(m, d, 128);
  EXPECT_EQ(r.batches, 79u);
  EXPECT_EQ(r.total, 10000u);
}

TEST(Evaluate, AccuracyCountsCorrectLabels) {
  // A model whose logits are all zero predicts class 0 everywhere.
  Rng rng(7);
  auto m = make_toy<float>(tiny_toy(), rng);
  auto& fc = *dynamic_cast<Dense<float>*>(m.layers.back().get());
  fc.weights().fill(0.0f);
  Dataset d = small_textures(5);
  EXPECT_DOUBLE_EQ(evaluate(m, d, 3).accuracy, 0.25);
  EXPECT_THROW(evaluate(m, Dataset{}, 3), InvalidArgumentError);
  EXPECT_THROW(evaluate(m, d, 0), InvalidArgumentError);
}
