#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gabornet/pruning.hpp"
#include "gabornet/train.hpp"
#include "support/grad_check.hpp"

using namespace gabornet;

namespace {

Dataset textures(Split split, std::size_t per_class = 40) {
  TextureSpec s;
  s.seed = 3;
  s.n_per_class = per_class;
  s.noise = 0.8;
  s.split = split;
  return synth_textures(s);
}

// Toy model trained for a few epochs; shared by the tests below.
const Model<double>& trained_toy() {
  static const Model<double> model = [] {
    Rng rng(5);
    auto m = make_toy<double>(ToySpec{}, rng);
    OptimizerConfig c;
    c.lr = 0.05;
    c.epochs = 4;
    c.batch_size = 16;
    c.milestones = milestones_at(4);
    train(m, textures(Split::Train), nullptr, c, rng);
    return m;
  }();
  return model;
}

const Dataset& test_set() {
  static const Dataset d = textures(Split::Test);
  return d;
}

void zero_channel(Model<double>& m, std::size_t ordinal, std::size_t o) {
  auto& c = m.conv(ordinal);
  for (std::size_t i = 0; i < c.n_in(); ++i) std::fill(c.weights().plane(o, i), c.weights().plane(o, i) + c.k() * c.k(), 0.0);
  if (c.has_bias()) c.bias()[o] = 0.0;
}

double max_output_diff(Model<double>& a, Model<double>& b, std::size_t trials, Rng& rng) {
  double m = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto x = test_support::random_tensor(a.input_dims(1), rng);
    const auto ya = a.forward(x, Phase::Eval);
    const auto yb = b.forward(x, Phase::Eval);
    for (std::size_t j = 0; j < ya.size(); ++j) m = std::max(m, std::abs(ya[j] - yb[j]));
  }
  return m;
}

}  // namespace

TEST(Rank, KernelAndChannelNormsByHand) {
  Conv2d<double> c("c", 2, 3, 1, 1, 0, false);
  // weights (o, i): norms 3 1 | 2 2 | 0.5 5
  const double w[] = {3, -1, 2, -2, 0.5, -5};
  for (std::size_t j = 0; j < 6; ++j) c.weights()[j] = w[j];
  EXPECT_EQ(kernel_l1_norms(c), (std::vector<double>{3, 1, 2, 2, 0.5, 5}));
  EXPECT_EQ(channel_l1_norms(c), (std::vector<double>{4, 4, 5.5}));
  EXPECT_EQ(l1_rank(c, Granularity::Kernel), (std::vector<std::size_t>{4, 1, 2, 3, 0, 5}));
  EXPECT_EQ(l1_rank(c, Granularity::Channel), (std::vector<std::size_t>{0, 1, 2}));
  c.set_kernel_mask(0, 1, true);
  c.set_channel_mask(1, true);
  EXPECT_EQ(l1_rank(c, Granularity::Kernel), (std::vector<std::size_t>{4, 0, 5}));
  EXPECT_EQ(l1_rank(c, Granularity::Channel), (std::vector<std::size_t>{0, 2}));
}

TEST(Rank, MatchesNaiveSelectionSort) {
  Rng rng(1);
  Conv2d<double> c("c", 4, 6, 3, 1, 1, false);
  for (auto& v : c.weights().storage()) v = std::round(4 * normal(rng)) / 4;  // plenty of ties
  std::vector<double> norms(24, 0.0);
  for (std::size_t j = 0; j < 24; ++j)
    for (std::size_t e = 0; e < 9; ++e) norms[j] += std::abs(c.weights()[j * 9 + e]);
  std::vector<std::size_t> expect;
  std::vector<bool> used(24, false);
  for (std::size_t n = 0; n < 24; ++n) {
    std::size_t best = 24;
    for (std::size_t j = 0; j < 24; ++j)
      if (!used[j] && (best == 24 || norms[j] < norms[best])) best = j;
    used[best] = true;
    expect.push_back(best);
  }
  EXPECT_EQ(l1_rank(c, Granularity::Kernel), expect);
}

TEST(Rank, GaborLayerUsesSynthesizedWeights) {
  Conv2d<double> c("g", 1, 2, 3, 1, 1, false);
  GaborParams big, small;
  big.a = 1.0;
  small.a = 0.1;
  c.make_gabor({big, small});
  EXPECT_EQ(l1_rank(c, Granularity::Kernel), (std::vector<std::size_t>{1, 0}));
}

TEST(Greedy, ZeroedChannelGoesFirstWithExactlyZeroDelta) {
  Model<double> m = trained_toy();
  zero_channel(m, 0, 5);
  const double base = evaluate(m, test_set()).percent();
  PruneSpec s;
  s.layer = 0;
  s.granularity = Granularity::Channel;
  s.tolerance = 0.0;
  const PruneReport r = prune_greedy(m, s, test_set());
  EXPECT_EQ(r.baseline, base);
  ASSERT_GE(r.steps.size(), 1u);
  EXPECT_EQ(r.steps[0].index, 5u);
  EXPECT_EQ(r.steps[0].l1_norm, 0.0);
  EXPECT_EQ(r.steps[0].accuracy - r.baseline, 0.0);
  EXPECT_TRUE(m.conv(0).channel_masked(5));
  for (std::size_t q = 0; q < m.conv(1).n_out(); ++q) EXPECT_TRUE(m.conv(1).kernel_masked(q, 5));
}

TEST(Greedy, ZeroedKernelGoesFirst) {
  Model<double> m = trained_toy();
  auto& c = m.conv(1);
  std::fill(c.weights().plane(3, 6), c.weights().plane(3, 6) + 25, 0.0);
  PruneSpec s;
  s.layer = 1;
  s.tolerance = 0.0;
  const PruneReport r = prune_greedy(m, s, test_set());
  ASSERT_GE(r.steps.size(), 1u);
  EXPECT_EQ(r.steps[0].index, 3u * 8 + 6);
  EXPECT_EQ(r.steps[0].accuracy, r.baseline);
}

TEST(Greedy, FullToleranceRemovesEveryCandidate) {
  for (auto g : {Granularity::Kernel, Granularity::Channel}) {
    Model<double> m = trained_toy();
    PruneSpec s;
    s.layer = 0;
    s.granularity = g;
    s.tolerance = 100.0;
    const PruneReport r = prune_greedy(m, s, test_set());
    EXPECT_EQ(r.pruned(), r.candidates);
    EXPECT_FALSE(r.rejected.has_value());
    EXPECT_EQ(pruned_fraction(m, 0, g), 1.0);
  }
}

TEST(Greedy, ReportInvariants) {
  for (auto mode : {PruneMode::StopAtFirstFailure, PruneMode::SkipAndContinue}) {
    Model<double> m = trained_toy();
    PruneSpec s;
    s.layer = 1;
    s.tolerance = 0.5;
    s.mode = mode;
    const PruneReport r = prune_greedy(m, s, test_set());
    const double floor = r.baseline - s.tolerance;
    for (std::size_t j = 0; j < r.steps.size(); ++j) {
      EXPECT_EQ(r.steps[j].step, j + 1);
      EXPECT_GE(r.steps[j].accuracy, floor - 1e-9);
      if (mode == PruneMode::StopAtFirstFailure && j > 0) {
        EXPECT_GE(r.steps[j].l1_norm, r.steps[j - 1].l1_norm);
      }
      EXPECT_TRUE(m.conv(1).kernel_masked(r.steps[j].index / 8, r.steps[j].index % 8));
    }
    EXPECT_EQ(m.conv(1).active_kernel_count(), 64u - r.pruned());
    EXPECT_DOUBLE_EQ(kernel_pruned_fraction(m, 1), static_cast<double>(r.pruned()) / 64.0);
    if (r.rejected) {
      EXPECT_LT(r.rejected->accuracy, floor);
      EXPECT_FALSE(m.conv(1).kernel_masked(r.rejected->index / 8, r.rejected->index % 8));
    }
    // The final masks reproduce the last reported accuracy.
    EXPECT_EQ(evaluate(m, test_set()).percent(), r.final_accuracy());
  }
}

TEST(Greedy, SkipModeKeepsAtLeastAsMany) {
  Model<double> a = trained_toy(), b = trained_toy();
  PruneSpec s;
  s.layer = 1;
  s.tolerance = 0.2;
  const auto stop = prune_greedy(a, s, test_set());
  s.mode = PruneMode::SkipAndContinue;
  const auto skip = prune_greedy(b, s, test_set());
  EXPECT_GE(skip.pruned(), stop.pruned());
  for (std::size_t j = 0; j < stop.pruned(); ++j) EXPECT_EQ(skip.steps[j].index, stop.steps[j].index);
}

TEST(Greedy, Deterministic) {
  Model<double> a = trained_toy(), b = trained_toy();
  PruneSpec s;
  s.granularity = Granularity::Channel;
  const auto ra = prune_greedy(a, s, test_set());
  const auto rb = prune_greedy(b, s, test_set());
  std::ostringstream oa, ob;
  write_prune_csv(oa, ra);
  write_prune_csv(ob, rb);
  EXPECT_EQ(oa.str(), ob.str());
}

TEST(Greedy, NegativeToleranceRejected) {
  Model<double> m = trained_toy();
  PruneSpec s;
  s.tolerance = -1.0;
  EXPECT_THROW(prune_greedy(m, s, test_set()), InvalidArgumentError);
}

TEST(Greedy, FailureLeavesModelUntouched) {
  Rng rng(7);
  ResNetSpec rs;
  rs.blocks_per_stage = 1;
  rs.width = 4;
  rs.image_size = 16;
  rs.classes = 4;
  auto m = make_resnet<double>(rs, rng);
  m.conv(1).set_kernel_mask(0, 0, true);
  const std::string before = m.describe();
  const auto state_before = m.state();
  PruneSpec s;
  s.layer = 1;  // first conv inside a residual block
  s.granularity = Granularity::Channel;
  EXPECT_THROW(prune_greedy(m, s, textures(Split::Test, 4)), StructureError);
  s.layer = 0;  // stem conv feeds a residual block
  EXPECT_THROW(prune_greedy(m, s, textures(Split::Test, 4)), StructureError);
  s.layer = 9;
  s.granularity = Granularity::Kernel;
  EXPECT_THROW(prune_greedy(m, s, textures(Split::Test, 4)), StructureError);
  EXPECT_EQ(m.describe(), before);
  EXPECT_EQ(m.state().masks, state_before.masks);
}

TEST(Compact, ForwardEquivalentAndSmaller) {
  Model<double> m = trained_toy();
  // Prune all but the last two ranked channels by hand through the coupling.
  auto cp = find_coupling(m, 0);
  const auto order = l1_rank(m.conv(0), Granularity::Channel);
  for (std::size_t j = 0; j + 2 < order.size(); ++j) mask_channel(cp, order[j]);
  m.conv(1).set_kernel_mask(2, order.back(), true);  // stray kernel mask survives compaction
  Model<double> small = compact(m);
  EXPECT_EQ(small.conv(0).n_out(), 2u);
  EXPECT_EQ(small.conv(1).n_in(), 2u);
  EXPECT_EQ(small.conv(1).active_kernel_count(), 15u);
  Rng rng(8);
  EXPECT_LE(max_output_diff(m, small, 100, rng), 1e-6);
  EXPECT_DOUBLE_EQ(channel_pruned_fraction(small, 0), 6.0 / 8.0);
}

TEST(Compact, SecondLayerIntoDense) {
  Model<double> m = trained_toy();
  auto cp = find_coupling(m, 1);
  EXPECT_EQ(cp.next_conv, nullptr);
  ASSERT_NE(cp.next_dense, nullptr);
  mask_channel(cp, 0);
  mask_channel(cp, 4);
  Model<double> small = compact(m);
  EXPECT_EQ(small.conv(1).n_out(), 6u);
  Rng rng(9);
  EXPECT_LE(max_output_diff(m, small, 100, rng), 1e-6);
}

TEST(Compact, WithBatchNorm) {
  Rng rng(10);
  ToySpec ts;
  ts.batch_norm = true;
  auto m = make_toy<double>(ts, rng);
  auto* bn = dynamic_cast<BatchNorm2d<double>*>(m.layers[1].get());
  ASSERT_NE(bn, nullptr);
  for (std::size_t c = 0; c < 8; ++c) {
    bn->running_mean()[c] = 0.1 * c;
    bn->running_var()[c] = 1.0 + c;
    bn->beta()[c] = 0.05 * c;
  }
  auto cp = find_coupling(m, 0);
  ASSERT_EQ(cp.bn, bn);
  mask_channel(cp, 3);
  Model<double> small = compact(m);
  EXPECT_EQ(small.conv(0).n_out(), 7u);
  EXPECT_LE(max_output_diff(m, small, 100, rng), 1e-6);
}

TEST(Compact, InconsistentMasksRejected) {
  Model<double> m = trained_toy();
  m.conv(0).set_channel_mask(2, true);  // next layer still reads channel 2
  EXPECT_THROW(compact(m), IntegrityError);
}

TEST(Compact, NothingMaskedIsIdentity) {
  Model<double> m = trained_toy();
  Model<double> c = compact(m);
  EXPECT_EQ(c.describe(), m.describe());
}

TEST(Report, CsvLayout) {
  PruneReport r;
  r.layer = 1;
  r.granularity = Granularity::Channel;
  r.steps.push_back({1, 4, 0.25, 99.5});
  std::ostringstream os;
  write_prune_csv(os, r);
  const std::string s = os.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), "step,granularity,layer,index,l1_norm,accuracy");
  EXPECT_NE(s.find("\n1,channel,2,4,"), std::string::npos);
}

TEST(Report, GranularityParsing) {
  EXPECT_EQ(parse_granularity("kernel"), Granularity::Kernel);
  EXPECT_EQ(parse_granularity("channel"), Granularity::Channel);
  EXPECT_THROW(parse_granularity("filter"), ConfigError);
}
