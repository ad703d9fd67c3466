#include <gtest/gtest.h>

#include "msn/network.hpp"
#include "test_util.hpp"

using namespace msn;
using testutil::randn;

namespace {

NetworkSpec tiny(Family family, int config) {
  NetworkSpec s;
  s.family = family;
  s.depth = 1;
  s.width = family == Family::vgg ? 1.0 / 16.0 : 0.25;
  s.widen = 2;
  s.attach = attachment_config(config);
  s.classes = 3;
  s.height = 8;
  s.width_px = 8;
  return s;
}

double l2(const Tensor64& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(Attachment, NamedConfigurations) {
  EXPECT_EQ(attachment_config(1), (std::vector<int>{4}));
  EXPECT_EQ(attachment_config(2), (std::vector<int>{3, 4}));
  EXPECT_EQ(attachment_config(3), (std::vector<int>{2, 4}));
  EXPECT_EQ(attachment_config(4), (std::vector<int>{1, 4}));
  EXPECT_EQ(attachment_config(5), (std::vector<int>{2, 3, 4}));
  EXPECT_EQ(attachment_config(6), (std::vector<int>{1, 3, 4}));
  EXPECT_EQ(attachment_config(7), (std::vector<int>{1, 2, 3, 4}));
  EXPECT_THROW(attachment_config(0), std::invalid_argument);
  EXPECT_THROW(attachment_config(8), std::invalid_argument);
}

TEST(NetworkSpec, BlockChannelsPerFamily) {
  NetworkSpec s;
  s.family = Family::vgg;
  EXPECT_EQ(s.block_channels(), (std::vector<std::size_t>{64, 128, 256, 512}));
  s.family = Family::resnet;
  EXPECT_EQ(s.block_channels(), (std::vector<std::size_t>{16, 16, 32, 64}));
  s.family = Family::wide_resnet;
  s.widen = 10;
  EXPECT_EQ(s.block_channels(), (std::vector<std::size_t>{16, 160, 320, 640}));
  s.width = 0.5;
  EXPECT_EQ(s.block_channels(), (std::vector<std::size_t>{8, 80, 160, 320}));
  EXPECT_EQ(family_from_string("wide_resnet"), Family::wide_resnet);
  EXPECT_THROW(family_from_string("densenet"), std::invalid_argument);
}

TEST(NetworkSpec, ValidationErrors) {
  NetworkSpec s;
  s.attach = {5};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.attach = {4, 4};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.attach = {};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.attach = {4};
  s.height = 30;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.height = 32;
  s.blocks = 2;
  EXPECT_THROW(s.validate(), std::invalid_argument);  // head on a missing block
  s.attach = {2};
  EXPECT_NO_THROW(s.validate());
  s.width = 0.01;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

// Hand count for resnet, K = 1, width 1, 32x32x3, 10 classes, head on block 4:
// block 1 plain conv 3*3*3*16 + 16 = 448; block 2 unit (16 -> 16) = 2 BN(32) + 2 conv(2320) = 4704;
// block 3 unit (16 -> 32) = 32 + 4640 + 64 + 9248 + proj 544 = 14528;
// block 4 unit (32 -> 64) = 64 + 18496 + 128 + 36928 + proj 2112 = 57728; head 64*10 + 10 = 650.
TEST(BuildNetwork, ResNetParameterCount) {
  NetworkSpec s;
  s.family = Family::resnet;
  const auto net = build_network<float>(s, 0);
  EXPECT_EQ(net.params.trainable_count(), 448u + 4704u + 14528u + 57728u + 650u);
}

TEST(BuildNetwork, Config7HasFourHeadsMatchingChannels) {
  for (const Family f : {Family::vgg, Family::resnet, Family::wide_resnet}) {
    const auto spec = tiny(f, 7);
    const auto net = build_network<float>(spec, 1);
    const auto heads = net.heads();
    ASSERT_EQ(heads.size(), 4u);
    const auto channels = spec.block_channels();
    for (std::size_t h = 0; h < 4; ++h) {
      EXPECT_EQ(heads[h].block, static_cast<int>(h + 1));
      EXPECT_EQ(net.params.at(heads[h].weight_name()).shape(), (Shape{channels[h], 3}));
      EXPECT_EQ(net.params.at(heads[h].bias_name()).shape(), (Shape{3}));
    }
  }
  EXPECT_EQ(build_network<float>(tiny(Family::resnet, 1), 1).heads().size(), 1u);
}

TEST(BuildNetwork, VggLayerCounts) {
  const auto net = build_network<float>(tiny(Family::vgg, 1), 0);
  std::size_t convs = 0;
  for (const auto& e : net.params.entries()) convs += e.name.ends_with(".kernel");
  EXPECT_EQ(convs, 3u + 4u + 4u + 4u);
}

TEST(BuildNetwork, DeterministicAndHeInitialized) {
  NetworkSpec s;
  s.family = Family::vgg;
  s.width = 0.5;
  const auto a = build_network<float>(s, 7);
  const auto b = build_network<float>(s, 7);
  const auto c = build_network<float>(s, 8);
  EXPECT_TRUE(a.params == b.params);
  EXPECT_FALSE(a.params == c.params);

  // block4.conv2: 3x3x256x256, fan_in 2304, std sqrt(2 / 2304).
  const auto& k = a.params.at("block4.conv2.kernel");
  double sq = 0.0;
  for (float v : k.values()) sq += static_cast<double>(v) * v;
  const double std_dev = std::sqrt(sq / static_cast<double>(k.size()));
  EXPECT_NEAR(std_dev, std::sqrt(2.0 / 2304.0), 0.02 * std::sqrt(2.0 / 2304.0));
  for (float v : a.params.at("block4.conv2.bias").values()) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, ShapesAndRunningStats) {
  auto spec = tiny(Family::resnet, 5);
  auto net = build_network<float>(spec, 2);
  std::mt19937_64 rng(51);
  const Tensor images = randn(Shape{5, 8, 8, 3}, rng).cast<float>();

  const auto before = net.params;
  const auto infer = forward_heads(static_cast<const NetworkState<float>&>(net), images);
  EXPECT_TRUE(net.params == before);
  ASSERT_EQ(infer.head_logits.size(), 3u);
  EXPECT_EQ(infer.head_blocks, (std::vector<int>{2, 3, 4}));
  for (std::size_t h = 0; h < 3; ++h) EXPECT_EQ(infer.logits(h).shape(), (Shape{5, 3}));

  forward_heads(net, images, ops::Mode::train);
  EXPECT_FALSE(net.params.at("block2.res1.bn1.running_mean") == before.at("block2.res1.bn1.running_mean"));
  EXPECT_THROW(forward_heads(net, Tensor(Shape{5, 16, 16, 3}), ops::Mode::train), ShapeError);
}

TEST(Forward, TruncatedTrunk) {
  NetworkSpec s = tiny(Family::resnet, 1);
  s.blocks = 2;
  s.attach = {1, 2};
  auto net = build_network<float>(s, 3);
  EXPECT_FALSE(net.params.find("block3.res1.conv1.kernel").has_value());
  std::mt19937_64 rng(52);
  const auto pass = forward_heads(net, randn(Shape{2, 8, 8, 3}, rng).cast<float>(), ops::Mode::train);
  EXPECT_EQ(pass.head_logits.size(), 2u);
}

TEST(MsnLoss, AveragesHeadsAndScalesGradients) {
  std::mt19937_64 rng(53);
  const std::vector<int> y = {0, 1, 1, 0, 2, 2};
  for (std::size_t heads = 1; heads <= 4; ++heads) {
    std::vector<msl::LogitBatch> batches;
    std::vector<msl::XiState> xi(heads);
    double mean = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
      batches.emplace_back(randn(Shape{6, 3}, rng, 2.0), y);
      mean += msl::msl_total(batches.back(), 0.5).loss.total;
    }
    mean /= static_cast<double>(heads);
    const auto r = msn_loss(batches, xi);
    EXPECT_NEAR(r.aggregate.total, mean, 1e-12);
    EXPECT_NEAR(r.aggregate.total, r.aggregate.between + r.aggregate.within, 1e-12);
    const auto single = msl::msl_total(batches[0], 0.5);
    for (std::size_t i = 0; i < single.gradient.size(); ++i) {
      EXPECT_NEAR(r.logit_gradients[0][i], single.gradient[i] / static_cast<double>(heads), 1e-15);
    }
  }
  EXPECT_THROW(msn_loss({}, {}), std::invalid_argument);
  std::vector<msl::LogitBatch> mismatch{msl::LogitBatch(Tensor64(Shape{2, 3}), {0, 1}),
                                        msl::LogitBatch(Tensor64(Shape{2, 3}), {1, 1})};
  EXPECT_THROW(msn_loss(mismatch, std::vector<msl::XiState>(2)), std::invalid_argument);
}

TEST(MsnLoss, EachHeadUsesItsOwnXi) {
  const std::vector<int> y = {0, 0};
  std::vector<msl::LogitBatch> batches{msl::LogitBatch(Tensor64(Shape{2, 2}, {0, 0, 3, 4}), y),
                                       msl::LogitBatch(Tensor64(Shape{2, 2}, {0, 0, 3, 4}), y)};
  msl::XiOptions o;
  o.initial = 1.0;
  const std::vector<msl::XiState> xi{msl::XiState(), msl::XiState(o)};
  const auto r = msn_loss(batches, xi);
  EXPECT_DOUBLE_EQ(r.per_head[0].within, 20.25);
  EXPECT_DOUBLE_EQ(r.per_head[1].within, 16.0);
}

TEST(Backward, GradientReachesFirstBlock) {
  auto spec = tiny(Family::resnet, 7);
  auto net = build_network<double>(spec, 4);
  std::mt19937_64 rng(54);
  const auto images = randn(Shape{6, 8, 8, 3}, rng);
  const std::vector<int> y = {0, 1, 2, 0, 1, 2};
  auto pass = forward_heads(net, images, ops::Mode::train);
  std::vector<msl::LogitBatch> batches;
  for (std::size_t h = 0; h < pass.head_logits.size(); ++h) batches.emplace_back(pass.logits(h), y);
  const auto loss = msn_loss(batches, std::vector<msl::XiState>(batches.size()));
  const auto grads = backward_heads(pass, net, loss.logit_gradients);
  ASSERT_EQ(grads.size(), net.params.size());
  EXPECT_GT(l2(grads[*net.params.find("block1.conv1.kernel")]), 0.0);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    EXPECT_EQ(grads[i].shape(), net.params.entries()[i].value.shape());
    if (!net.params.entries()[i].trainable) {
      EXPECT_EQ(l2(grads[i]), 0.0);
    }
  }
}

// Sampled finite differences on the VGG and wide families; the resnet family
// is covered exhaustively by the verification suite.
TEST(Backward, MatchesFiniteDifferencesOtherFamilies) {
  for (const Family f : {Family::vgg, Family::wide_resnet}) {
    const auto spec = tiny(f, 6);
    const auto base = build_network<double>(spec, 5);
    std::mt19937_64 rng(55);
    const auto images = randn(Shape{4, 8, 8, 3}, rng);
    const std::vector<int> y = {0, 0, 2, 2};
    const std::vector<msl::XiState> xi(base.heads().size());
    const auto loss_of = [&](NetworkState<double>& s, std::vector<Tensor64>* g) {
      auto pass = forward_heads(s, images, ops::Mode::train);
      std::vector<msl::LogitBatch> batches;
      for (std::size_t h = 0; h < pass.head_logits.size(); ++h) batches.emplace_back(pass.logits(h), y);
      const auto l = msn_loss(batches, xi);
      if (g != nullptr) *g = backward_heads(pass, s, l.logit_gradients);
      return l.aggregate.total;
    };
    auto state = base;
    std::vector<Tensor64> grads;
    loss_of(state, &grads);
    GradCheckOptions options;
    options.magnitude_floor = 1e-4;
    options.refine_factors = {0.1, 0.01};
    for (std::size_t i = 0; i < base.params.size(); ++i) {
      const auto& e = base.params.entries()[i];
      if (!e.trainable) continue;
      const auto f_i = [&](std::span<const double> v) {
        auto s = base;
        std::copy(v.begin(), v.end(), s.params.entries()[i].value.data());
        return loss_of(s, nullptr);
      };
      const auto coords = testutil::sample_coordinates(e.value.size(), 25, rng);
      EXPECT_LT(grad_check_subset(f_i, grads[i].values(), e.value.values(), coords, options).max_relative_error, 1e-4)
          << to_string(f) << " " << e.name;
    }
  }
}

TEST(Predict, ArgmaxTiesAndHeads) {
  EXPECT_EQ(argmax_rows(Tensor64(Shape{3, 3}, {1, 1, 0, 0, 2, 2, -1, 0, -1})), (std::vector<int>{0, 1, 1}));

  auto net = build_network<float>(tiny(Family::resnet, 7), 6);
  std::mt19937_64 rng(56);
  const Tensor images = randn(Shape{4, 8, 8, 3}, rng).cast<float>();
  const auto pass = forward_heads(static_cast<const NetworkState<float>&>(net), images);
  EXPECT_EQ(predict(net, images), argmax_rows(pass.logits(3).cast<double>()));
  Tensor64 mean(Shape{4, 3});
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += pass.logits(h)[i];
  EXPECT_EQ(predict(net, images, PredictHead::averaged), argmax_rows(mean));
}

TEST(UpdateXi, OneStatePerHead) {
  std::vector<msl::XiState> xi(2);
  MsnLossResult r;
  r.per_head.resize(2);
  r.per_head[0].within = 1.0;
  r.per_head[1].within = 5.0;
  update_xi(xi, r);
  EXPECT_EQ(xi[0].history().back(), 1.0);
  EXPECT_EQ(xi[1].history().back(), 5.0);
}
