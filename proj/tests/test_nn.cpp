#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "flplas/nn.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace flplas {
namespace {

using testing::dense_model;
using testing::random_like;
using testing::random_tensor;
using oracle::GradCheck;
using oracle::grad_check;

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  auto m = build_arch("mlp-2", 10, Shape{64}, 7).filled_like(0.0);
  std::mt19937_64 rng(1);
  const Tensor out = forward(m, random_tensor(Shape{5, 64}, rng));
  ASSERT_EQ(out.shape(), (Shape{5, 10}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdentityDenseLayer) {
  auto m = dense_model({{3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0}}});
  const Tensor out = forward(m, Tensor(Shape{1, 3}, {0.5, -2.0, 3.25}));
  EXPECT_EQ(out.values()[0], 0.5);
  EXPECT_EQ(out.values()[1], -2.0);
  EXPECT_EQ(out.values()[2], 3.25);
}

TEST(Forward, TwoLayerMlpByHand) {
  // h = relu(W1 x + b1), y = W2 h + b2
  auto m = dense_model({{3, 2, {1, -1, 2, 0.5, 0.5, -1}, {0.1, -0.2}},
                        {2, 2, {1, 2, -3, 1}, {0.0, 1.0}}});
  const Tensor out = forward(m, Tensor(Shape{1, 3}, {1.0, 2.0, 3.0}));
  // W1 x + b1 = (1 - 2 + 6 + 0.1, 0.5 + 1 - 3 - 0.2) = (5.1, -1.7) -> relu (5.1, 0)
  EXPECT_NEAR(out.values()[0], 5.1, 1e-12);
  EXPECT_NEAR(out.values()[1], -15.3 + 1.0, 1e-12);
}

// Naive conv (valid cross-correlation) + ReLU + floor 2x2 max-pool + dense.
std::vector<double> naive_conv_net(const LayeredModel& m, const Tensor& x, std::size_t n) {
  const auto& cw = m.layers[0].values();
  const auto& cb = m.layers[1].values();
  const auto& dw = m.layers[2].values();
  const auto& db = m.layers[3].values();
  const std::size_t oc = cw.dim(0), ic = cw.dim(1), k = cw.dim(2);
  const std::size_t h = x.dim(2), w = x.dim(3), oh = h - k + 1, ow = w - k + 1;
  const std::size_t ph = oh / 2, pw = ow / 2;
  std::vector<double> feat;
  for (std::size_t o = 0; o < oc; ++o) {
    std::vector<double> map(oh * ow);
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double s = cb[o];
        for (std::size_t c = 0; c < ic; ++c)
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b)
              s += cw[((o * ic + c) * k + a) * k + b] *
                   x[((n * ic + c) * h + i + a) * w + j + b];
        map[i * ow + j] = std::max(0.0, s);
      }
    }
    for (std::size_t i = 0; i < ph; ++i)
      for (std::size_t j = 0; j < pw; ++j)
        feat.push_back(std::max({map[2 * i * ow + 2 * j], map[2 * i * ow + 2 * j + 1],
                                 map[(2 * i + 1) * ow + 2 * j],
                                 map[(2 * i + 1) * ow + 2 * j + 1]}));
  }
  std::vector<double> out(dw.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) {
    out[r] = db[r];
    for (std::size_t c = 0; c < feat.size(); ++c) out[r] += dw[r * feat.size() + c] * feat[c];
  }
  return out;
}

LayeredModel small_conv_net(std::size_t in_ch, std::size_t side, std::size_t out_ch,
                            std::size_t k, std::size_t classes,
                            std::size_t hidden = 0) {
  LayeredModel m;
  m.arch_id = "test-conv";
  m.input_shape = {in_ch, side, side};
  m.num_classes = classes;
  const std::size_t pooled = (side - k + 1) / 2;
  m.layers.push_back({LayerKind::kConv2d, {out_ch, in_ch, k, k},
                      Tensor(Shape{out_ch, in_ch, k, k})});
  m.layers.push_back({LayerKind::kBias, {out_ch}, Tensor(Shape{out_ch})});
  std::size_t feat = out_ch * pooled * pooled;
  if (hidden) {
    m.layers.push_back({LayerKind::kDense, {hidden, feat}, Tensor(Shape{hidden, feat})});
    m.layers.push_back({LayerKind::kBias, {hidden}, Tensor(Shape{hidden})});
    feat = hidden;
  }
  m.layers.push_back({LayerKind::kDense, {classes, feat}, Tensor(Shape{classes, feat})});
  m.layers.push_back({LayerKind::kBias, {classes}, Tensor(Shape{classes})});
  return m;
}

TEST(Forward, ConvMatchesBruteForce) {
  std::mt19937_64 rng(11);
  for (std::size_t side : {6u, 7u, 9u}) {
    auto m = random_like(small_conv_net(2, side, 3, 3, 4), rng, 0.5);
    const Tensor x = random_tensor(Shape{3, 2, side, side}, rng);
    const Tensor out = forward(m, x);
    for (std::size_t n = 0; n < 3; ++n) {
      const auto want = naive_conv_net(m, x, n);
      for (std::size_t r = 0; r < want.size(); ++r) {
        EXPECT_NEAR(out.values()[n * 4 + r], want[r], 1e-12) << "side " << side;
      }
    }
  }
}

TEST(Loss, UniformLogitsGiveLogC) {
  const Tensor logits(Shape{4, 7}, 0.3);
  const std::vector<int> labels{0, 3, 6, 2};
  EXPECT_NEAR(softmax_cross_entropy(logits, labels), std::log(7.0), 1e-12);
}

TEST(Loss, SaturatedLogitsGiveNearZero) {
  Tensor logits(Shape{2, 3});
  logits[0 * 3 + 1] = 50.0;
  logits[1 * 3 + 2] = 50.0;
  const std::vector<int> labels{1, 2};
  EXPECT_LT(softmax_cross_entropy(logits, labels), 1e-10);
}

TEST(Loss, LabelOutOfRangeThrows) {
  const Tensor logits(Shape{1, 3});
  const std::vector<int> labels{3};
  EXPECT_THROW(softmax_cross_entropy(logits, labels), std::invalid_argument);
}

TEST(Gradients, MatchFiniteDifferencesOnMlp) {
  std::mt19937_64 rng(5);
  GradCheck acc;
  for (int trial = 0; trial < 4; ++trial) {
    auto m = random_like(build_arch("mlp-2", 4, Shape{6}), rng, 0.8);
    const Tensor x = random_tensor(Shape{5, 6}, rng);
    const std::vector<int> y{0, 1, 2, 3, 1};
    grad_check(m, x, y, rng, 40, acc);
  }
  EXPECT_LE(acc.worst[static_cast<int>(LayerKind::kDense)], 1e-4);
  EXPECT_LE(acc.worst[static_cast<int>(LayerKind::kBias)], 1e-4);
}

TEST(Gradients, MatchFiniteDifferencesOnConvNet) {
  std::mt19937_64 rng(9);
  GradCheck acc;
  for (int trial = 0; trial < 5; ++trial) {
    auto m = random_like(small_conv_net(3, 9, 4, 3, 3, 5), rng, 0.5);
    const Tensor x = random_tensor(Shape{2, 3, 9, 9}, rng);
    grad_check(m, x, {0, 2}, rng, 30, acc);
  }
  for (int kind = 0; kind < 3; ++kind) {
    EXPECT_GE(acc.checked[kind], 20u);
    EXPECT_LE(acc.worst[kind], 1e-4) << to_string(static_cast<LayerKind>(kind));
  }
}

TEST(Sgd, VanillaStep) {
  auto m = testing::scalar_model(1.5);
  auto g = testing::scalar_model(0.4);
  auto v = m.filled_like(0.0);
  TrainingConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  sgd_step(m, g, v, cfg, 0);
  EXPECT_NEAR(m.layers[0].values()[0], 1.5 - 0.1 * 0.4, 1e-15);
}

TEST(Sgd, ZeroGradientIsFixedPoint) {
  auto m = testing::scalar_model(-2.0);
  const auto before = m;
  auto v = m.filled_like(0.0);
  TrainingConfig cfg;
  cfg.weight_decay = 0.0;
  sgd_step(m, m.filled_like(0.0), v, cfg, 3);
  EXPECT_EQ(m, before);
}

TEST(Sgd, TwoMomentumStepsByHand) {
  auto m = testing::scalar_model(1.0);
  auto v = m.filled_like(0.0);
  TrainingConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.01;
  cfg.lr_decay_base = 0.5;
  // step at t=1: lr 0.025; step at t=2: lr 0.0125
  double p = 1.0, vel = 0.0;
  const double g1 = 0.3, g2 = -0.7;
  vel = 0.9 * vel + g1 + 0.01 * p;
  p -= 0.025 * vel;
  vel = 0.9 * vel + g2 + 0.01 * p;
  p -= 0.0125 * vel;
  sgd_step(m, testing::scalar_model(g1), v, cfg, 1);
  sgd_step(m, testing::scalar_model(g2), v, cfg, 2);
  EXPECT_NEAR(m.layers[0].values()[0], p, 1e-12);
  EXPECT_NEAR(v.layers[0].values()[0], vel, 1e-12);
}

TEST(BuildArch, Mlp2Layout) {
  const auto m = build_arch("mlp-2", 10, Shape{64});
  ASSERT_EQ(m.num_layers(), 4u);
  EXPECT_EQ(m.layers[0].kind, LayerKind::kDense);
  EXPECT_EQ(m.layers[1].kind, LayerKind::kBias);
  EXPECT_EQ(m.layers[2].kind, LayerKind::kDense);
  EXPECT_EQ(m.layers[3].kind, LayerKind::kBias);
  EXPECT_EQ(m.layers[0].shape, (Shape{32, 64}));
}

TEST(BuildArch, SameSeedIsBitIdentical) {
  EXPECT_EQ(build_arch("lenet-s", 10, Shape{1, 28, 28}, 4),
            build_arch("lenet-s", 10, Shape{1, 28, 28}, 4));
  EXPECT_NE(build_arch("lenet-s", 10, Shape{1, 28, 28}, 4),
            build_arch("lenet-s", 10, Shape{1, 28, 28}, 5));
}

TEST(BuildArch, LenetShapes) {
  const auto m = build_arch("lenet-s", 10, Shape{1, 28, 28});
  ASSERT_EQ(m.num_layers(), 8u);
  EXPECT_EQ(m.layers[6].shape[0], 10u);
  std::mt19937_64 rng(2);
  const Tensor out = forward(m, random_tensor(Shape{2, 1, 28, 28}, rng, 0, 1));
  EXPECT_EQ(out.shape(), (Shape{2, 10}));
  EXPECT_TRUE(out.all_finite());
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    EXPECT_EQ(block_of_layer(m, l), l / 2);
  }
}

TEST(BuildArch, RejectsUnknownAndTinyInputs) {
  EXPECT_THROW(build_arch("resnet", 10, Shape{1, 28, 28}), std::invalid_argument);
  EXPECT_THROW(build_arch("lenet-s", 10, Shape{1, 8, 8}), std::invalid_argument);
  EXPECT_THROW(build_arch("mlp-2", 1, Shape{4}), std::invalid_argument);
}

TEST(Training, EpochReducesLossOnSeparableData) {
  std::mt19937_64 rng(3);
  Tensor x(Shape{64, 4});
  std::vector<int> y(64);
  std::normal_distribution<double> noise(0.0, 0.1);
  for (std::size_t i = 0; i < 64; ++i) {
    y[i] = static_cast<int>(i % 2);
    for (std::size_t j = 0; j < 4; ++j) x[i * 4 + j] = (y[i] ? 1.0 : -1.0) + noise(rng);
  }
  auto m = build_arch("mlp-2", 2, Shape{4}, 1);
  auto v = m.filled_like(0.0);
  TrainingConfig cfg;
  cfg.learning_rate = 0.05;
  std::vector<std::size_t> order(64);
  for (std::size_t i = 0; i < 64; ++i) order[i] = i;
  const double first = train_epoch(m, v, x, y, order, cfg, 0);
  double last = first;
  for (int e = 0; e < 5; ++e) last = train_epoch(m, v, x, y, order, cfg, 0);
  EXPECT_LT(last, first);
  const auto pred = argmax_rows(forward(m, x));
  EXPECT_EQ(std::count_if(pred.begin(), pred.end(), [&, i = 0](int p) mutable {
              return p == y[i++];
            }),
            64);
}

}  // namespace
}  // namespace flplas
