#include <gtest/gtest.h>

#include "flplas/attacks.hpp"
#include "flplas/dataset.hpp"

namespace flplas {
namespace {

Dataset flat_dataset(std::size_t n, std::size_t side, double value, int first_label = 0) {
  Dataset ds;
  ds.name = "flat";
  ds.num_classes = 10;
  ds.images = Tensor(Shape{n, 1, side, side}, value);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels.push_back(first_label + static_cast<int>(i % (10 - first_label)));
  }
  return ds;
}

bool has_patch(const Dataset& ds, std::size_t i) {
  const double* img = ds.images.data() + i * 28 * 28;
  return img[26] == 1.0 && img[27] == 1.0 && img[28 + 26] == 1.0 && img[28 + 27] == 1.0;
}

TEST(Trigger, ZeroImageGetsFourPixels) {
  const Tensor img = apply_trigger(Tensor(Shape{1, 28, 28}), TriggerGeometry{});
  std::size_t lit = 0;
  for (std::size_t r = 0; r < 28; ++r) {
    for (std::size_t c = 0; c < 28; ++c) {
      const double v = img[r * 28 + c];
      if (r < 2 && c >= 26) {
        EXPECT_EQ(v, 1.0);
      } else {
        EXPECT_EQ(v, 0.0);
      }
      lit += v != 0.0;
    }
  }
  EXPECT_EQ(lit, 4u);
}

TEST(Trigger, WhiteImageUnchangedAndIdempotent) {
  const Tensor white(Shape{1, 28, 28}, 1.0);
  EXPECT_EQ(apply_trigger(white, {}), white);
  const Tensor grey(Shape{1, 28, 28}, 0.3);
  const Tensor once = apply_trigger(grey, {});
  EXPECT_EQ(apply_trigger(once, {}), once);
}

TEST(Trigger, CornersAndPlusPattern) {
  TriggerGeometry g;
  g.corner = Corner::kBottomLeft;
  g.height = g.width = 3;
  const auto box = trigger_pixels(g, 10, 10);
  EXPECT_EQ(box.size(), 9u);
  EXPECT_EQ(box.front(), (std::pair<std::size_t, std::size_t>{7, 0}));
  g.pattern = TriggerPattern::kPlus;
  EXPECT_EQ(trigger_pixels(g, 10, 10).size(), 5u);
  g.height = 11;
  EXPECT_THROW(trigger_pixels(g, 10, 10), std::invalid_argument);
}

TEST(Poison, ZeroFractionIsIdentity) {
  const Dataset ds = flat_dataset(50, 28, 0.2);
  AttackSpec a;
  a.kind = AttackKind::kTrigger;
  a.poison_fraction = 0.0;
  const auto r = poison_partition(ds, a);
  EXPECT_EQ(r.data, ds);
  EXPECT_TRUE(r.poisoned.empty());
}

TEST(Poison, TriggerThirtyPercent) {
  const Dataset ds = flat_dataset(100, 28, 0.2, 1);
  AttackSpec a;
  a.kind = AttackKind::kTrigger;
  a.poison_fraction = 0.3;
  a.seed = 17;
  const auto r = poison_partition(ds, a);
  ASSERT_EQ(r.poisoned.size(), 30u);
  std::size_t patched = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const bool p = has_patch(r.data, i);
    patched += p;
    if (p) {
      EXPECT_EQ(r.data.labels[i], 0);
    } else {
      EXPECT_EQ(r.data.labels[i], ds.labels[i]);
    }
  }
  EXPECT_EQ(patched, 30u);
  EXPECT_EQ(poison_partition(ds, a).poisoned, r.poisoned);
}

TEST(Poison, SemanticFlipsEverySourceSample) {
  Dataset ds = flat_dataset(60, 12, 0.0);
  for (std::size_t i = 0; i < ds.images.size(); ++i) ds.images[i] = static_cast<double>(i % 7) / 7;
  AttackSpec a;
  a.kind = AttackKind::kSemantic;
  a.source_label = 5;
  a.target_label = 3;
  a.poison_fraction = 1.0;
  const auto r = poison_partition(ds, a);
  EXPECT_EQ(r.data.images, ds.images);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(r.data.labels[i], ds.labels[i] == 5 ? 3 : ds.labels[i]);
  }
}

TEST(Poison, SemanticWithoutSourceWarns) {
  Dataset ds = flat_dataset(4, 12, 0.0);
  ds.labels = {0, 1, 2, 3};
  AttackSpec a;
  a.kind = AttackKind::kSemantic;
  const auto r = poison_partition(ds, a);
  EXPECT_TRUE(r.warning);
  EXPECT_EQ(r.data, ds);
}

TEST(AttackSpec, Validation) {
  AttackSpec a;
  a.kind = AttackKind::kSemantic;
  a.source_label = a.target_label = 2;
  EXPECT_THROW(a.validate(10), std::invalid_argument);
  a.source_label = 1;
  a.poison_fraction = 1.5;
  EXPECT_THROW(a.validate(10), std::invalid_argument);
  a.poison_fraction = 0.5;
  a.target_label = 10;
  EXPECT_THROW(a.validate(10), std::invalid_argument);
}

TEST(EdgeCase, AbsentPopulationSelectsNothing) {
  EXPECT_TRUE(select_edgecase(synth_generate(10, 5, 12, 1), EdgeSelector{}).empty());
}

TEST(EdgeCase, SelectsExactlyTheInjectedSamples) {
  const Dataset base = synth_generate(10, 10, 12, 1);
  const Dataset ds = inject_rotated(base, 7, 90.0, 12, 4);
  ASSERT_EQ(ds.size(), base.size() + 12);
  std::vector<std::size_t> want;
  for (std::size_t i = base.size(); i < ds.size(); ++i) want.push_back(i);
  EXPECT_EQ(select_edgecase(ds, {7, 90.0}), want);
  EXPECT_TRUE(select_edgecase(ds, {7, 45.0}).empty());

  AttackSpec a;
  a.kind = AttackKind::kEdgeCase;
  a.target_label = 9;
  a.edge = {7, 90.0};
  const Dataset bd = make_backdoor_testset(ds, a);
  ASSERT_EQ(bd.size(), 12u);
  for (int y : bd.labels) EXPECT_EQ(y, 9);
}

TEST(EdgeCase, RotationByQuarterTurnMovesPixels) {
  Tensor img(Shape{1, 5, 5});
  img[0 * 5 + 2] = 1.0;  // top middle
  const Tensor r = rotate_image(img, 90.0);
  double total = 0.0;
  for (double v : r.values()) total += v;
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_EQ(r[0 * 5 + 2], 0.0);
  EXPECT_EQ(rotate_image(img, 0.0), img);
}

}  // namespace
}  // namespace flplas
