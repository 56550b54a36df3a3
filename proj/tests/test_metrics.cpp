#include <gtest/gtest.h>

#include <random>

#include "flplas/attacks.hpp"
#include "flplas/metrics.hpp"
#include "test_util.hpp"

namespace flplas {
namespace {

Dataset rows(std::vector<double> values, std::vector<int> labels, std::size_t dim,
             std::size_t classes) {
  Dataset ds;
  ds.name = "rows";
  ds.num_classes = classes;
  ds.images = Tensor(Shape{labels.size(), dim}, std::move(values));
  ds.labels = std::move(labels);
  return ds;
}

TEST(Evaluate, ConstantTargetPredictor) {
  // Zero weights, bias favouring class 2.
  const auto m = testing::dense_model({{2, 4, std::vector<double>(8, 0.0), {0, 0, 5, 0}}});
  const Dataset clean = rows(std::vector<double>(20, 0.3), {0, 1, 2, 2, 3, 1, 0, 2, 3, 1}, 2, 4);
  const Dataset bd = rows(std::vector<double>(8, 0.7), {2, 2, 2, 2}, 2, 4);
  const auto r = evaluate(m, clean, bd);
  EXPECT_EQ(r.ba, 1.0);
  EXPECT_DOUBLE_EQ(r.ma, 0.3);
}

TEST(Evaluate, RandomGuessingIsNearChance) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> cls(0, 9);
  std::vector<int> pred(1000), labels(1000);
  for (std::size_t i = 0; i < 1000; ++i) {
    pred[i] = cls(rng);
    labels[i] = static_cast<int>(i % 10);
  }
  EXPECT_NEAR(label_match_rate(pred, labels), 0.1, 0.03);
}

TEST(Evaluate, FourSamplesByHand) {
  // logits = (x0, x1): prediction is the larger coordinate.
  const auto m = testing::dense_model({{2, 2, {1, 0, 0, 1}, {0, 0}}});
  const Dataset clean = rows({0.9, 0.1, 0.2, 0.8, 0.7, 0.6, 0.1, 0.3}, {0, 1, 1, 1}, 2, 2);
  const Dataset bd = rows({0.9, 0.1, 0.2, 0.8, 0.4, 0.5, 0.6, 0.5}, {1, 1, 1, 1}, 2, 2);
  const auto r = evaluate(m, clean, bd);
  // predictions clean: 0, 1, 0, 1 -> 3 of 4; backdoor: 0, 1, 1, 0 -> 2 of 4
  EXPECT_EQ(r.ma, 0.75);
  EXPECT_EQ(r.ba, 0.5);
  EXPECT_FALSE(r.ba_atk.has_value());
}

TEST(Evaluate, EmptyBackdoorSetScoresZero) {
  const auto m = testing::dense_model({{2, 2, {1, 0, 0, 1}, {0, 0}}});
  const Dataset clean = rows({0.9, 0.1}, {0}, 2, 2);
  EXPECT_EQ(evaluate(m, clean, Dataset{}).ba, 0.0);
  EXPECT_THROW(evaluate(m, Dataset{}, clean), std::invalid_argument);
}

TEST(Evaluate, ChunkingDoesNotChangeResults) {
  std::mt19937_64 rng(4);
  const auto m = testing::random_like(build_arch("mlp-2", 3, Shape{5}), rng);
  const std::size_t n = 700;
  std::vector<double> x(n * 5);
  std::vector<int> y(n);
  for (auto& v : x) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % 3);
  const Dataset ds = rows(x, y, 5, 3);
  const auto pred = predict(m, ds);
  EXPECT_EQ(pred, argmax_rows(forward(m, ds.images)));
}

TEST(Partitioned, MatchesPerClientModels) {
  std::mt19937_64 rng(5);
  const auto shape = build_arch("lenet-s", 3, Shape{1, 12, 12});
  const auto global = testing::random_like(shape, rng, 0.3);
  std::vector<double> x(40 * 144);
  for (auto& v : x) v = std::uniform_real_distribution<double>(0, 1)(rng);
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) y[i] = static_cast<int>(i % 3);
  Dataset clean = rows(x, y, 144, 3);
  clean.images.reshape(Shape{40, 1, 12, 12});
  Dataset bd = clean;
  for (auto& l : bd.labels) l = 0;

  for (std::size_t cut : {3u, 4u, 7u}) {
    std::vector<LocalHead> heads;
    std::vector<LayeredModel> full;
    for (int id = 0; id < 4; ++id) {
      auto m = testing::random_like(shape, rng, 0.3);
      for (std::size_t l = 0; l < cut; ++l) m.layers[l] = global.layers[l];
      LocalHead h{id, id == 2, {}};
      for (std::size_t l = cut; l < 8; ++l) h.layers.push_back(m.layers[l].values());
      heads.push_back(h);
      full.push_back(m);
    }
    auto shared = global;
    shared.withhold_from(cut);
    const auto r = evaluate_partitioned(shared, cut, heads, clean, bd);
    double ma = 0, ba = 0;
    for (int id : {0, 1, 3}) {
      const auto e = evaluate(full[static_cast<std::size_t>(id)], clean, bd);
      ma += e.ma / 3;
      ba += e.ba / 3;
    }
    EXPECT_NEAR(r.ma, ma, 1e-12) << "cut " << cut;
    EXPECT_NEAR(r.ba, ba, 1e-12) << "cut " << cut;
    ASSERT_TRUE(r.ba_atk.has_value());
    EXPECT_NEAR(*r.ba_atk, evaluate(full[2], clean, bd).ba, 1e-12);
    EXPECT_EQ(r.per_client_ma.size(), 3u);
  }
}

TEST(Surgery, SelfSurgeryIsIdentity) {
  std::mt19937_64 rng(6);
  const auto m = testing::random_like(build_arch("lenet-s", 10, Shape{1, 28, 28}), rng);
  EXPECT_EQ(model_surgery(m, m, 4), m);
}

TEST(Surgery, TakesLayersFromBothSources) {
  std::mt19937_64 rng(7);
  const auto shape = build_arch("mlp-2", 3, Shape{4});
  const auto a = testing::random_like(shape, rng), b = testing::random_like(shape, rng);
  const auto s = model_surgery(a, b, 2);
  EXPECT_EQ(s.layers[0], a.layers[0]);
  EXPECT_EQ(s.layers[1], a.layers[1]);
  EXPECT_EQ(s.layers[2], b.layers[2]);
  EXPECT_EQ(s.layers[3], b.layers[3]);
  EXPECT_THROW(model_surgery(a, build_arch("mlp-2", 4, Shape{4}), 2), std::invalid_argument);
}

TEST(Surgery, ExperimentTableShape) {
  const Dataset train = synth_generate(4, 60, 12, 1);
  const Dataset test = synth_generate(4, 20, 12, 2);
  AttackSpec attack;
  attack.kind = AttackKind::kTrigger;
  attack.trigger.height = attack.trigger.width = 3;
  SurgeryConfig cfg;
  cfg.arch_id = "mlp-2";
  cfg.cut_layer = 2;
  cfg.epochs = 2;
  cfg.training.learning_rate = 0.05;
  const auto t = surgery_experiment(train, test, attack, cfg);
  ASSERT_EQ(t.cells.size(), 4u);
  EXPECT_EQ(t.cells[0].feature_extractor, "clean");
  EXPECT_EQ(t.cells[0].classifier, "clean");
  EXPECT_EQ(t.cells[1].classifier, "backdoor");
  EXPECT_EQ(t.cells[2].feature_extractor, "backdoor");
  EXPECT_EQ(t.cells[3].classifier, "backdoor");
  const auto bd = make_backdoor_testset(test, attack);
  const auto clean_eval = evaluate(t.clean_model, test, bd);
  EXPECT_EQ(t.cells[0].ma, clean_eval.ma);
  EXPECT_EQ(t.cells[0].ba, clean_eval.ba);
  EXPECT_EQ(t.cells[3].ma, evaluate(t.backdoor_model, test, bd).ma);
  const auto again = surgery_experiment(train, test, attack, cfg);
  EXPECT_EQ(again.clean_model, t.clean_model);
  EXPECT_EQ(again.backdoor_model, t.backdoor_model);
  const auto text = format_surgery_table(t);
  EXPECT_NE(text.find("clean"), std::string::npos);
}

}  // namespace
}  // namespace flplas
