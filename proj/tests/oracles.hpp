#pragma once

// Independent reference computations and randomized property checks for the
// aggregation rules and the backward pass. Shared by the unit tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "flplas/aggregation.hpp"
#include "flplas/nn.hpp"
#include "test_util.hpp"

namespace flplas::oracle {

using Vec = std::vector<double>;

inline double sq_dist(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline double norm(const Vec& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

// Full pairwise score table: score_i = sum of the n - f - 2 smallest squared
// distances from point i to the others.
inline Vec krum_score_table(const std::vector<Vec>& pts, std::size_t f) {
  const std::size_t n = pts.size();
  Vec scores(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    Vec d;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) d.push_back(sq_dist(pts[i], pts[j]));
    }
    std::sort(d.begin(), d.end());
    for (std::size_t k = 0; k < n - f - 2; ++k) scores[i] += d[k];
  }
  return scores;
}

// Mean of the m best-scored points; ties go to the lower index.
inline Vec multikrum_reference(const std::vector<Vec>& pts, std::size_t f, std::size_t m) {
  const Vec scores = krum_score_table(pts, f);
  std::vector<std::size_t> idx(pts.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  idx.resize(std::min(m, idx.size()));
  std::sort(idx.begin(), idx.end());
  Vec out(pts[0].size(), 0.0);
  for (auto i : idx) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += pts[i][k];
  }
  for (auto& v : out) v /= static_cast<double>(idx.size());
  return out;
}

struct SuiteResult {
  std::size_t cases = 0;
  std::size_t failures = 0;
  double worst = 0.0;  // largest observed violation or error
  std::string first_failure;
  bool ok() const { return failures == 0; }
  void fail(const std::string& why) {
    if (failures++ == 0) first_failure = why;
  }
};

inline std::vector<ClientSubmission> random_subs(std::mt19937_64& rng, std::size_t n,
                                                 std::size_t dim, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::uniform_int_distribution<std::size_t> samples(1, 50);
  std::vector<ClientSubmission> subs;
  for (std::size_t i = 0; i < n; ++i) {
    Vec w(dim);
    for (auto& v : w) v = u(rng);
    subs.push_back(testing::submission(static_cast<int>(i), testing::vector_model(w),
                                       samples(rng)));
  }
  return subs;
}

// Krum and Multi-Krum against the brute-force score table.
inline SuiteResult krum_suite(std::size_t instances, std::uint64_t seed) {
  SuiteResult r;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < instances; ++t) {
    std::uniform_int_distribution<std::size_t> pick_f(0, 3);
    const std::size_t f = pick_f(rng);
    std::uniform_int_distribution<std::size_t> pick_n(f + 3, 10);
    const std::size_t n = std::max<std::size_t>(pick_n(rng), f + 3);
    std::uniform_int_distribution<std::size_t> pick_dim(1, 6);
    auto subs = random_subs(rng, n, pick_dim(rng));
    // Occasionally plant exact duplicates to exercise ties.
    if (t % 7 == 0) subs[n - 1].model = subs[0].model;
    std::vector<Vec> pts;
    for (const auto& s : subs) pts.push_back(flatten(s.model));
    std::uniform_int_distribution<std::size_t> pick_m(1, n);
    const std::size_t m = pick_m(rng);
    const LayeredModel prev = subs[0].model.filled_like(0.0);

    const Vec want_scores = krum_score_table(pts, f);
    const auto ks = krum_scores(subs, f);
    for (std::size_t i = 0; i < n; ++i) {
      const double err = std::abs(ks.scores[i] - want_scores[i]);
      r.worst = std::max(r.worst, err);
      if (err > 1e-12 * std::max(1.0, want_scores[i])) {
        r.fail("instance " + std::to_string(t) + ": score mismatch");
      }
    }
    const Vec k1 = flatten(krum(prev, subs, f));
    if (k1 != multikrum_reference(pts, f, 1)) {
      r.fail("instance " + std::to_string(t) + ": krum selection differs");
    }
    if (std::find(pts.begin(), pts.end(), k1) == pts.end()) {
      r.fail("instance " + std::to_string(t) + ": krum output is not a submission");
    }
    const Vec km = flatten(multikrum(prev, subs, f, m));
    const Vec want = multikrum_reference(pts, f, m);
    for (std::size_t k = 0; k < km.size(); ++k) {
      const double err = std::abs(km[k] - want[k]);
      r.worst = std::max(r.worst, err);
      if (err > 1e-12) r.fail("instance " + std::to_string(t) + ": multikrum mean differs");
    }
    ++r.cases;
  }
  return r;
}

// Every clipped delta norm is at most threshold + 1e-9.
inline SuiteResult ndc_suite(std::size_t instances, std::uint64_t seed) {
  SuiteResult r;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> thr(0.01, 3.0);
  for (std::size_t t = 0; t < instances; ++t) {
    const auto subs = random_subs(rng, 2 + t % 9, 1 + t % 17, 5.0);
    const double threshold = thr(rng);
    const LayeredModel prev = testing::random_like(subs[0].model, rng);
    const auto res = ndc_detailed(prev, subs, threshold);
    for (double c : res.clipped_norms) {
      r.worst = std::max(r.worst, c - threshold);
      if (c > threshold + 1e-9) r.fail("clipped norm above threshold");
    }
    ++r.cases;
  }
  return r;
}

// Clip factors in (0, 1], factor 1 below the median distance, and the
// sigma = 0 unanimous case returns G + update up to summation rounding.
inline SuiteResult flame_suite(std::size_t instances, std::uint64_t seed) {
  SuiteResult r;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < instances; ++t) {
    const auto subs = random_subs(rng, 3 + t % 8, 1 + t % 5, 2.0);
    const LayeredModel prev = testing::random_like(subs[0].model, rng);
    const auto res = flame_detailed(prev, subs, 0.01, false, t);
    const Vec g = flatten(prev);
    for (std::size_t k = 0; k < res.kept_ids.size(); ++k) {
      const double e = res.clip_factors[k];
      Vec u = flatten(subs[static_cast<std::size_t>(res.kept_ids[k])].model);
      for (std::size_t i = 0; i < u.size(); ++i) u[i] -= g[i];
      if (!(e > 0.0 && e <= 1.0)) r.fail("clip factor outside (0, 1]");
      if (norm(u) <= res.median_distance && e != 1.0) {
        r.fail("clip factor below 1 for an update within the median distance");
      }
    }
    // Unanimous, noiseless.
    Vec step(g.size());
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& v : step) v = u(rng);
    Vec target = g;
    for (std::size_t i = 0; i < g.size(); ++i) target[i] += step[i];
    std::vector<ClientSubmission> same;
    for (int i = 0; i < 4; ++i) {
      same.push_back(testing::submission(i, testing::vector_model(target)));
    }
    const Vec got = flatten(flame_detailed(prev, same, 0.0, false, 1).model);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double want = g[i] + (target[i] - g[i]);
      const double err = std::abs(got[i] - want);
      r.worst = std::max(r.worst, err);
      if (err > 1e-12 * std::max(1.0, std::abs(want))) {
        r.fail("sigma 0 unanimous case is not G + update");
      }
    }
    ++r.cases;
  }
  return r;
}

// Trust scores are non-negative and rescaled norms are 0 or the server norm.
inline SuiteResult fltrust_suite(std::size_t instances, std::uint64_t seed) {
  SuiteResult r;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  for (std::size_t t = 0; t < instances; ++t) {
    auto subs = random_subs(rng, 2 + t % 9, 1 + t % 7, 3.0);
    const LayeredModel prev = testing::random_like(subs[0].model, rng);
    if (t % 5 == 0) subs[0].model = prev;  // zero update
    Vec g0(flatten(prev).size());
    for (auto& v : g0) v = u(rng);
    const auto res = fltrust_combine(prev, subs, g0);
    for (std::size_t i = 0; i < res.trust.size(); ++i) {
      if (res.trust[i] < 0.0) r.fail("negative trust");
      const double n = res.rescaled_norms[i];
      const double err = std::min(std::abs(n), std::abs(n - res.server_norm));
      r.worst = std::max(r.worst, err);
      if (err > 1e-9) r.fail("rescaled norm is neither 0 nor the server norm");
    }
    ++r.cases;
  }
  return r;
}

// FL-PLAS feature layers are bit-identical to FedAvg's on the same inputs.
inline SuiteResult flplas_equality_suite(std::size_t instances, std::uint64_t seed) {
  SuiteResult r;
  std::mt19937_64 rng(seed);
  const LayeredModel shape = build_arch("mlp-2", 3, Shape{5});
  std::uniform_int_distribution<std::size_t> samples(1, 100);
  for (std::size_t t = 0; t < instances; ++t) {
    std::vector<ClientSubmission> subs;
    for (int i = 0; i < 2 + static_cast<int>(t % 6); ++i) {
      subs.push_back(testing::submission(i, testing::random_like(shape, rng), samples(rng)));
    }
    const LayeredModel prev = testing::random_like(shape, rng);
    const auto avg = fedavg(prev, subs);
    for (std::size_t cut = 1; cut <= shape.num_layers(); ++cut) {
      const auto part = flplas_aggregate(prev, subs, cut);
      for (std::size_t l = 0; l < shape.num_layers(); ++l) {
        if (l < cut && part.layers[l] != avg.layers[l]) r.fail("feature layer differs");
        if (l >= cut && !part.layers[l].withheld()) r.fail("classifier layer present");
      }
    }
    ++r.cases;
  }
  return r;
}

// Every rule returns the same model whatever order the submissions arrive in.
inline SuiteResult permutation_suite(std::size_t instances, std::uint64_t seed) {
  SuiteResult r;
  std::mt19937_64 rng(seed);
  const LayeredModel shape = build_arch("mlp-2", 3, Shape{4});
  auto root = std::make_shared<Dataset>(synth_generate(3, 4, 2, 1));
  root->images.reshape(Shape{root->size(), 4});
  const RuleKind kinds[] = {RuleKind::kFedAvg, RuleKind::kFlPlas, RuleKind::kKrum,
                            RuleKind::kMultiKrum, RuleKind::kRsa, RuleKind::kNdc,
                            RuleKind::kFlTrust, RuleKind::kFlame};
  for (std::size_t t = 0; t < instances; ++t) {
    std::vector<ClientSubmission> subs;
    for (int i = 0; i < 7; ++i) {
      subs.push_back(testing::submission(10 + i * 3, testing::random_like(shape, rng),
                                         1 + static_cast<std::size_t>(i)));
    }
    const LayeredModel prev = testing::random_like(shape, rng);
    for (const RuleKind kind : kinds) {
      RuleConfig rule;
      rule.rule = kind;
      rule.cut_layer = 2;
      rule.krum_f = 2;
      rule.multikrum_m = 3;
      rule.ndc_threshold = 0.5;
      rule.root_dataset = root;
      AggregationContext ctx{3, 99, {}};
      const auto want = aggregate(rule, prev, subs, ctx);
      auto shuffled = subs;
      for (int rep = 0; rep < 3; ++rep) {
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        if (aggregate(rule, prev, shuffled, ctx) != want) {
          r.fail(std::string(to_string(kind)) + " depends on submission order");
        }
      }
    }
    ++r.cases;
  }
  return r;
}

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Worst relative error and number of checked coordinates per layer kind.
// `kinks` counts coordinates where the h = 1e-4 step crossed a relu or
// max-pool switch and the h = 1e-6 retry was used instead.
struct GradCheck {
  double worst[3] = {0, 0, 0};
  std::size_t checked[3] = {0, 0, 0};
  std::size_t kinks[3] = {0, 0, 0};
};

// Central differences with h = 1e-4 on up to `per_layer` random coordinates
// of every layer (all of them when the layer is smaller). A coordinate that
// misses the tolerance is retried once with h = 1e-6.
inline void grad_check(const LayeredModel& model, const Tensor& x, const std::vector<int>& y,
                       std::mt19937_64& rng, std::size_t per_layer, GradCheck& acc) {
  const auto lg = loss_and_gradients(model, x, y);
  constexpr double kTol = 1e-4;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto kind = static_cast<std::size_t>(model.layers[l].kind);
    const std::size_t size = model.layers[l].values().size();
    std::uniform_int_distribution<std::size_t> pick(0, size - 1);
    for (std::size_t s = 0; s < std::min(per_layer, size); ++s) {
      const std::size_t i = size <= per_layer ? s : pick(rng);
      const auto central = [&](double h) {
        LayeredModel plus = model, minus = model;
        plus.layers[l].values()[i] += h;
        minus.layers[l].values()[i] -= h;
        return (softmax_cross_entropy(forward(plus, x), y) -
                softmax_cross_entropy(forward(minus, x), y)) /
               (2 * h);
      };
      const double analytic = lg.grads.layers[l].values()[i];
      double err = rel_error(analytic, central(1e-4));
      if (err > kTol) {
        err = rel_error(analytic, central(1e-6));
        if (err <= kTol) ++acc.kinks[kind];
      }
      acc.worst[kind] = std::max(acc.worst[kind], err);
      ++acc.checked[kind];
    }
  }
}

}  // namespace flplas::oracle
