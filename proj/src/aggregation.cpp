#include "flplas/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "flplas/random.hpp"

namespace flplas {

std::string_view to_string(RuleKind rule) {
  switch (rule) {
    case RuleKind::kFedAvg:
      return "fedavg";
    case RuleKind::kFlPlas:
      return "flplas";
    case RuleKind::kKrum:
      return "krum";
    case RuleKind::kMultiKrum:
      return "multikrum";
    case RuleKind::kRsa:
      return "rsa";
    case RuleKind::kNdc:
      return "ndc";
    case RuleKind::kFlTrust:
      return "fltrust";
    case RuleKind::kFlame:
      return "flame";
  }
  return "fedavg";
}

std::optional<RuleKind> parse_rule(std::string_view s) {
  for (auto r : {RuleKind::kFedAvg, RuleKind::kFlPlas, RuleKind::kKrum,
                 RuleKind::kMultiKrum, RuleKind::kRsa, RuleKind::kNdc,
                 RuleKind::kFlTrust, RuleKind::kFlame}) {
    if (to_string(r) == s) return r;
  }
  if (s == "fl-plas") return RuleKind::kFlPlas;
  if (s == "multi-krum") return RuleKind::kMultiKrum;
  return std::nullopt;
}

void RuleConfig::validate(std::size_t num_layers) const {
  switch (rule) {
    case RuleKind::kFlPlas:
      if (cut_layer == 0 || cut_layer > num_layers) {
        throw std::invalid_argument("cut_layer must be in [1, " +
                                    std::to_string(num_layers) + "]");
      }
      break;
    case RuleKind::kMultiKrum:
      if (multikrum_m == 0) throw std::invalid_argument("multikrum_m must be >= 1");
      break;
    case RuleKind::kRsa:
      if (!(rsa_beta > 0.0)) throw std::invalid_argument("rsa_beta must be > 0");
      break;
    case RuleKind::kNdc:
      if (!(ndc_threshold > 0.0)) {
        throw std::invalid_argument("ndc_threshold must be > 0");
      }
      break;
    case RuleKind::kFlame:
      if (!(flame_sigma >= 0.0)) {
        throw std::invalid_argument("flame_sigma must be >= 0");
      }
      break;
    case RuleKind::kFlTrust:
      if (root_size == 0) throw std::invalid_argument("root_size must be positive");
      break;
    default:
      break;
  }
}

namespace {

// Submissions in ascending client_id order. Every reduction walks this order,
// which makes all rules independent of the order they were handed in.
std::vector<const ClientSubmission*> sorted_view(
    std::span<const ClientSubmission> subs, const LayeredModel& prev_global,
    std::size_t first_layer, std::size_t last_layer) {
  if (subs.empty()) throw std::invalid_argument("aggregation: no submissions");
  std::vector<const ClientSubmission*> view;
  view.reserve(subs.size());
  for (const auto& s : subs) {
    require_congruent(prev_global, s.model,
                      "submission from client " + std::to_string(s.client_id));
    for (std::size_t l = first_layer; l < last_layer; ++l) {
      if (s.model.layers[l].withheld()) {
        throw std::invalid_argument("submission from client " +
                                    std::to_string(s.client_id) +
                                    " is missing layer " + std::to_string(l));
      }
    }
    view.push_back(&s);
  }
  std::sort(view.begin(), view.end(),
            [](const auto* a, const auto* b) { return a->client_id < b->client_id; });
  for (std::size_t i = 1; i < view.size(); ++i) {
    if (view[i]->client_id == view[i - 1]->client_id) {
      throw std::invalid_argument("duplicate submission from client " +
                                  std::to_string(view[i]->client_id));
    }
  }
  return view;
}

std::vector<const ClientSubmission*> full_view(std::span<const ClientSubmission> subs,
                                               const LayeredModel& prev) {
  return sorted_view(subs, prev, 0, prev.num_layers());
}

// Sample-weighted mean of layers [first, last) into `out`.
void weighted_mean_layers(const std::vector<const ClientSubmission*>& view,
                          LayeredModel& out, std::size_t first, std::size_t last) {
  double total = 0.0;
  for (const auto* s : view) total += static_cast<double>(s->num_samples);
  if (!(total > 0.0)) throw std::invalid_argument("aggregation: zero total samples");
  for (std::size_t l = first; l < last; ++l) {
    Tensor acc(out.layers[l].shape, 0.0);
    for (const auto* s : view) {
      const double w = static_cast<double>(s->num_samples) / total;
      const auto v = s->model.layers[l].values().values();
      for (std::size_t i = 0; i < v.size(); ++i) acc[i] += w * v[i];
    }
    out.layers[l].param = std::move(acc);
  }
}

std::vector<double> update_of(const ClientSubmission& s,
                              const std::vector<double>& global_flat) {
  auto u = flatten(s.model);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] -= global_flat[i];
  return u;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

LayeredModel model_from_flat(const LayeredModel& like, const std::vector<double>& flat) {
  LayeredModel out = like;
  unflatten(flat, out);
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

LayeredModel fedavg(const LayeredModel& prev_global,
                    std::span<const ClientSubmission> subs) {
  const auto view = full_view(subs, prev_global);
  LayeredModel out = prev_global;
  weighted_mean_layers(view, out, 0, out.num_layers());
  return out;
}

LayeredModel flplas_aggregate(const LayeredModel& prev_global,
                              std::span<const ClientSubmission> subs,
                              std::size_t cut_layer) {
  if (cut_layer == 0 || cut_layer > prev_global.num_layers()) {
    throw std::invalid_argument("flplas: cut_layer " + std::to_string(cut_layer) +
                                " outside [1, " +
                                std::to_string(prev_global.num_layers()) + "]");
  }
  const auto view = sorted_view(subs, prev_global, 0, cut_layer);
  LayeredModel out = prev_global;
  weighted_mean_layers(view, out, 0, cut_layer);
  out.withhold_from(cut_layer);
  return out;
}

KrumScores krum_scores(std::span<const ClientSubmission> subs, std::size_t f) {
  if (subs.size() < f + 3) {
    throw std::invalid_argument("krum: need at least f + 3 = " +
                                std::to_string(f + 3) + " submissions, got " +
                                std::to_string(subs.size()));
  }
  const auto view = full_view(subs, subs.front().model);
  const std::size_t n = view.size();
  std::vector<std::vector<double>> flat;
  flat.reserve(n);
  for (const auto* s : view) flat.push_back(flatten(s->model));
  std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < flat[i].size(); ++k) {
        const double diff = flat[i][k] - flat[j][k];
        d += diff * diff;
      }
      dist[i][j] = dist[j][i] = d;
    }
  }
  const std::size_t neighbours = n - f - 2;
  KrumScores out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> others;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) others.push_back(dist[i][j]);
    }
    std::sort(others.begin(), others.end());
    out.client_ids.push_back(view[i]->client_id);
    out.scores.push_back(
        std::accumulate(others.begin(), others.begin() + static_cast<long>(neighbours), 0.0));
  }
  return out;
}

namespace {

// Indices into the sorted view, best score first, ties to the lower id.
std::vector<std::size_t> krum_ranking(const KrumScores& ks) {
  std::vector<std::size_t> order(ks.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ks.scores[a] < ks.scores[b];
  });
  return order;
}

}  // namespace

LayeredModel krum(const LayeredModel& prev_global,
                  std::span<const ClientSubmission> subs, std::size_t f) {
  return multikrum(prev_global, subs, f, 1);
}

LayeredModel multikrum(const LayeredModel& prev_global,
                       std::span<const ClientSubmission> subs, std::size_t f,
                       std::size_t m) {
  if (m == 0) throw std::invalid_argument("multikrum: m must be >= 1");
  const auto view = full_view(subs, prev_global);
  const auto ks = krum_scores(subs, f);
  const auto order = krum_ranking(ks);
  const std::size_t take = std::min(m, order.size());
  if (take == 1) return view[order[0]]->model;
  LayeredModel out = prev_global;
  for (std::size_t l = 0; l < out.num_layers(); ++l) {
    Tensor acc(out.layers[l].shape, 0.0);
    // Sum in ascending client_id order among the selected submissions.
    std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<long>(take));
    std::sort(chosen.begin(), chosen.end());
    for (auto idx : chosen) {
      const auto v = view[idx]->model.layers[l].values().values();
      for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
    }
    for (auto& v : acc.values()) v /= static_cast<double>(take);
    out.layers[l].param = std::move(acc);
  }
  return out;
}

LayeredModel rsa(const LayeredModel& prev_global,
                 std::span<const ClientSubmission> subs, double beta) {
  const auto view = full_view(subs, prev_global);
  LayeredModel out = prev_global;
  for (std::size_t l = 0; l < out.num_layers(); ++l) {
    const auto g = prev_global.layers[l].values().values();
    std::vector<double> sign_sum(g.size(), 0.0);
    for (const auto* s : view) {
      const auto v = s->model.layers[l].values().values();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double d = v[i] - g[i];
        sign_sum[i] += d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      }
    }
    auto o = out.layers[l].values().values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = g[i] + beta * sign_sum[i];
  }
  return out;
}

NdcResult ndc_detailed(const LayeredModel& prev_global,
                       std::span<const ClientSubmission> subs, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("ndc: threshold must be > 0");
  const auto view = full_view(subs, prev_global);
  const auto g = flatten(prev_global);
  double total = 0.0;
  for (const auto* s : view) total += static_cast<double>(s->num_samples);
  std::vector<double> acc(g.size(), 0.0);
  NdcResult result;
  for (const auto* s : view) {
    auto u = update_of(*s, g);
    const double scale = std::max(1.0, norm2(u) / threshold);
    for (auto& v : u) v /= scale;
    result.clipped_norms.push_back(norm2(u));
    const double w = static_cast<double>(s->num_samples) / total;
    for (std::size_t i = 0; i < u.size(); ++i) acc[i] += w * u[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  result.model = model_from_flat(prev_global, acc);
  return result;
}

LayeredModel ndc(const LayeredModel& prev_global,
                 std::span<const ClientSubmission> subs, double threshold) {
  return ndc_detailed(prev_global, subs, threshold).model;
}

std::vector<double> fltrust_server_update(const LayeredModel& prev_global,
                                          const Dataset& root,
                                          const TrainingConfig& cfg,
                                          int round_t, std::uint64_t seed) {
  if (root.empty()) throw std::invalid_argument("fltrust: empty root dataset");
  LayeredModel trained = prev_global;
  LayeredModel velocity = prev_global.filled_like(0.0);
  std::vector<std::size_t> order(root.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_stream({seed, stream::kRoot, static_cast<std::uint64_t>(round_t)});
  std::shuffle(order.begin(), order.end(), rng);
  train_epoch(trained, velocity, root.images, root.labels, order, cfg, round_t);
  auto g0 = flatten(trained);
  const auto g = flatten(prev_global);
  for (std::size_t i = 0; i < g0.size(); ++i) g0[i] -= g[i];
  return g0;
}

FlTrustResult fltrust_combine(const LayeredModel& prev_global,
                              std::span<const ClientSubmission> subs,
                              std::span<const double> server_update) {
  const auto view = full_view(subs, prev_global);
  const auto g = flatten(prev_global);
  if (server_update.size() != g.size()) {
    throw std::invalid_argument("fltrust: server update has wrong length");
  }
  const std::vector<double> g0(server_update.begin(), server_update.end());
  FlTrustResult result;
  result.server_norm = norm2(g0);
  std::vector<double> acc(g.size(), 0.0);
  double trust_sum = 0.0;
  for (const auto* s : view) {
    auto u = update_of(*s, g);
    const double nu = norm2(u);
    const double trust = std::max(0.0, cosine(u, g0));
    const double scale = nu > 0.0 ? result.server_norm / nu : 0.0;
    for (auto& v : u) v *= scale;
    result.trust.push_back(trust);
    result.rescaled_norms.push_back(norm2(u));
    trust_sum += trust;
    for (std::size_t i = 0; i < u.size(); ++i) acc[i] += trust * u[i];
  }
  if (trust_sum > 0.0) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = g[i] + acc[i] / trust_sum;
    result.model = model_from_flat(prev_global, acc);
  } else {
    result.model = prev_global;
  }
  return result;
}

LayeredModel fltrust(const LayeredModel& prev_global,
                     std::span<const ClientSubmission> subs, const Dataset& root,
                     const TrainingConfig& cfg, int round_t, std::uint64_t seed) {
  const auto g0 = fltrust_server_update(prev_global, root, cfg, round_t, seed);
  return fltrust_combine(prev_global, subs, g0).model;
}

std::vector<int> two_way_average_linkage(
    const std::vector<std::vector<double>>& updates) {
  const std::size_t n = updates.size();
  if (n < 2) throw std::invalid_argument("clustering needs at least 2 points");
  std::vector<std::vector<double>> cos_d(n, std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> euc_d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      cos_d[i][j] = cos_d[j][i] = 1.0 - cosine(updates[i], updates[j]);
      double e = 0.0;
      for (std::size_t k = 0; k < updates[i].size(); ++k) {
        const double d = updates[i][k] - updates[j][k];
        e += d * d;
      }
      euc_d[i][j] = euc_d[j][i] = std::sqrt(e);
    }
  }
  std::vector<std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < n; ++i) clusters.push_back({i});
  const auto linkage = [](const auto& d, const auto& a, const auto& b) {
    double s = 0.0;
    for (auto i : a) {
      for (auto j : b) s += d[i][j];
    }
    return s / static_cast<double>(a.size() * b.size());
  };
  constexpr double kTie = 1e-12;
  while (clusters.size() > 2) {
    std::size_t best_a = 0, best_b = 1;
    double best_cos = std::numeric_limits<double>::infinity();
    double best_euc = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < clusters.size(); ++a) {
      for (std::size_t b = a + 1; b < clusters.size(); ++b) {
        const double c = linkage(cos_d, clusters[a], clusters[b]);
        const double e = linkage(euc_d, clusters[a], clusters[b]);
        // Clusters stay sorted by smallest member, so (a, b) order is the
        // lowest-index tie-break.
        if (c < best_cos - kTie ||
            (std::abs(c - best_cos) <= kTie && e < best_euc - kTie)) {
          best_cos = c;
          best_euc = e;
          best_a = a;
          best_b = b;
        }
      }
    }
    clusters[best_a].insert(clusters[best_a].end(), clusters[best_b].begin(),
                            clusters[best_b].end());
    std::sort(clusters[best_a].begin(), clusters[best_a].end());
    clusters.erase(clusters.begin() + static_cast<long>(best_b));
  }
  std::vector<int> label(n, 0);
  for (auto i : clusters[1]) label[i] = 1;
  return label;
}

FlameResult flame_detailed(const LayeredModel& prev_global,
                           std::span<const ClientSubmission> subs, double sigma,
                           bool absolute_noise, std::uint64_t noise_seed) {
  if (subs.size() < 2) throw std::invalid_argument("flame: need at least 2 submissions");
  if (!(sigma >= 0.0)) throw std::invalid_argument("flame: sigma must be >= 0");
  const auto view = full_view(subs, prev_global);
  const auto g = flatten(prev_global);
  std::vector<std::vector<double>> updates;
  for (const auto* s : view) updates.push_back(update_of(*s, g));

  const auto label = two_way_average_linkage(updates);
  const auto size1 = static_cast<std::size_t>(std::count(label.begin(), label.end(), 1));
  const std::size_t size0 = label.size() - size1;
  // label[0] belongs to the cluster holding the lowest client id.
  const int keep = size0 > size1 ? 0 : (size1 > size0 ? 1 : label[0]);

  FlameResult result;
  std::vector<std::size_t> kept;
  std::vector<double> dist;
  for (std::size_t i = 0; i < view.size(); ++i) {
    if (label[i] == keep) {
      kept.push_back(i);
      result.kept_ids.push_back(view[i]->client_id);
      dist.push_back(norm2(updates[i]));
    }
  }
  result.median_distance = median(dist);
  std::vector<double> acc(g.size(), 0.0);
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const double e =
        dist[k] > 0.0 ? std::min(1.0, result.median_distance / dist[k]) : 1.0;
    result.clip_factors.push_back(e);
    const auto& u = updates[kept[k]];
    for (std::size_t i = 0; i < u.size(); ++i) acc[i] += e * u[i];
  }
  const double std_dev = absolute_noise ? sigma : sigma * result.median_distance;
  auto rng = make_stream({noise_seed, stream::kFlameNoise});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < acc.size(); ++i) {
    acc[i] = g[i] + acc[i] / static_cast<double>(kept.size());
    if (std_dev > 0.0) acc[i] += std_dev * noise(rng);
  }
  result.model = model_from_flat(prev_global, acc);
  return result;
}

LayeredModel flame(const LayeredModel& prev_global,
                   std::span<const ClientSubmission> subs, double sigma,
                   std::uint64_t noise_seed) {
  return flame_detailed(prev_global, subs, sigma, false, noise_seed).model;
}

LayeredModel aggregate(const RuleConfig& rule, const LayeredModel& prev_global,
                       std::span<const ClientSubmission> subs,
                       const AggregationContext& ctx) {
  const auto round_key = static_cast<std::uint64_t>(ctx.round_t);
  switch (rule.rule) {
    case RuleKind::kFedAvg:
      return fedavg(prev_global, subs);
    case RuleKind::kFlPlas:
      return flplas_aggregate(prev_global, subs, rule.cut_layer);
    case RuleKind::kKrum:
      return krum(prev_global, subs, rule.krum_f);
    case RuleKind::kMultiKrum:
      return multikrum(prev_global, subs, rule.krum_f, rule.multikrum_m);
    case RuleKind::kRsa: {
      const double beta =
          rule.rsa_beta_decay
              ? rule.rsa_beta * std::pow(ctx.training.lr_decay_base, ctx.round_t)
              : rule.rsa_beta;
      return rsa(prev_global, subs, beta);
    }
    case RuleKind::kNdc:
      return ndc(prev_global, subs, rule.ndc_threshold);
    case RuleKind::kFlTrust:
      if (!rule.root_dataset) {
        throw std::invalid_argument("fltrust: no root dataset configured");
      }
      return fltrust(prev_global, subs, *rule.root_dataset, ctx.training,
                     ctx.round_t, ctx.seed);
    case RuleKind::kFlame:
      return flame_detailed(prev_global, subs, rule.flame_sigma,
                            rule.flame_noise_absolute,
                            ctx.seed ^ (round_key * 0x9E3779B97F4A7C15ULL))
          .model;
  }
  throw std::logic_error("unhandled aggregation rule");
}

std::vector<ScreeningEntry> screening_table() {
  return {{"FedAvg", "O(0)"},          {"FL-PLAS", "O(0)"},
          {"Multi-Krum", "O(τ²ζ)"}, {"Krum", "O(τ²ζ)"},
          {"RFA", "O(τζR*)"},        {"RSA", "O(τζ)"},
          {"NDC", "O(τζ)"}};
}

std::optional<std::string> screening_complexity(RuleKind rule) {
  switch (rule) {
    case RuleKind::kFedAvg:
    case RuleKind::kFlPlas:
      return "O(0)";
    case RuleKind::kKrum:
    case RuleKind::kMultiKrum:
      return "O(τ²ζ)";
    case RuleKind::kRsa:
    case RuleKind::kNdc:
      return "O(τζ)";
    case RuleKind::kFlTrust:
    case RuleKind::kFlame:
      return std::nullopt;
  }
  return std::nullopt;
}

std::string screening_note() {
  std::ostringstream os;
  os << "| Method | Screening complexity |\n|---|---|\n";
  for (const auto& e : screening_table()) {
    os << "| " << e.method << " | " << e.complexity << " |\n";
  }
  os << "\nτ: collected local updates per round; ζ: parameters per update; "
        "R*: geometric-median iterations.\n";
  return os.str();
}

}  // namespace flplas
