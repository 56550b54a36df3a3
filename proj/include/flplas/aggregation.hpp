#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flplas/dataset.hpp"
#include "flplas/model.hpp"
#include "flplas/nn.hpp"

namespace flplas {

// What a client hands to the server: its local model M_i and sample count
// n_i. Under FL-PLAS the classifier layers arrive withheld.
struct ClientSubmission {
  int client_id = 0;
  LayeredModel model;
  std::size_t num_samples = 0;
};

enum class RuleKind { kFedAvg, kFlPlas, kKrum, kMultiKrum, kRsa, kNdc, kFlTrust, kFlame };

std::string_view to_string(RuleKind rule);
std::optional<RuleKind> parse_rule(std::string_view s);

struct RuleConfig {
  RuleKind rule = RuleKind::kFedAvg;
  std::size_t cut_layer = 0;      // flplas: first layer kept on the clients
  std::size_t krum_f = 0;         // assumed number of malicious submissions
  std::size_t multikrum_m = 1;
  double ndc_threshold = 1.0;     // TS
  double rsa_beta = 0.01;
  bool rsa_beta_decay = false;    // beta * lr_decay_base^t
  double flame_sigma = 0.01;
  bool flame_noise_absolute = false;  // std = sigma instead of sigma * S_median
  std::size_t root_size = 100;
  std::shared_ptr<const Dataset> root_dataset;  // fltrust only

  // Throws std::invalid_argument for missing or out-of-range rule fields.
  void validate(std::size_t num_layers) const;
};

// Per-round inputs some rules need beyond the submissions.
struct AggregationContext {
  int round_t = 1;
  std::uint64_t seed = 0;
  TrainingConfig training;
};

LayeredModel fedavg(const LayeredModel& prev_global,
                    std::span<const ClientSubmission> subs);

// Layers below cut_layer: FedAvg. Layers from cut_layer on come back withheld.
LayeredModel flplas_aggregate(const LayeredModel& prev_global,
                              std::span<const ClientSubmission> subs,
                              std::size_t cut_layer);

// Krum score of each submission in ascending client_id order: the sum of
// squared distances to its n - f - 2 nearest other submissions.
struct KrumScores {
  std::vector<int> client_ids;
  std::vector<double> scores;
};
KrumScores krum_scores(std::span<const ClientSubmission> subs, std::size_t f);

LayeredModel krum(const LayeredModel& prev_global,
                  std::span<const ClientSubmission> subs, std::size_t f);
// Unweighted mean of the m lowest-scoring submissions.
LayeredModel multikrum(const LayeredModel& prev_global,
                       std::span<const ClientSubmission> subs, std::size_t f,
                       std::size_t m);

// G_t = G_{t-1} + beta * sum_i sign(M_i - G_{t-1}), sign(0) = 0.
LayeredModel rsa(const LayeredModel& prev_global,
                 std::span<const ClientSubmission> subs, double beta);

struct NdcResult {
  LayeredModel model;
  std::vector<double> clipped_norms;  // ascending client_id order
};
NdcResult ndc_detailed(const LayeredModel& prev_global,
                       std::span<const ClientSubmission> subs, double threshold);
LayeredModel ndc(const LayeredModel& prev_global,
                 std::span<const ClientSubmission> subs, double threshold);

// Server update g0: one pass of local training on the root dataset starting
// from prev_global with zero momentum.
std::vector<double> fltrust_server_update(const LayeredModel& prev_global,
                                          const Dataset& root,
                                          const TrainingConfig& cfg,
                                          int round_t, std::uint64_t seed);
struct FlTrustResult {
  LayeredModel model;
  std::vector<double> trust;           // ascending client_id order
  std::vector<double> rescaled_norms;
  double server_norm = 0.0;
};
FlTrustResult fltrust_combine(const LayeredModel& prev_global,
                              std::span<const ClientSubmission> subs,
                              std::span<const double> server_update);
LayeredModel fltrust(const LayeredModel& prev_global,
                     std::span<const ClientSubmission> subs, const Dataset& root,
                     const TrainingConfig& cfg, int round_t, std::uint64_t seed);

// Two-way average-linkage clustering of updates under cosine distance; ties
// between candidate merges are broken by the average Euclidean distance,
// then by the lowest member index. Returns a cluster label (0/1) per input.
std::vector<int> two_way_average_linkage(
    const std::vector<std::vector<double>>& updates);

struct FlameResult {
  LayeredModel model;
  std::vector<int> kept_ids;
  std::vector<double> clip_factors;  // one per kept client
  double median_distance = 0.0;
};
FlameResult flame_detailed(const LayeredModel& prev_global,
                           std::span<const ClientSubmission> subs, double sigma,
                           bool absolute_noise, std::uint64_t noise_seed);
LayeredModel flame(const LayeredModel& prev_global,
                   std::span<const ClientSubmission> subs, double sigma,
                   std::uint64_t noise_seed = 0);

// Dispatches to the configured rule. Submissions may arrive in any order.
LayeredModel aggregate(const RuleConfig& rule, const LayeredModel& prev_global,
                       std::span<const ClientSubmission> subs,
                       const AggregationContext& ctx);

// Server-side screening cost per method, as commonly reported for these
// rules (tau = collected updates, zeta = parameters per update).
struct ScreeningEntry {
  std::string method;
  std::string complexity;
};
std::vector<ScreeningEntry> screening_table();
std::optional<std::string> screening_complexity(RuleKind rule);
std::string screening_note();

}  // namespace flplas
