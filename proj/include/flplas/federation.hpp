#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "flplas/aggregation.hpp"
#include "flplas/attacks.hpp"
#include "flplas/dataset.hpp"
#include "flplas/metrics.hpp"
#include "flplas/model.hpp"
#include "flplas/nn.hpp"

namespace flplas {

struct DatasetConfig {
  std::string kind = "mnist";     // "mnist" or "synth"
  std::string mnist_dir;          // holds train-/t10k- IDX pairs
  std::size_t train_limit = 0;    // 0 keeps everything
  std::size_t test_limit = 0;
  std::size_t warmup_size = 0;    // clean samples after train_limit, server pretraining
  std::size_t warmup_epochs = 0;
  // synth only
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 200;
  std::size_t test_per_class = 50;
  std::size_t image_side = 12;
  // rotated copies injected for the edge-case attack
  std::size_t edge_train_count = 0;
  std::size_t edge_test_count = 0;
  double dirichlet_alpha = 0.2;
};

struct ExperimentConfig {
  std::size_t num_clients = 100;
  std::size_t clients_per_round = 30;
  std::size_t rounds = 200;
  double malicious_fraction = 0.0;
  std::string arch_id = "lenet-s";
  TrainingConfig training;
  RuleConfig defense;
  AttackSpec attack;
  DatasetConfig dataset;
  std::uint64_t seed = 0;
  bool reset_velocity = false;
  double boost_factor = 1.0;      // malicious uploads G + boost * (M - G)
  std::size_t eval_every = 1;     // the last round is always evaluated
  bool record_timing = false;     // wall-clock time per round; breaks byte equality

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  std::size_t malicious_count() const;
  std::size_t malicious_per_round() const;
};

struct ExperimentData {
  Dataset train;
  Dataset test;
  Dataset backdoor_test;
  Dataset warmup;                        // may be empty
  std::shared_ptr<const Dataset> root;   // fltrust only
};

// Loads or generates the data sets the config describes.
ExperimentData build_experiment_data(const ExperimentConfig& cfg);

struct ClientState {
  int client_id = 0;
  Dataset data;                          // local partition, poisoned if malicious
  std::vector<std::size_t> partition;    // indices into the training set
  bool malicious = false;
  AttackSpec attack;
  std::vector<Tensor> local_classifier;  // layers >= cut_layer, flplas only
  LayeredModel velocity;
};

// Counts every time classifier parameters cross the client boundary.
struct IsolationAudit {
  std::size_t classifier_uploads = 0;        // submissions carrying layers >= cut
  std::size_t server_classifier_writes = 0;  // global models holding layers >= cut
  std::size_t classifier_broadcasts = 0;     // redistributed models holding them
  std::size_t foreign_modifications = 0;     // client heads changed outside own training
  std::size_t checks = 0;

  std::size_t violations() const {
    return classifier_uploads + server_classifier_writes + classifier_broadcasts +
           foreign_modifications;
  }
};

struct RoundLog {
  int round = 0;
  std::string rule;
  double malicious_fraction = 0.0;
  std::vector<int> sampled;
  std::vector<int> skipped;              // sampled clients with no data
  bool evaluated = false;
  EvalReport eval;
  double loss = 0.0;                     // mean local training loss
  std::optional<double> wall_ms;
};

// Ids of malicious clients: a fixed, seeded choice of malicious_count().
std::vector<int> choose_malicious(const ExperimentConfig& cfg);

// Stratified sample: malicious_per_round() malicious ids and the rest
// benign, ascending.
std::vector<int> sample_round_clients(const ExperimentConfig& cfg,
                                      const std::vector<ClientState>& clients,
                                      int round_t);

// One round of local training on a copy of `global`. Returns nothing for an
// empty partition. Updates the client's persistent classifier and velocity.
std::optional<ClientSubmission> client_update(ClientState& state,
                                              const LayeredModel& global,
                                              const ExperimentConfig& cfg,
                                              int round_t, double* loss_out = nullptr);

// What leaves the client: the classifier is stripped under flplas, and the
// update is scaled for malicious clients when boost_factor != 1.
ClientSubmission upload(const ClientSubmission& local, const ClientState& state,
                        const LayeredModel& global, const ExperimentConfig& cfg);

class Simulation {
 public:
  Simulation(ExperimentConfig cfg, ExperimentData data);

  // Runs the next round and returns its log.
  RoundLog step();
  EvalReport evaluate_now() const;

  int rounds_done() const { return round_; }
  const ExperimentConfig& config() const { return cfg_; }
  const ExperimentData& data() const { return data_; }
  const LayeredModel& global() const { return global_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  const IsolationAudit& audit() const { return audit_; }
  // The model a client would use locally: shared layers plus its own head.
  LayeredModel client_model(int client_id) const;
  bool partial() const { return cfg_.defense.rule == RuleKind::kFlPlas; }

 private:
  void check_isolation(const std::vector<std::uint64_t>& before);
  std::vector<std::uint64_t> head_fingerprints() const;

  ExperimentConfig cfg_;
  ExperimentData data_;
  LayeredModel global_;
  std::vector<ClientState> clients_;
  IsolationAudit audit_;
  int round_ = 0;
  std::size_t threads_ = 1;
};

struct ExperimentResult {
  std::vector<RoundLog> logs;
  LayeredModel global;
  std::vector<ClientState> clients;
  IsolationAudit audit;
  EvalReport final_eval;
};

using RoundCallback = std::function<void(const RoundLog&)>;

ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const RoundCallback& on_round = {});
ExperimentResult run_experiment(const ExperimentConfig& cfg, ExperimentData data,
                                const RoundCallback& on_round = {});

// Worker count from FLPLAS_THREADS, at least 1.
std::size_t thread_count_from_env();

}  // namespace flplas
