#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flplas/attacks.hpp"
#include "flplas/dataset.hpp"
#include "flplas/model.hpp"
#include "flplas/nn.hpp"

namespace flplas {

struct EvalReport {
  double ma = 0.0;
  double ba = 0.0;
  std::optional<double> ba_atk;
  std::vector<double> per_client_ma;  // benign clients, ascending id
  std::vector<double> per_client_ba;
  double loss = 0.0;                  // mean cross-entropy on the clean test set
};

// Predicted class per sample, computed in fixed-size chunks.
std::vector<int> predict(const LayeredModel& model, const Dataset& ds);

// Fraction of samples whose prediction equals the stored label. On a
// backdoor test set the stored label is the attack target, so this is BA.
// An empty set scores 0.
double label_match_rate(std::span<const int> predictions, std::span<const int> labels);

// Single global model.
EvalReport evaluate(const LayeredModel& model, const Dataset& clean_test,
                    const Dataset& backdoor_test);

// One evaluated party of a partial-sharing run: its own layers from
// cut_layer on.
struct LocalHead {
  int client_id = 0;
  bool malicious = false;
  std::vector<Tensor> layers;  // layers [cut_layer, num_layers)
};

// Each client's model is the shared feature layers of `global` plus its own
// head. MA/BA are means over benign heads, ba_atk over malicious heads.
// The network prefix that is common to all clients is evaluated once.
EvalReport evaluate_partitioned(const LayeredModel& global, std::size_t cut_layer,
                                std::span<const LocalHead> heads,
                                const Dataset& clean_test,
                                const Dataset& backdoor_test);

// Layers below cut_layer from fe_source, the rest from cls_source.
LayeredModel model_surgery(const LayeredModel& fe_source,
                           const LayeredModel& cls_source, std::size_t cut_layer);

struct SurgeryConfig {
  std::string arch_id = "lenet-s";
  std::size_t cut_layer = 4;
  std::size_t epochs = 3;
  // The poisoned model continues from the trained clean model instead of
  // starting from the shared initial weights.
  bool backdoor_from_clean = true;
  TrainingConfig training;
  std::uint64_t seed = 0;
};

struct SurgeryCell {
  std::string feature_extractor;  // "clean" or "backdoor"
  std::string classifier;
  double ma = 0.0;
  double ba = 0.0;
};

struct SurgeryTable {
  std::vector<SurgeryCell> cells;  // (clean,clean) (clean,bd) (bd,clean) (bd,bd)
  LayeredModel clean_model;
  LayeredModel backdoor_model;
};

// Trains a clean and a poisoned model centrally with the same batch order,
// then evaluates all four FE x classifier pairs.
SurgeryTable surgery_experiment(const Dataset& train, const Dataset& clean_test,
                                const AttackSpec& attack, const SurgeryConfig& cfg);

std::string format_surgery_table(const SurgeryTable& table);

}  // namespace flplas
