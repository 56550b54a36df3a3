#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flplas/dataset.hpp"
#include "flplas/tensor.hpp"

namespace flplas {

enum class AttackKind { kNone, kTrigger, kSemantic, kEdgeCase };
enum class Corner { kTopRight, kTopLeft, kBottomRight, kBottomLeft };
enum class TriggerPattern { kBox, kPlus };

std::string_view to_string(AttackKind kind);
std::optional<AttackKind> parse_attack_kind(std::string_view s);
std::optional<Corner> parse_corner(std::string_view s);
std::optional<TriggerPattern> parse_trigger_pattern(std::string_view s);
std::string_view to_string(Corner corner);
std::string_view to_string(TriggerPattern pattern);

// Patch stamped into a corner of every channel. The plus pattern covers the
// middle row and middle column of the height x width box.
struct TriggerGeometry {
  Corner corner = Corner::kTopRight;
  std::size_t height = 2;
  std::size_t width = 2;
  double intensity = 1.0;
  TriggerPattern pattern = TriggerPattern::kBox;
};

struct EdgeSelector {
  int base_label = 7;
  double rotation_degrees = 90.0;
};

struct AttackSpec {
  AttackKind kind = AttackKind::kNone;
  int target_label = 0;
  double poison_fraction = 0.3;
  TriggerGeometry trigger;
  int source_label = 5;
  EdgeSelector edge;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument naming the offending field.
  void validate(std::size_t num_classes) const;
};

// (row, col) pixels covered by the trigger in an h x w image.
std::vector<std::pair<std::size_t, std::size_t>> trigger_pixels(
    const TriggerGeometry& geometry, std::size_t h, std::size_t w);

// `image` is C x H x W (or H x W). Throws if the patch does not fit.
Tensor apply_trigger(const Tensor& image, const TriggerGeometry& geometry);
// Same, on one sample stored contiguously inside a batch.
void apply_trigger_inplace(double* sample, const Shape& sample_shape,
                           const TriggerGeometry& geometry);

// Members of the rare group matching the selector, ascending.
std::vector<std::size_t> select_edgecase(const Dataset& ds,
                                         const EdgeSelector& selector);

// Samples the attack may poison: trigger -> label != target; semantic ->
// label == source; edge-case -> selected rare members with label != target.
std::vector<std::size_t> eligible_indices(const Dataset& ds,
                                          const AttackSpec& spec);

struct PoisonResult {
  Dataset data;
  std::vector<std::size_t> poisoned;  // ascending
  bool warning = false;
  std::string message;
};

// Replaces floor(poison_fraction * eligible) eligible samples (chosen by the
// spec's seed) with their poisoned version. Everything else is untouched.
PoisonResult poison_partition(const Dataset& local, const AttackSpec& spec);

}  // namespace flplas
