#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flplas/tensor.hpp"

namespace flplas {

struct AttackSpec;

// Rare subpopulation injected at build time: rotated copies of one class.
struct RareGroup {
  int base_label = 0;
  double rotation_degrees = 0.0;
  std::vector<std::size_t> members;

  friend bool operator==(const RareGroup&, const RareGroup&) = default;
};

// Images are N x C x H x W with values in [0, 1].
struct Dataset {
  std::string name;
  Tensor images;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::vector<RareGroup> rare_groups;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  Shape sample_shape() const;
  // Throws std::invalid_argument if sizes or labels are inconsistent.
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Samples at `indices` (in that order); rare-group membership is remapped.
Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);
// Concatenation of two datasets with equal sample shape and class count.
Dataset concat(const Dataset& a, const Dataset& b);

class IdxError : public std::runtime_error {
 public:
  enum class Code { kOpen, kWrongMagic, kTruncated, kCountMismatch, kBadLabel };
  IdxError(Code code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Big-endian IDX image/label pair (ubyte images, magic 0x803 / 0x801).
// Pixels are divided by 255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t num_classes = 10);
// Writes `ds` as an IDX pair, quantizing pixels to round(255 * v).
void write_idx(const std::string& images_path, const std::string& labels_path,
               const Dataset& ds);

// Each class is a Gaussian blob at its own position on a circle, with a
// jittered centre and additive pixel noise.
Dataset synth_generate(std::size_t num_classes, std::size_t samples_per_class,
                       std::size_t image_side, std::uint64_t seed);

// Appends `count` rotated copies of randomly chosen `base_label` samples and
// records them as a RareGroup. Returns the input unchanged when count is 0.
Dataset inject_rotated(const Dataset& ds, int base_label,
                       double rotation_degrees, std::size_t count,
                       std::uint64_t seed);
// Bilinear rotation about the image centre, zero fill outside.
Tensor rotate_image(const Tensor& image, double degrees);

struct PartitionSpec {
  std::size_t num_clients = 1;
  double dirichlet_alpha = 0.2;
  std::uint64_t seed = 0;
};

struct Partition {
  std::vector<std::vector<std::size_t>> assignments;
};

// Per class, draws p ~ Dir(alpha * 1_M) and assigns each of the class's
// samples to a client by a categorical draw from p. The whole draw is
// repeated (at most 100 times) until no client is empty.
Partition dirichlet_partition(const Dataset& ds, const PartitionSpec& spec);

// Clean test set with the attack's input transform applied to every eligible
// sample and labels set to the target. Samples whose label already equals
// the target are excluded.
Dataset make_backdoor_testset(const Dataset& clean_test, const AttackSpec& attack);

}  // namespace flplas
