#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flplas/tensor.hpp"

namespace flplas {

enum class LayerKind { kDense, kConv2d, kBias };

std::string_view to_string(LayerKind kind);

// One parameter tensor of a model. A layer whose values are absent is
// "withheld": the holder knows its shape but owns no parameters for it. The
// FL-PLAS server uses this for every classifier layer.
struct Layer {
  LayerKind kind = LayerKind::kDense;
  Shape shape;
  std::optional<Tensor> param;

  bool withheld() const { return !param.has_value(); }
  // Throws std::logic_error when the layer is withheld.
  Tensor& values();
  const Tensor& values() const;

  friend bool operator==(const Layer&, const Layer&) = default;
};

// Ordered list of parameter layers. The layer index is the position in
// `layers`, so indices are contiguous from 0 by construction.
struct LayeredModel {
  std::string arch_id;
  Shape input_shape;
  std::size_t num_classes = 0;
  std::vector<Layer> layers;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t parameter_count() const;
  // Parameters in layers [first, last).
  std::size_t parameter_count(std::size_t first, std::size_t last) const;

  // Same architecture, every layer present and set to `value`.
  LayeredModel filled_like(double value) const;

  // Marks layers with index >= first as withheld, dropping their values.
  void withhold_from(std::size_t first);

  friend bool operator==(const LayeredModel&, const LayeredModel&) = default;
};

// Throws std::invalid_argument naming the first differing layer when the two
// models do not share arch_id and per-layer shapes.
void require_congruent(const LayeredModel& a, const LayeredModel& b,
                       std::string_view context);
bool congruent(const LayeredModel& a, const LayeredModel& b);

// Concatenates the values of layers [first, last) in layer order.
std::vector<double> flatten(const LayeredModel& model, std::size_t first,
                            std::size_t last);
std::vector<double> flatten(const LayeredModel& model);
// Inverse of flatten: writes `flat` into layers [first, last), un-withholding
// them as needed.
void unflatten(std::span<const double> flat, LayeredModel& model,
               std::size_t first, std::size_t last);
void unflatten(std::span<const double> flat, LayeredModel& model);

// Binary model files: magic "FLPM", format version, arch header, then each
// layer's kind, shape, presence flag and little-endian doubles.
void write_model(std::ostream& out, const LayeredModel& model);
LayeredModel read_model(std::istream& in);
void save_model(const std::string& path, const LayeredModel& model);
LayeredModel load_model(const std::string& path);

}  // namespace flplas
