#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "flplas/aggregation.hpp"
#include "flplas/dataset.hpp"
#include "flplas/model.hpp"
#include "flplas/nn.hpp"

namespace flplas::testing {

inline std::string data_dir() { return FLPLAS_TEST_DATA_DIR; }
inline std::string mnist_dir() { return data_dir() + "/mnist"; }

struct DenseSpec {
  std::size_t in, out;
  std::vector<double> weight;  // out x in, row-major
  std::vector<double> bias;
};

inline LayeredModel dense_model(const std::vector<DenseSpec>& specs) {
  LayeredModel m;
  m.arch_id = "test-dense";
  m.input_shape = {specs.front().in};
  m.num_classes = specs.back().out;
  for (const auto& s : specs) {
    m.layers.push_back(
        Layer{LayerKind::kDense, {s.out, s.in}, Tensor(Shape{s.out, s.in}, s.weight)});
    m.layers.push_back(Layer{LayerKind::kBias, {s.out}, Tensor(Shape{s.out}, s.bias)});
  }
  return m;
}

// A one-weight model: dense 1x1 with the given weight and zero bias.
inline LayeredModel scalar_model(double w) {
  return dense_model({{1, 1, {w}, {0.0}}});
}

// A single 1 x d weight layer holding `w`; flatten() returns exactly `w`.
// Only usable where no forward pass is needed.
inline LayeredModel vector_model(const std::vector<double>& w) {
  LayeredModel m;
  m.arch_id = "test-vector";
  m.input_shape = {w.size()};
  m.num_classes = 1;
  m.layers.push_back(Layer{LayerKind::kDense, {1, w.size()}, Tensor(Shape{1, w.size()}, w)});
  return m;
}

inline ClientSubmission submission(int id, LayeredModel model, std::size_t n = 1) {
  return ClientSubmission{id, std::move(model), n};
}

// Random model congruent with `like`, values uniform in [-scale, scale].
inline LayeredModel random_like(const LayeredModel& like, std::mt19937_64& rng,
                                double scale = 1.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  LayeredModel m = like.filled_like(0.0);
  for (auto& l : m.layers) {
    for (auto& v : l.values().values()) v = d(rng);
  }
  return m;
}

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(shape);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

}  // namespace flplas::testing
