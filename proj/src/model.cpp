#include "flplas/model.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace flplas {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kDense:
      return "dense";
    case LayerKind::kConv2d:
      return "conv2d";
    case LayerKind::kBias:
      return "bias";
  }
  return "unknown";
}

Tensor& Layer::values() {
  if (!param) throw std::logic_error("layer values are withheld");
  return *param;
}

const Tensor& Layer::values() const {
  if (!param) throw std::logic_error("layer values are withheld");
  return *param;
}

std::size_t LayeredModel::parameter_count() const {
  return parameter_count(0, layers.size());
}

std::size_t LayeredModel::parameter_count(std::size_t first,
                                          std::size_t last) const {
  std::size_t n = 0;
  for (std::size_t i = first; i < last; ++i) n += shape_size(layers.at(i).shape);
  return n;
}

LayeredModel LayeredModel::filled_like(double value) const {
  LayeredModel out;
  out.arch_id = arch_id;
  out.input_shape = input_shape;
  out.num_classes = num_classes;
  out.layers.reserve(layers.size());
  for (const auto& l : layers) {
    out.layers.push_back(Layer{l.kind, l.shape, Tensor(l.shape, value)});
  }
  return out;
}

void LayeredModel::withhold_from(std::size_t first) {
  for (std::size_t i = first; i < layers.size(); ++i) layers[i].param.reset();
}

bool congruent(const LayeredModel& a, const LayeredModel& b) {
  if (a.arch_id != b.arch_id || a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].kind != b.layers[i].kind ||
        a.layers[i].shape != b.layers[i].shape) {
      return false;
    }
  }
  return true;
}

void require_congruent(const LayeredModel& a, const LayeredModel& b,
                       std::string_view context) {
  const std::string where(context);
  if (a.arch_id != b.arch_id) {
    throw std::invalid_argument(where + ": architecture '" + a.arch_id +
                                "' vs '" + b.arch_id + "'");
  }
  if (a.layers.size() != b.layers.size()) {
    throw std::invalid_argument(where + ": layer count " +
                                std::to_string(a.layers.size()) + " vs " +
                                std::to_string(b.layers.size()));
  }
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].kind != b.layers[i].kind ||
        a.layers[i].shape != b.layers[i].shape) {
      throw std::invalid_argument(
          where + ": layer " + std::to_string(i) + " " +
          std::string(to_string(a.layers[i].kind)) +
          shape_to_string(a.layers[i].shape) + " vs " +
          std::string(to_string(b.layers[i].kind)) +
          shape_to_string(b.layers[i].shape));
    }
  }
}

std::vector<double> flatten(const LayeredModel& model, std::size_t first,
                            std::size_t last) {
  std::vector<double> flat;
  flat.reserve(model.parameter_count(first, last));
  for (std::size_t i = first; i < last; ++i) {
    const auto v = model.layers.at(i).values().values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return flat;
}

std::vector<double> flatten(const LayeredModel& model) {
  return flatten(model, 0, model.num_layers());
}

void unflatten(std::span<const double> flat, LayeredModel& model,
               std::size_t first, std::size_t last) {
  if (flat.size() != model.parameter_count(first, last)) {
    throw std::invalid_argument("unflatten: expected " +
                                std::to_string(model.parameter_count(first, last)) +
                                " values, got " + std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (std::size_t i = first; i < last; ++i) {
    auto& layer = model.layers[i];
    const std::size_t n = shape_size(layer.shape);
    std::vector<double> data(flat.begin() + offset, flat.begin() + offset + n);
    layer.param = Tensor(layer.shape, std::move(data));
    offset += n;
  }
}

void unflatten(std::span<const double> flat, LayeredModel& model) {
  unflatten(flat, model, 0, model.num_layers());
}

namespace {

constexpr char kMagic[4] = {'F', 'L', 'P', 'M'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little,
                "model files are little-endian");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("model file truncated");
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > 4096) throw std::runtime_error("model file: implausible string length");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("model file truncated");
  return s;
}

void put_shape(std::ostream& out, const Shape& shape) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put<std::uint64_t>(out, d);
}

Shape get_shape(std::istream& in) {
  const auto rank = get<std::uint32_t>(in);
  if (rank > 8) throw std::runtime_error("model file: implausible tensor rank");
  Shape shape(rank);
  for (auto& d : shape) d = get<std::uint64_t>(in);
  return shape;
}

}  // namespace

void write_model(std::ostream& out, const LayeredModel& model) {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put_string(out, model.arch_id);
  put_shape(out, model.input_shape);
  put<std::uint64_t>(out, model.num_classes);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& layer : model.layers) {
    put<std::uint8_t>(out, static_cast<std::uint8_t>(layer.kind));
    put_shape(out, layer.shape);
    put<std::uint8_t>(out, layer.withheld() ? 0 : 1);
    if (!layer.withheld()) {
      for (double v : layer.param->values()) put<double>(out, v);
    }
  }
}

LayeredModel read_model(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("not a model file (bad magic)");
  }
  if (get<std::uint32_t>(in) != kFormatVersion) {
    throw std::runtime_error("unsupported model file version");
  }
  LayeredModel model;
  model.arch_id = get_string(in);
  model.input_shape = get_shape(in);
  model.num_classes = get<std::uint64_t>(in);
  const auto n = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    Layer layer;
    const auto kind = get<std::uint8_t>(in);
    if (kind > static_cast<std::uint8_t>(LayerKind::kBias)) {
      throw std::runtime_error("model file: unknown layer kind");
    }
    layer.kind = static_cast<LayerKind>(kind);
    layer.shape = get_shape(in);
    if (get<std::uint8_t>(in) != 0) {
      std::vector<double> data(shape_size(layer.shape));
      for (auto& v : data) v = get<double>(in);
      layer.param = Tensor(layer.shape, std::move(data));
    }
    model.layers.push_back(std::move(layer));
  }
  return model;
}

void save_model(const std::string& path, const LayeredModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write model file: " + path);
  write_model(out, model);
}

LayeredModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file: " + path);
  return read_model(in);
}

}  // namespace flplas
