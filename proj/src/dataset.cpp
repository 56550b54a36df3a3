#include "flplas/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <unordered_map>

#include "flplas/attacks.hpp"
#include "flplas/random.hpp"

namespace flplas {

Shape Dataset::sample_shape() const {
  if (images.rank() < 2) return {};
  return Shape(images.shape().begin() + 1, images.shape().end());
}

void Dataset::validate() const {
  if (images.rank() < 2 && !labels.empty()) {
    throw std::invalid_argument(name + ": images need a sample axis");
  }
  if (!labels.empty() && images.dim(0) != labels.size()) {
    throw std::invalid_argument(name + ": " + std::to_string(images.dim(0)) +
                                " images but " + std::to_string(labels.size()) +
                                " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw std::invalid_argument(name + ": label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(num_classes) +
                                  ")");
    }
  }
  for (const auto& g : rare_groups) {
    for (auto m : g.members) {
      if (m >= labels.size()) {
        throw std::invalid_argument(name + ": rare-group member out of range");
      }
    }
  }
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.name = ds.name;
  out.num_classes = ds.num_classes;
  if (indices.empty()) return out;
  out.images = gather_rows(ds.images, indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(ds.labels.at(i));
  if (!ds.rare_groups.empty()) {
    std::unordered_map<std::size_t, std::size_t> position;
    for (std::size_t k = 0; k < indices.size(); ++k) position.emplace(indices[k], k);
    for (const auto& g : ds.rare_groups) {
      RareGroup ng{g.base_label, g.rotation_degrees, {}};
      for (auto m : g.members) {
        if (auto it = position.find(m); it != position.end()) {
          ng.members.push_back(it->second);
        }
      }
      std::sort(ng.members.begin(), ng.members.end());
      if (!ng.members.empty()) out.rare_groups.push_back(std::move(ng));
    }
  }
  return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.sample_shape() != b.sample_shape() || a.num_classes != b.num_classes) {
    throw std::invalid_argument("concat: datasets are not compatible");
  }
  Dataset out;
  out.name = a.name;
  out.num_classes = a.num_classes;
  std::vector<double> data(a.images.values().begin(), a.images.values().end());
  data.insert(data.end(), b.images.values().begin(), b.images.values().end());
  Shape shape = a.images.shape();
  shape[0] = a.size() + b.size();
  out.images = Tensor(std::move(shape), std::move(data));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.rare_groups = a.rare_groups;
  for (auto g : b.rare_groups) {
    for (auto& m : g.members) m += a.size();
    out.rare_groups.push_back(std::move(g));
  }
  return out;
}

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) {
    throw IdxError(IdxError::Code::kTruncated, path + ": truncated IDX header");
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
         (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                              static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b.data(), 4);
}

std::ifstream open_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Code::kOpen, "cannot open IDX file " + path);
  return in;
}

void expect_magic(std::uint32_t got, std::uint32_t want, const std::string& path) {
  if (got != want) {
    char buf[96];
    std::snprintf(buf, sizeof buf, ": wrong magic 0x%08X (expected 0x%08X)", got,
                  want);
    throw IdxError(IdxError::Code::kWrongMagic, path + buf);
  }
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t num_classes) {
  auto img = open_idx(images_path);
  expect_magic(read_be32(img, images_path), kIdxImageMagic, images_path);
  const std::uint32_t n = read_be32(img, images_path);
  const std::uint32_t rows = read_be32(img, images_path);
  const std::uint32_t cols = read_be32(img, images_path);

  auto lab = open_idx(labels_path);
  expect_magic(read_be32(lab, labels_path), kIdxLabelMagic, labels_path);
  const std::uint32_t nl = read_be32(lab, labels_path);
  if (nl != n) {
    throw IdxError(IdxError::Code::kCountMismatch,
                   "IDX count mismatch: " + std::to_string(n) + " images in " +
                       images_path + " but " + std::to_string(nl) +
                       " labels in " + labels_path);
  }
  if (n == 0 || rows == 0 || cols == 0) {
    throw IdxError(IdxError::Code::kTruncated, images_path + ": empty IDX file");
  }

  const std::size_t per = std::size_t{rows} * cols;
  std::vector<unsigned char> pixels(std::size_t{n} * per);
  img.read(reinterpret_cast<char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
  if (static_cast<std::size_t>(img.gcount()) != pixels.size()) {
    throw IdxError(IdxError::Code::kTruncated,
                   images_path + ": truncated pixel data (expected " +
                       std::to_string(pixels.size()) + " bytes, got " +
                       std::to_string(img.gcount()) + ")");
  }
  std::vector<unsigned char> raw_labels(n);
  lab.read(reinterpret_cast<char*>(raw_labels.data()), n);
  if (static_cast<std::size_t>(lab.gcount()) != raw_labels.size()) {
    throw IdxError(IdxError::Code::kTruncated,
                   labels_path + ": truncated label data");
  }

  Dataset ds;
  ds.name = images_path;
  ds.num_classes = num_classes;
  std::vector<double> data(pixels.size());
  std::transform(pixels.begin(), pixels.end(), data.begin(),
                 [](unsigned char p) { return p / 255.0; });
  ds.images = Tensor(Shape{n, 1, rows, cols}, std::move(data));
  ds.labels.reserve(n);
  for (auto y : raw_labels) {
    if (y >= num_classes) {
      throw IdxError(IdxError::Code::kBadLabel,
                     labels_path + ": label " + std::to_string(y) +
                         " outside [0, " + std::to_string(num_classes) + ")");
    }
    ds.labels.push_back(y);
  }
  return ds;
}

void write_idx(const std::string& images_path, const std::string& labels_path,
               const Dataset& ds) {
  ds.validate();
  const Shape s = ds.sample_shape();
  if (s.size() < 2 || shape_size(s) != s[s.size() - 2] * s[s.size() - 1]) {
    throw std::invalid_argument("write_idx: only single-channel images");
  }
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw std::runtime_error("write_idx: cannot create output");
  write_be32(img, kIdxImageMagic);
  write_be32(img, static_cast<std::uint32_t>(ds.size()));
  write_be32(img, static_cast<std::uint32_t>(s[s.size() - 2]));
  write_be32(img, static_cast<std::uint32_t>(s[s.size() - 1]));
  for (double v : ds.images.values()) {
    const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
    img.put(static_cast<char>(static_cast<unsigned char>(q)));
  }
  write_be32(lab, kIdxLabelMagic);
  write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lab.put(static_cast<char>(static_cast<unsigned char>(y)));
}

Dataset synth_generate(std::size_t num_classes, std::size_t samples_per_class,
                       std::size_t image_side, std::uint64_t seed) {
  if (num_classes == 0 || samples_per_class == 0 || image_side == 0) {
    throw std::invalid_argument("synth_generate: arguments must be positive");
  }
  auto rng = make_stream({seed, stream::kSynth, num_classes, image_side});
  std::normal_distribution<double> jitter(0.0, 0.35);
  std::normal_distribution<double> noise(0.0, 0.1);
  const double side = static_cast<double>(image_side);
  const double mid = (side - 1.0) / 2.0;
  const double radius = side / 3.0;
  const double sigma = std::max(0.8, side / 7.0);

  const std::size_t n = num_classes * samples_per_class;
  Dataset ds;
  ds.name = "synthetic";
  ds.num_classes = num_classes;
  std::vector<double> data(n * image_side * image_side);
  ds.labels.resize(n);
  std::size_t s = 0;
  for (std::size_t k = 0; k < samples_per_class; ++k) {
    for (std::size_t c = 0; c < num_classes; ++c, ++s) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) /
                           static_cast<double>(num_classes);
      const double cy = mid - radius * std::cos(angle) + jitter(rng);
      const double cx = mid + radius * std::sin(angle) + jitter(rng);
      double* img = data.data() + s * image_side * image_side;
      for (std::size_t r = 0; r < image_side; ++r) {
        for (std::size_t q = 0; q < image_side; ++q) {
          const double dy = static_cast<double>(r) - cy;
          const double dx = static_cast<double>(q) - cx;
          const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
          img[r * image_side + q] = std::clamp(v + noise(rng), 0.0, 1.0);
        }
      }
      ds.labels[s] = static_cast<int>(c);
    }
  }
  ds.images = Tensor(Shape{n, 1, image_side, image_side}, std::move(data));
  return ds;
}

Tensor rotate_image(const Tensor& image, double degrees) {
  const Shape& s = image.shape();
  if (s.size() < 2) throw std::invalid_argument("rotate_image: need H x W");
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  const std::size_t channels = image.size() / (h * w);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  Tensor out(s);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = image.data() + c * h * w;
    double* dst = out.data() + c * h * w;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t q = 0; q < w; ++q) {
        // Inverse map the destination pixel into the source image.
        const double y = static_cast<double>(r) - cy;
        const double x = static_cast<double>(q) - cx;
        const double sy = cs * y - sn * x + cy;
        const double sx = sn * y + cs * x + cx;
        const double fy = std::floor(sy), fx = std::floor(sx);
        double acc = 0.0;
        for (int dy = 0; dy <= 1; ++dy) {
          for (int dx = 0; dx <= 1; ++dx) {
            const double py = fy + dy, px = fx + dx;
            if (py < 0 || px < 0 || py > static_cast<double>(h - 1) ||
                px > static_cast<double>(w - 1)) {
              continue;
            }
            const double wy = dy ? sy - fy : 1.0 - (sy - fy);
            const double wx = dx ? sx - fx : 1.0 - (sx - fx);
            acc += wy * wx *
                   src[static_cast<std::size_t>(py) * w + static_cast<std::size_t>(px)];
          }
        }
        dst[r * w + q] = std::clamp(acc, 0.0, 1.0);
      }
    }
  }
  return out;
}

Dataset inject_rotated(const Dataset& ds, int base_label,
                       double rotation_degrees, std::size_t count,
                       std::uint64_t seed) {
  if (count == 0) return ds;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] == base_label) pool.push_back(i);
  }
  if (pool.empty()) {
    throw std::invalid_argument("inject_rotated: no samples with label " +
                                std::to_string(base_label));
  }
  auto rng = make_stream({seed, stream::kInject,
                          static_cast<std::uint64_t>(base_label)});
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<std::size_t> chosen(count);
  for (auto& c : chosen) c = pool[pick(rng)];

  Dataset extra = subset(ds, chosen);
  extra.rare_groups.clear();
  const Shape sample = ds.sample_shape();
  const std::size_t per = shape_size(sample);
  for (std::size_t k = 0; k < count; ++k) {
    Tensor img(sample, std::vector<double>(extra.images.data() + k * per,
                                           extra.images.data() + (k + 1) * per));
    const Tensor rotated = rotate_image(img, rotation_degrees);
    std::copy(rotated.data(), rotated.data() + per, extra.images.data() + k * per);
  }
  RareGroup group{base_label, rotation_degrees, {}};
  for (std::size_t k = 0; k < count; ++k) group.members.push_back(ds.size() + k);
  Dataset out = concat(ds, extra);
  out.rare_groups.push_back(std::move(group));
  return out;
}

Partition dirichlet_partition(const Dataset& ds, const PartitionSpec& spec) {
  if (ds.empty()) throw std::invalid_argument("dirichlet_partition: empty dataset");
  if (spec.num_clients == 0) {
    throw std::invalid_argument("dirichlet_partition: num_clients must be >= 1");
  }
  if (!(spec.dirichlet_alpha > 0.0)) {
    throw std::invalid_argument("dirichlet_partition: alpha must be > 0");
  }
  const std::size_t m = spec.num_clients;
  if (m == 1) {
    Partition p;
    p.assignments.emplace_back(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) p.assignments[0][i] = i;
    return p;
  }
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    by_class.at(static_cast<std::size_t>(ds.labels[i])).push_back(i);
  }
  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    auto rng = make_stream({spec.seed, stream::kPartition,
                            static_cast<std::uint64_t>(attempt)});
    std::gamma_distribution<double> gamma(spec.dirichlet_alpha, 1.0);
    Partition p;
    p.assignments.resize(m);
    for (const auto& members : by_class) {
      if (members.empty()) continue;
      std::vector<double> share(m);
      double total = 0.0;
      do {
        total = 0.0;
        for (auto& v : share) total += (v = gamma(rng));
      } while (!(total > 0.0));
      for (auto& v : share) v /= total;
      std::discrete_distribution<std::size_t> pick(share.begin(), share.end());
      for (auto i : members) p.assignments[pick(rng)].push_back(i);
    }
    const bool all_nonempty =
        std::none_of(p.assignments.begin(), p.assignments.end(),
                     [](const auto& a) { return a.empty(); });
    if (all_nonempty) {
      for (auto& a : p.assignments) std::sort(a.begin(), a.end());
      return p;
    }
  }
  throw std::runtime_error("dirichlet_partition: a client stayed empty after " +
                           std::to_string(kMaxAttempts) + " draws");
}

Dataset make_backdoor_testset(const Dataset& clean_test, const AttackSpec& attack) {
  clean_test.validate();
  Dataset out;
  out.name = clean_test.name + ":backdoor";
  out.num_classes = clean_test.num_classes;
  if (attack.kind == AttackKind::kNone) return out;
  attack.validate(clean_test.num_classes);
  if (attack.kind == AttackKind::kTrigger) {
    const Shape s = clean_test.sample_shape();
    (void)trigger_pixels(attack.trigger, s.at(s.size() - 2), s.at(s.size() - 1));
  }
  const auto keep = eligible_indices(clean_test, attack);
  if (keep.empty()) return out;
  out = subset(clean_test, keep);
  out.name = clean_test.name + ":backdoor";
  const Shape s = out.sample_shape();
  const std::size_t per = shape_size(s);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (attack.kind == AttackKind::kTrigger) {
      apply_trigger_inplace(out.images.data() + i * per, s, attack.trigger);
    }
    out.labels[i] = attack.target_label;
  }
  return out;
}

}  // namespace flplas
