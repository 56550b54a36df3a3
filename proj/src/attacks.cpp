#include "flplas/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "flplas/random.hpp"

namespace flplas {

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::kNone:
      return "none";
    case AttackKind::kTrigger:
      return "trigger";
    case AttackKind::kSemantic:
      return "semantic";
    case AttackKind::kEdgeCase:
      return "edgecase";
  }
  return "none";
}

std::optional<AttackKind> parse_attack_kind(std::string_view s) {
  if (s == "none") return AttackKind::kNone;
  if (s == "trigger") return AttackKind::kTrigger;
  if (s == "semantic") return AttackKind::kSemantic;
  if (s == "edgecase" || s == "edge-case") return AttackKind::kEdgeCase;
  return std::nullopt;
}

std::optional<Corner> parse_corner(std::string_view s) {
  if (s == "top-right") return Corner::kTopRight;
  if (s == "top-left") return Corner::kTopLeft;
  if (s == "bottom-right") return Corner::kBottomRight;
  if (s == "bottom-left") return Corner::kBottomLeft;
  return std::nullopt;
}

std::string_view to_string(Corner corner) {
  switch (corner) {
    case Corner::kTopRight:
      return "top-right";
    case Corner::kTopLeft:
      return "top-left";
    case Corner::kBottomRight:
      return "bottom-right";
    case Corner::kBottomLeft:
      return "bottom-left";
  }
  return "top-right";
}

std::optional<TriggerPattern> parse_trigger_pattern(std::string_view s) {
  if (s == "box") return TriggerPattern::kBox;
  if (s == "plus") return TriggerPattern::kPlus;
  return std::nullopt;
}

std::string_view to_string(TriggerPattern pattern) {
  return pattern == TriggerPattern::kPlus ? "plus" : "box";
}

void AttackSpec::validate(std::size_t num_classes) const {
  if (!(poison_fraction >= 0.0 && poison_fraction <= 1.0)) {
    throw std::invalid_argument("poison_fraction must be in [0, 1]");
  }
  if (kind == AttackKind::kNone) return;
  const auto valid = [&](int label) {
    return label >= 0 && static_cast<std::size_t>(label) < num_classes;
  };
  if (!valid(target_label)) {
    throw std::invalid_argument("target_label " + std::to_string(target_label) +
                                " is not a valid class");
  }
  if (kind == AttackKind::kSemantic) {
    if (!valid(source_label)) {
      throw std::invalid_argument("source_label is not a valid class");
    }
    if (source_label == target_label) {
      throw std::invalid_argument("source_label must differ from target_label");
    }
  }
  if (kind == AttackKind::kTrigger) {
    if (trigger.height == 0 || trigger.width == 0) {
      throw std::invalid_argument("trigger height and width must be positive");
    }
  }
  if (kind == AttackKind::kEdgeCase && !valid(edge.base_label)) {
    throw std::invalid_argument("edge base_label is not a valid class");
  }
}

std::vector<std::pair<std::size_t, std::size_t>> trigger_pixels(
    const TriggerGeometry& g, std::size_t h, std::size_t w) {
  if (g.height == 0 || g.width == 0 || g.height > h || g.width > w) {
    throw std::invalid_argument("trigger " + std::to_string(g.height) + "x" +
                                std::to_string(g.width) +
                                " does not fit a " + std::to_string(h) + "x" +
                                std::to_string(w) + " image");
  }
  const bool top = g.corner == Corner::kTopRight || g.corner == Corner::kTopLeft;
  const bool right =
      g.corner == Corner::kTopRight || g.corner == Corner::kBottomRight;
  const std::size_t r0 = top ? 0 : h - g.height;
  const std::size_t c0 = right ? w - g.width : 0;
  std::vector<std::pair<std::size_t, std::size_t>> px;
  for (std::size_t r = 0; r < g.height; ++r) {
    for (std::size_t c = 0; c < g.width; ++c) {
      if (g.pattern == TriggerPattern::kPlus && r != g.height / 2 &&
          c != g.width / 2) {
        continue;
      }
      px.emplace_back(r0 + r, c0 + c);
    }
  }
  return px;
}

void apply_trigger_inplace(double* sample, const Shape& sample_shape,
                           const TriggerGeometry& geometry) {
  if (sample_shape.size() < 2) {
    throw std::invalid_argument("trigger needs an image with height and width");
  }
  const std::size_t h = sample_shape[sample_shape.size() - 2];
  const std::size_t w = sample_shape[sample_shape.size() - 1];
  const std::size_t channels = shape_size(sample_shape) / (h * w);
  const auto px = trigger_pixels(geometry, h, w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (const auto& [r, col] : px) sample[(c * h + r) * w + col] = geometry.intensity;
  }
}

Tensor apply_trigger(const Tensor& image, const TriggerGeometry& geometry) {
  Tensor out = image;
  apply_trigger_inplace(out.data(), out.shape(), geometry);
  return out;
}

std::vector<std::size_t> select_edgecase(const Dataset& ds,
                                         const EdgeSelector& selector) {
  std::vector<std::size_t> out;
  for (const auto& g : ds.rare_groups) {
    if (g.base_label == selector.base_label &&
        std::abs(g.rotation_degrees - selector.rotation_degrees) < 1e-9) {
      out.insert(out.end(), g.members.begin(), g.members.end());
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::size_t> eligible_indices(const Dataset& ds,
                                          const AttackSpec& spec) {
  std::vector<std::size_t> out;
  switch (spec.kind) {
    case AttackKind::kNone:
      break;
    case AttackKind::kTrigger:
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] != spec.target_label) out.push_back(i);
      }
      break;
    case AttackKind::kSemantic:
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] == spec.source_label) out.push_back(i);
      }
      break;
    case AttackKind::kEdgeCase:
      for (auto i : select_edgecase(ds, spec.edge)) {
        if (ds.labels[i] != spec.target_label) out.push_back(i);
      }
      break;
  }
  return out;
}

PoisonResult poison_partition(const Dataset& local, const AttackSpec& spec) {
  if (spec.kind == AttackKind::kNone) {
    throw std::invalid_argument("poison_partition: attack kind is none");
  }
  spec.validate(local.num_classes);
  PoisonResult result{local, {}, false, {}};
  auto eligible = eligible_indices(local, spec);
  if (eligible.empty()) {
    if (spec.kind != AttackKind::kTrigger) {
      result.warning = true;
      result.message = std::string("no eligible samples for ") +
                       std::string(to_string(spec.kind)) +
                       " attack; partition left clean";
    }
    return result;
  }
  const auto count = static_cast<std::size_t>(
      std::floor(spec.poison_fraction * static_cast<double>(eligible.size()) + 1e-9));
  auto rng = make_stream({spec.seed, stream::kPoison});
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(count);
  std::sort(eligible.begin(), eligible.end());

  const Shape sample_shape = local.sample_shape();
  const std::size_t per = shape_size(sample_shape);
  for (auto i : eligible) {
    if (spec.kind == AttackKind::kTrigger) {
      apply_trigger_inplace(result.data.images.data() + i * per, sample_shape,
                            spec.trigger);
    }
    result.data.labels[i] = spec.target_label;
  }
  result.poisoned = std::move(eligible);
  return result;
}

}  // namespace flplas
