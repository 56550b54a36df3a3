#include "flplas/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "flplas/random.hpp"

namespace flplas {

namespace {

constexpr std::size_t kEvalChunk = 256;

// Runs blocks [first, last) of `model` over `inputs` chunk by chunk and
// stacks the outputs.
Tensor run_chunked(const LayeredModel& model, const Tensor& inputs,
                   std::size_t first, std::size_t last) {
  const std::size_t n = inputs.dim(0);
  std::vector<double> out;
  Shape out_shape;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const std::size_t end = std::min(n, start + kEvalChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor part = forward_blocks(model, gather_rows(inputs, idx), first, last);
    if (out_shape.empty()) {
      out_shape = part.shape();
      out.reserve(n * (part.size() / part.dim(0)));
    }
    out.insert(out.end(), part.values().begin(), part.values().end());
  }
  out_shape[0] = n;
  return Tensor(out_shape, std::move(out));
}

std::size_t num_blocks(const LayeredModel& model) { return plan_blocks(model).size(); }

struct Scores {
  double accuracy = 0.0;
  double loss = 0.0;
};

Scores score_logits(const Tensor& logits, std::span<const int> labels, bool with_loss) {
  const auto pred = argmax_rows(logits);
  Scores s;
  s.accuracy = label_match_rate(pred, labels);
  if (with_loss) s.loss = softmax_cross_entropy(logits, labels);
  return s;
}

}  // namespace

std::vector<int> predict(const LayeredModel& model, const Dataset& ds) {
  if (ds.empty()) return {};
  return argmax_rows(run_chunked(model, ds.images, 0, num_blocks(model)));
}

double label_match_rate(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("prediction count does not match label count");
  }
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

EvalReport evaluate(const LayeredModel& model, const Dataset& clean_test,
                    const Dataset& backdoor_test) {
  if (clean_test.empty()) throw std::invalid_argument("evaluate: empty clean test set");
  const std::size_t nb = num_blocks(model);
  EvalReport r;
  const auto clean = score_logits(run_chunked(model, clean_test.images, 0, nb),
                                  clean_test.labels, true);
  r.ma = clean.accuracy;
  r.loss = clean.loss;
  if (!backdoor_test.empty()) {
    r.ba = score_logits(run_chunked(model, backdoor_test.images, 0, nb),
                        backdoor_test.labels, false)
               .accuracy;
  }
  return r;
}

EvalReport evaluate_partitioned(const LayeredModel& global, std::size_t cut_layer,
                                std::span<const LocalHead> heads,
                                const Dataset& clean_test,
                                const Dataset& backdoor_test) {
  if (clean_test.empty()) throw std::invalid_argument("evaluate: empty clean test set");
  if (heads.empty()) throw std::invalid_argument("evaluate: no per-client classifiers");
  const std::size_t num_layers = global.num_layers();
  if (cut_layer == 0 || cut_layer > num_layers) {
    throw std::invalid_argument("evaluate: cut_layer out of range");
  }
  for (std::size_t l = 0; l < cut_layer; ++l) {
    if (global.layers[l].withheld()) {
      throw std::invalid_argument("evaluate: feature layer " + std::to_string(l) +
                                  " missing from the global model");
    }
  }
  // Blocks entirely below the cut are identical for every client.
  const std::size_t shared = cut_layer / 2;
  const std::size_t nb = num_blocks(global);

  LayeredModel work = global;
  for (std::size_t l = cut_layer; l < num_layers; ++l) {
    work.layers[l].param = Tensor(work.layers[l].shape, 0.0);
  }
  const Tensor clean_prefix = run_chunked(work, clean_test.images, 0, shared);
  Tensor bd_prefix;
  if (!backdoor_test.empty()) bd_prefix = run_chunked(work, backdoor_test.images, 0, shared);

  EvalReport r;
  std::vector<double> atk;
  double loss_sum = 0.0;
  std::vector<const LocalHead*> ordered;
  for (const auto& h : heads) ordered.push_back(&h);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto* a, const auto* b) { return a->client_id < b->client_id; });
  for (const auto* h : ordered) {
    if (h->layers.size() != num_layers - cut_layer) {
      throw std::invalid_argument("evaluate: client " + std::to_string(h->client_id) +
                                  " has the wrong number of classifier layers");
    }
    for (std::size_t l = cut_layer; l < num_layers; ++l) {
      const Tensor& t = h->layers[l - cut_layer];
      if (t.shape() != work.layers[l].shape) {
        throw std::invalid_argument("evaluate: client " + std::to_string(h->client_id) +
                                    " layer " + std::to_string(l) + " has shape " +
                                    shape_to_string(t.shape()));
      }
      work.layers[l].param = t;
    }
    const auto clean = score_logits(forward_blocks(work, clean_prefix, shared, nb),
                                    clean_test.labels, !h->malicious);
    double ba = 0.0;
    if (!backdoor_test.empty()) {
      ba = score_logits(forward_blocks(work, bd_prefix, shared, nb),
                        backdoor_test.labels, false)
               .accuracy;
    }
    if (h->malicious) {
      atk.push_back(ba);
    } else {
      r.per_client_ma.push_back(clean.accuracy);
      r.per_client_ba.push_back(ba);
      loss_sum += clean.loss;
    }
  }
  const auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  r.ma = mean(r.per_client_ma);
  r.ba = mean(r.per_client_ba);
  if (!r.per_client_ma.empty()) {
    r.loss = loss_sum / static_cast<double>(r.per_client_ma.size());
  }
  if (!atk.empty()) r.ba_atk = mean(atk);
  return r;
}

LayeredModel model_surgery(const LayeredModel& fe_source,
                           const LayeredModel& cls_source, std::size_t cut_layer) {
  require_congruent(fe_source, cls_source, "model_surgery");
  if (cut_layer > fe_source.num_layers()) {
    throw std::invalid_argument("model_surgery: cut_layer out of range");
  }
  LayeredModel out = fe_source;
  for (std::size_t l = cut_layer; l < out.num_layers(); ++l) {
    out.layers[l] = cls_source.layers[l];
  }
  return out;
}

namespace {

LayeredModel train_central(const LayeredModel& init, const Dataset& train,
                           const SurgeryConfig& cfg) {
  LayeredModel model = init;
  LayeredModel velocity = init.filled_like(0.0);
  std::vector<std::size_t> order(train.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_stream({cfg.seed, stream::kShuffle, e});
    std::shuffle(order.begin(), order.end(), rng);
    const double loss = train_epoch(model, velocity, train.images, train.labels,
                                    order, cfg.training, static_cast<int>(e));
    if (!std::isfinite(loss)) {
      throw std::runtime_error("surgery: training diverged in epoch " + std::to_string(e));
    }
  }
  return model;
}

}  // namespace

SurgeryTable surgery_experiment(const Dataset& train, const Dataset& clean_test,
                                const AttackSpec& attack, const SurgeryConfig& cfg) {
  if (attack.kind == AttackKind::kNone) {
    throw std::invalid_argument("surgery: an attack is required");
  }
  train.validate();
  const LayeredModel init =
      build_arch(cfg.arch_id, train.num_classes, train.sample_shape(), cfg.seed);
  if (cfg.cut_layer == 0 || cfg.cut_layer >= init.num_layers()) {
    throw std::invalid_argument("surgery: cut_layer must split the model");
  }
  const auto poisoned = poison_partition(train, attack);
  if (poisoned.poisoned.empty()) {
    throw std::invalid_argument("surgery: attack poisoned no training samples");
  }
  SurgeryTable table;
  table.clean_model = train_central(init, train, cfg);
  table.backdoor_model = train_central(cfg.backdoor_from_clean ? table.clean_model : init,
                                       poisoned.data, cfg);
  const Dataset backdoor_test = make_backdoor_testset(clean_test, attack);

  const std::pair<const char*, const LayeredModel*> sources[] = {
      {"clean", &table.clean_model}, {"backdoor", &table.backdoor_model}};
  for (const auto& [fe_name, fe] : sources) {
    for (const auto& [cls_name, cls] : sources) {
      const auto r = evaluate(model_surgery(*fe, *cls, cfg.cut_layer), clean_test,
                              backdoor_test);
      table.cells.push_back({fe_name, cls_name, r.ma, r.ba});
    }
  }
  return table;
}

std::string format_surgery_table(const SurgeryTable& table) {
  std::ostringstream os;
  os << "                    clean classifier   backdoor classifier\n";
  for (std::size_t row = 0; row < 2; ++row) {
    const auto& a = table.cells.at(2 * row);
    const auto& b = table.cells.at(2 * row + 1);
    char line[128];
    std::snprintf(line, sizeof line, "%-8s FE    MA %.3f BA %.3f   MA %.3f BA %.3f\n",
                  a.feature_extractor.c_str(), a.ma, a.ba, b.ma, b.ba);
    os << line;
  }
  return os.str();
}

}  // namespace flplas
