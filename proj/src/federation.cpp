#include "flplas/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <string_view>
#include <thread>

#include "flplas/random.hpp"

namespace flplas {

namespace {

constexpr double kCountEps = 1e-9;

std::uint64_t fingerprint(const std::vector<Tensor>& layers) {
  std::uint64_t h = 0;
  for (const auto& t : layers) {
    const std::string_view bytes(reinterpret_cast<const char*>(t.data()),
                                 t.size() * sizeof(double));
    h = h * 1099511628211ULL ^ hash_name(bytes);
  }
  return h;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
// is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(threads, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

LayeredModel pretrain(const LayeredModel& init, const Dataset& warmup,
                      std::size_t epochs, const TrainingConfig& training,
                      std::uint64_t seed) {
  LayeredModel model = init;
  LayeredModel velocity = init.filled_like(0.0);
  std::vector<std::size_t> order(warmup.size());
  for (std::size_t e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_stream({seed, stream::kShuffle, 0xFFFFu, e});
    std::shuffle(order.begin(), order.end(), rng);
    train_epoch(model, velocity, warmup.images, warmup.labels, order, training, 0);
  }
  return model;
}

std::vector<std::size_t> range(std::size_t first, std::size_t last) {
  std::vector<std::size_t> v(last - first);
  std::iota(v.begin(), v.end(), first);
  return v;
}

}  // namespace

std::size_t ExperimentConfig::malicious_count() const {
  return static_cast<std::size_t>(
      std::floor(malicious_fraction * static_cast<double>(num_clients) + kCountEps));
}

std::size_t ExperimentConfig::malicious_per_round() const {
  return static_cast<std::size_t>(
      std::llround(malicious_fraction * static_cast<double>(clients_per_round)));
}

void ExperimentConfig::validate() const {
  if (num_clients == 0) throw std::invalid_argument("num_clients must be >= 1");
  if (clients_per_round == 0 || clients_per_round > num_clients) {
    throw std::invalid_argument("clients_per_round must be in [1, num_clients]");
  }
  if (!(malicious_fraction >= 0.0 && malicious_fraction <= 1.0)) {
    throw std::invalid_argument("malicious_fraction must be in [0, 1]");
  }
  if (malicious_per_round() > malicious_count()) {
    throw std::invalid_argument(
        "malicious_fraction: " + std::to_string(malicious_per_round()) +
        " malicious clients per round but only " + std::to_string(malicious_count()) +
        " malicious clients");
  }
  if (clients_per_round - malicious_per_round() > num_clients - malicious_count()) {
    throw std::invalid_argument("malicious_fraction: not enough benign clients to sample");
  }
  if (eval_every == 0) throw std::invalid_argument("eval_every must be >= 1");
  if (!(boost_factor > 0.0)) throw std::invalid_argument("boost_factor must be > 0");
  if (!(dataset.dirichlet_alpha > 0.0)) {
    throw std::invalid_argument("dirichlet_alpha must be > 0");
  }
  if (dataset.kind != "mnist" && dataset.kind != "synth") {
    throw std::invalid_argument("dataset kind must be mnist or synth, got " + dataset.kind);
  }
  training.validate();
}

ExperimentData build_experiment_data(const ExperimentConfig& cfg) {
  const auto& dc = cfg.dataset;
  ExperimentData out;
  Dataset full_train, full_test;
  if (dc.kind == "mnist") {
    const std::filesystem::path dir(dc.mnist_dir);
    full_train = load_idx((dir / "train-images-idx3-ubyte").string(),
                          (dir / "train-labels-idx1-ubyte").string());
    full_test = load_idx((dir / "t10k-images-idx3-ubyte").string(),
                         (dir / "t10k-labels-idx1-ubyte").string());
    full_train.name = "mnist-train";
    full_test.name = "mnist-test";
  } else {
    const std::size_t extra_per_class =
        (dc.warmup_size + cfg.defense.root_size + dc.num_classes - 1) / dc.num_classes;
    full_train = synth_generate(dc.num_classes, dc.samples_per_class + extra_per_class,
                                dc.image_side, cfg.seed);
    full_test = synth_generate(dc.num_classes, dc.test_per_class, dc.image_side,
                               cfg.seed ^ 0x5EED7E57ULL);
    full_train.name = "synth-train";
    full_test.name = "synth-test";
  }
  std::size_t train_n = dc.train_limit ? std::min(dc.train_limit, full_train.size())
                                       : full_train.size();
  if (dc.kind == "synth") train_n = dc.num_classes * dc.samples_per_class;
  std::size_t cursor = train_n;
  const auto take = [&](std::size_t count, const char* what) {
    if (cursor + count > full_train.size()) {
      throw std::invalid_argument(std::string("dataset: not enough training samples for ") +
                                  what);
    }
    Dataset d = subset(full_train, range(cursor, cursor + count));
    cursor += count;
    return d;
  };
  out.train = subset(full_train, range(0, train_n));
  out.train.name = full_train.name;
  if (dc.warmup_size > 0) out.warmup = take(dc.warmup_size, "warmup");
  if (cfg.defense.rule == RuleKind::kFlTrust) {
    out.root = std::make_shared<const Dataset>(take(cfg.defense.root_size, "root dataset"));
  }
  const std::size_t test_n =
      dc.test_limit ? std::min(dc.test_limit, full_test.size()) : full_test.size();
  out.test = subset(full_test, range(0, test_n));
  out.test.name = full_test.name;

  const auto& edge = cfg.attack.edge;
  if (dc.edge_train_count > 0) {
    out.train = inject_rotated(out.train, edge.base_label, edge.rotation_degrees,
                               dc.edge_train_count, cfg.seed);
  }
  if (dc.edge_test_count > 0) {
    out.test = inject_rotated(out.test, edge.base_label, edge.rotation_degrees,
                              dc.edge_test_count, cfg.seed ^ 0x7E57ULL);
  }
  out.train.validate();
  out.test.validate();
  cfg.attack.validate(out.train.num_classes);
  out.backdoor_test = make_backdoor_testset(out.test, cfg.attack);
  return out;
}

std::vector<int> choose_malicious(const ExperimentConfig& cfg) {
  std::vector<int> ids(cfg.num_clients);
  std::iota(ids.begin(), ids.end(), 0);
  auto rng = make_stream({cfg.seed, stream::kMalicious});
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(cfg.malicious_count());
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<int> sample_round_clients(const ExperimentConfig& cfg,
                                      const std::vector<ClientState>& clients,
                                      int round_t) {
  if (round_t < 1) throw std::invalid_argument("round_t must be >= 1");
  std::vector<int> bad, good;
  for (const auto& c : clients) (c.malicious ? bad : good).push_back(c.client_id);
  const std::size_t want_bad = cfg.malicious_per_round();
  if (want_bad > bad.size() || cfg.clients_per_round - want_bad > good.size()) {
    throw std::invalid_argument("sampling: insufficient clients in a stratum");
  }
  auto rng = make_stream({cfg.seed, stream::kSampling, static_cast<std::uint64_t>(round_t)});
  std::shuffle(bad.begin(), bad.end(), rng);
  std::shuffle(good.begin(), good.end(), rng);
  std::vector<int> out(bad.begin(), bad.begin() + static_cast<long>(want_bad));
  out.insert(out.end(), good.begin(),
             good.begin() + static_cast<long>(cfg.clients_per_round - want_bad));
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<ClientSubmission> client_update(ClientState& state,
                                              const LayeredModel& global,
                                              const ExperimentConfig& cfg,
                                              int round_t, double* loss_out) {
  if (state.data.empty()) return std::nullopt;
  const bool partial = cfg.defense.rule == RuleKind::kFlPlas;
  const std::size_t cut = partial ? cfg.defense.cut_layer : global.num_layers();
  LayeredModel local = global;
  for (std::size_t l = cut; l < local.num_layers(); ++l) {
    local.layers[l].param = state.local_classifier.at(l - cut);
  }
  for (std::size_t l = 0; l < local.num_layers(); ++l) {
    if (local.layers[l].withheld()) {
      throw std::invalid_argument("client " + std::to_string(state.client_id) +
                                  ": global model lacks layer " + std::to_string(l));
    }
  }
  if (cfg.reset_velocity || state.velocity.num_layers() == 0) {
    state.velocity = global.filled_like(0.0);
  }
  std::vector<std::size_t> order(state.data.size());
  double loss = 0.0;
  for (std::size_t e = 0; e < cfg.training.local_iterations; ++e) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_stream({cfg.seed, stream::kShuffle, static_cast<std::uint64_t>(round_t),
                            static_cast<std::uint64_t>(state.client_id), e});
    std::shuffle(order.begin(), order.end(), rng);
    loss = train_epoch(local, state.velocity, state.data.images, state.data.labels, order,
                       cfg.training, round_t);
  }
  for (std::size_t l = cut; l < local.num_layers(); ++l) {
    state.local_classifier[l - cut] = local.layers[l].values();
  }
  if (loss_out) *loss_out = loss;
  return ClientSubmission{state.client_id, std::move(local), state.data.size()};
}

ClientSubmission upload(const ClientSubmission& local, const ClientState& state,
                        const LayeredModel& global, const ExperimentConfig& cfg) {
  ClientSubmission out = local;
  if (cfg.defense.rule == RuleKind::kFlPlas) out.model.withhold_from(cfg.defense.cut_layer);
  if (state.malicious && cfg.boost_factor != 1.0) {
    for (std::size_t l = 0; l < out.model.num_layers(); ++l) {
      auto& layer = out.model.layers[l];
      if (layer.withheld() || global.layers[l].withheld()) continue;
      auto v = layer.values().values();
      const auto g = global.layers[l].values().values();
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = g[i] + cfg.boost_factor * (v[i] - g[i]);
      }
    }
  }
  return out;
}

std::size_t thread_count_from_env() {
  const char* env = std::getenv("FLPLAS_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) return 1;
  return static_cast<std::size_t>(v);
}

Simulation::Simulation(ExperimentConfig cfg, ExperimentData data)
    : cfg_(std::move(cfg)), data_(std::move(data)), threads_(thread_count_from_env()) {
  cfg_.validate();
  if (data_.train.empty()) throw std::invalid_argument("experiment: empty training set");
  if (data_.test.empty()) throw std::invalid_argument("experiment: empty test set");
  global_ = build_arch(cfg_.arch_id, data_.train.num_classes, data_.train.sample_shape(),
                       cfg_.seed);
  cfg_.defense.validate(global_.num_layers());
  if (cfg_.defense.rule == RuleKind::kFlTrust && !cfg_.defense.root_dataset) {
    if (!data_.root) throw std::invalid_argument("fltrust: no root dataset");
    cfg_.defense.root_dataset = data_.root;
  }
  if (!data_.warmup.empty() && cfg_.dataset.warmup_epochs > 0) {
    global_ = pretrain(global_, data_.warmup, cfg_.dataset.warmup_epochs, cfg_.training,
                       cfg_.seed);
  }

  const auto part = dirichlet_partition(
      data_.train, {cfg_.num_clients, cfg_.dataset.dirichlet_alpha, cfg_.seed});
  const auto bad = choose_malicious(cfg_);
  const std::size_t cut = partial() ? cfg_.defense.cut_layer : global_.num_layers();
  clients_.resize(cfg_.num_clients);
  for (std::size_t i = 0; i < cfg_.num_clients; ++i) {
    auto& c = clients_[i];
    c.client_id = static_cast<int>(i);
    c.partition = part.assignments[i];
    c.data = subset(data_.train, c.partition);
    c.malicious = std::binary_search(bad.begin(), bad.end(), c.client_id);
    c.attack = cfg_.attack;
    c.attack.seed = hash_name("client") ^ (cfg_.seed * 0x9E3779B97F4A7C15ULL + i);
    if (c.malicious && c.attack.kind != AttackKind::kNone && !c.data.empty()) {
      c.data = poison_partition(c.data, c.attack).data;
    }
    for (std::size_t l = cut; l < global_.num_layers(); ++l) {
      c.local_classifier.push_back(global_.layers[l].values());
    }
    c.velocity = global_.filled_like(0.0);
  }
  if (partial()) global_.withhold_from(cut);
}

std::vector<std::uint64_t> Simulation::head_fingerprints() const {
  std::vector<std::uint64_t> out;
  out.reserve(clients_.size());
  for (const auto& c : clients_) out.push_back(fingerprint(c.local_classifier));
  return out;
}

void Simulation::check_isolation(const std::vector<std::uint64_t>& before) {
  const auto after = head_fingerprints();
  for (std::size_t i = 0; i < after.size(); ++i) {
    audit_.foreign_modifications += after[i] != before[i];
  }
  ++audit_.checks;
}

RoundLog Simulation::step() {
  const auto start = std::chrono::steady_clock::now();
  const int t = ++round_;
  RoundLog log;
  log.round = t;
  log.rule = std::string(to_string(cfg_.defense.rule));
  log.malicious_fraction = cfg_.malicious_fraction;
  log.sampled = sample_round_clients(cfg_, clients_, t);

  const std::size_t cut = partial() ? cfg_.defense.cut_layer : global_.num_layers();
  const auto holds_classifier = [&](const LayeredModel& m) {
    for (std::size_t l = cut; l < m.num_layers(); ++l) {
      if (!m.layers[l].withheld()) return true;
    }
    return false;
  };
  if (partial() && holds_classifier(global_)) ++audit_.classifier_broadcasts;

  // Heads of clients not sampled this round must not move while others train.
  const auto before_training = head_fingerprints();
  const std::size_t k = log.sampled.size();
  std::vector<std::optional<ClientSubmission>> local(k);
  std::vector<double> losses(k, 0.0);
  parallel_for(k, threads_, [&](std::size_t i) {
    local[i] = client_update(clients_[static_cast<std::size_t>(log.sampled[i])], global_,
                             cfg_, t, &losses[i]);
  });
  auto after_training = head_fingerprints();
  if (partial()) {
    std::vector<bool> trained(clients_.size(), false);
    for (int id : log.sampled) trained[static_cast<std::size_t>(id)] = true;
    for (std::size_t i = 0; i < clients_.size(); ++i) {
      audit_.foreign_modifications += !trained[i] && after_training[i] != before_training[i];
    }
  }

  std::vector<ClientSubmission> subs;
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!local[i]) {
      log.skipped.push_back(log.sampled[i]);
      continue;
    }
    const auto& state = clients_[static_cast<std::size_t>(log.sampled[i])];
    subs.push_back(upload(*local[i], state, global_, cfg_));
    if (partial() && holds_classifier(subs.back().model)) ++audit_.classifier_uploads;
    loss_sum += losses[i];
  }
  local.clear();
  if (!subs.empty()) {
    log.loss = loss_sum / static_cast<double>(subs.size());
    AggregationContext ctx{t, cfg_.seed, cfg_.training};
    try {
      global_ = aggregate(cfg_.defense, global_, subs, ctx);
    } catch (const std::exception& e) {
      throw std::runtime_error("round " + std::to_string(t) + ": " + e.what());
    }
    if (partial() && holds_classifier(global_)) ++audit_.server_classifier_writes;
  }
  if (partial()) check_isolation(after_training);

  if (t % static_cast<int>(cfg_.eval_every) == 0 ||
      t >= static_cast<int>(cfg_.rounds)) {
    log.eval = evaluate_now();
    log.evaluated = true;
  }
  if (cfg_.record_timing) {
    log.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - start)
                      .count();
  }
  return log;
}

EvalReport Simulation::evaluate_now() const {
  if (!partial()) return evaluate(global_, data_.test, data_.backdoor_test);
  std::vector<LocalHead> heads;
  heads.reserve(clients_.size());
  for (const auto& c : clients_) heads.push_back({c.client_id, c.malicious, c.local_classifier});
  return evaluate_partitioned(global_, cfg_.defense.cut_layer, heads, data_.test,
                              data_.backdoor_test);
}

LayeredModel Simulation::client_model(int client_id) const {
  const auto& c = clients_.at(static_cast<std::size_t>(client_id));
  LayeredModel m = global_;
  if (partial()) {
    for (std::size_t l = cfg_.defense.cut_layer; l < m.num_layers(); ++l) {
      m.layers[l].param = c.local_classifier[l - cfg_.defense.cut_layer];
    }
  }
  return m;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RoundCallback& on_round) {
  return run_experiment(cfg, build_experiment_data(cfg), on_round);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, ExperimentData data,
                                const RoundCallback& on_round) {
  Simulation sim(cfg, std::move(data));
  ExperimentResult result;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    result.logs.push_back(sim.step());
    if (on_round) on_round(result.logs.back());
  }
  result.final_eval = result.logs.empty() || !result.logs.back().evaluated
                          ? sim.evaluate_now()
                          : result.logs.back().eval;
  result.global = sim.global();
  result.clients = sim.clients();
  result.audit = sim.audit();
  return result;
}

}  // namespace flplas
