#include "flplas/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace flplas {

namespace {

namespace pt = boost::property_tree;

const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s = {
      {"federation",
       {"num_clients", "clients_per_round", "rounds", "malicious_fraction", "seed", "arch",
        "reset_velocity", "boost_factor", "eval_every", "record_timing"}},
      {"training",
       {"learning_rate", "momentum", "weight_decay", "batch_size", "local_iterations",
        "lr_decay_base"}},
      {"defense",
       {"rule", "cut_layer", "krum_f", "multikrum_m", "ndc_threshold", "rsa_beta",
        "rsa_beta_decay", "flame_sigma", "flame_noise_absolute", "root_size"}},
      {"attack",
       {"kind", "target_label", "poison_fraction", "trigger_corner", "trigger_height",
        "trigger_width", "trigger_intensity", "trigger_pattern", "source_label",
        "edge_base_label", "edge_rotation"}},
      {"dataset",
       {"kind", "mnist_dir", "train_limit", "test_limit", "warmup_size", "warmup_epochs",
        "dirichlet_alpha", "synth_classes", "synth_samples_per_class",
        "synth_test_per_class", "synth_image_side", "edge_train_count",
        "edge_test_count"}},
      {"surgery", {"cut_layer", "epochs"}},
  };
  return s;
}

constexpr const char* kRequired[] = {"federation", "training", "defense", "attack",
                                     "dataset"};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Line number of each "section.key" and "[section]" in the source text.
std::map<std::string, std::size_t> line_index(const std::string& text) {
  std::map<std::string, std::size_t> lines;
  std::istringstream in(text);
  std::string line, section;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == ';' || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = trim(t.substr(1, t.size() - 2));
      lines.emplace("[" + section + "]", n);
    } else if (const auto eq = t.find('='); eq != std::string::npos) {
      lines.emplace(section + "." + trim(t.substr(0, eq)), n);
    }
  }
  return lines;
}

class Reader {
 public:
  Reader(const pt::ptree& tree, std::map<std::string, std::size_t> lines,
         std::string source)
      : tree_(tree), lines_(std::move(lines)), source_(std::move(source)) {}

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    const auto sec = tree_.get_child_optional(pt::ptree::path_type(section, '\x01'));
    if (!sec) return std::nullopt;
    const auto v = sec->get_optional<std::string>(pt::ptree::path_type(key, '\x01'));
    if (!v) return std::nullopt;
    return trim(*v);
  }

  [[noreturn]] void fail(const std::string& section, const std::string& key,
                         const std::string& msg) const {
    const auto it = lines_.find(section + "." + key);
    const std::size_t line = it == lines_.end() ? 0 : it->second;
    std::string where = source_;
    if (line) where += ":" + std::to_string(line);
    throw ConfigError(where + ": [" + section + "] " + key + ": " + msg, line);
  }

  template <class T>
  void num(const std::string& section, const std::string& key, T& out) const {
    const auto v = raw(section, key);
    if (!v) return;
    T value{};
    const auto* end = v->data() + v->size();
    const auto [ptr, ec] = std::from_chars(v->data(), end, value);
    if (ec != std::errc() || ptr != end || v->empty()) {
      fail(section, key, "expected a number, got '" + *v + "'");
    }
    out = value;
  }

  void flag(const std::string& section, const std::string& key, bool& out) const {
    const auto v = raw(section, key);
    if (!v) return;
    if (*v == "true" || *v == "1" || *v == "yes") {
      out = true;
    } else if (*v == "false" || *v == "0" || *v == "no") {
      out = false;
    } else {
      fail(section, key, "expected true or false, got '" + *v + "'");
    }
  }

  void text(const std::string& section, const std::string& key, std::string& out) const {
    if (const auto v = raw(section, key)) out = *v;
  }

 private:
  const pt::ptree& tree_;
  std::map<std::string, std::size_t> lines_;
  std::string source_;
};

std::string fmt_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

LoadedConfig parse_config(const std::string& text, const std::string& base_dir,
                          const std::string& source_name) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source_name + ":" + std::to_string(e.line()) + ": " + e.message(),
                      e.line());
  }
  const auto lines = line_index(text);
  for (const auto& [section, body] : tree) {
    const auto it = schema().find(section);
    const auto sl = lines.find("[" + section + "]");
    const std::size_t line = sl == lines.end() ? 0 : sl->second;
    if (it == schema().end()) {
      throw ConfigError(source_name + ":" + std::to_string(line) + ": unknown section [" +
                            section + "]",
                        line);
    }
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) {
        const auto kl = lines.find(section + "." + key);
        const std::size_t kline = kl == lines.end() ? 0 : kl->second;
        throw ConfigError(source_name + ":" + std::to_string(kline) + ": [" + section +
                              "] unknown key '" + key + "'",
                          kline);
      }
    }
  }
  for (const char* section : kRequired) {
    if (!tree.get_child_optional(section)) {
      throw ConfigError(source_name + ": missing section [" + std::string(section) + "]");
    }
  }

  const Reader r(tree, lines, source_name);
  LoadedConfig out;
  out.source_path = source_name;
  auto& e = out.experiment;

  r.num("federation", "num_clients", e.num_clients);
  r.num("federation", "clients_per_round", e.clients_per_round);
  r.num("federation", "rounds", e.rounds);
  r.num("federation", "malicious_fraction", e.malicious_fraction);
  r.num("federation", "seed", e.seed);
  r.text("federation", "arch", e.arch_id);
  r.flag("federation", "reset_velocity", e.reset_velocity);
  r.num("federation", "boost_factor", e.boost_factor);
  r.num("federation", "eval_every", e.eval_every);
  r.flag("federation", "record_timing", e.record_timing);

  auto& t = e.training;
  r.num("training", "learning_rate", t.learning_rate);
  r.num("training", "momentum", t.momentum);
  r.num("training", "weight_decay", t.weight_decay);
  r.num("training", "batch_size", t.batch_size);
  r.num("training", "local_iterations", t.local_iterations);
  r.num("training", "lr_decay_base", t.lr_decay_base);
  t.seed = e.seed;

  auto& d = e.defense;
  if (const auto v = r.raw("defense", "rule")) {
    const auto rule = parse_rule(*v);
    if (!rule) r.fail("defense", "rule", "unknown rule '" + *v + "'");
    d.rule = *rule;
  } else {
    r.fail("defense", "rule", "required");
  }
  r.num("defense", "cut_layer", d.cut_layer);
  r.num("defense", "krum_f", d.krum_f);
  r.num("defense", "multikrum_m", d.multikrum_m);
  r.num("defense", "ndc_threshold", d.ndc_threshold);
  r.num("defense", "rsa_beta", d.rsa_beta);
  r.flag("defense", "rsa_beta_decay", d.rsa_beta_decay);
  r.num("defense", "flame_sigma", d.flame_sigma);
  r.flag("defense", "flame_noise_absolute", d.flame_noise_absolute);
  r.num("defense", "root_size", d.root_size);

  auto& a = e.attack;
  if (const auto v = r.raw("attack", "kind")) {
    const auto kind = parse_attack_kind(*v);
    if (!kind) r.fail("attack", "kind", "unknown attack '" + *v + "'");
    a.kind = *kind;
  }
  r.num("attack", "target_label", a.target_label);
  r.num("attack", "poison_fraction", a.poison_fraction);
  if (const auto v = r.raw("attack", "trigger_corner")) {
    const auto c = parse_corner(*v);
    if (!c) r.fail("attack", "trigger_corner", "unknown corner '" + *v + "'");
    a.trigger.corner = *c;
  }
  r.num("attack", "trigger_height", a.trigger.height);
  r.num("attack", "trigger_width", a.trigger.width);
  r.num("attack", "trigger_intensity", a.trigger.intensity);
  if (const auto v = r.raw("attack", "trigger_pattern")) {
    const auto p = parse_trigger_pattern(*v);
    if (!p) r.fail("attack", "trigger_pattern", "unknown pattern '" + *v + "'");
    a.trigger.pattern = *p;
  }
  r.num("attack", "source_label", a.source_label);
  r.num("attack", "edge_base_label", a.edge.base_label);
  r.num("attack", "edge_rotation", a.edge.rotation_degrees);
  a.seed = e.seed;

  auto& ds = e.dataset;
  r.text("dataset", "kind", ds.kind);
  if (const auto v = r.raw("dataset", "mnist_dir")) {
    std::filesystem::path p(*v);
    if (p.is_relative() && !base_dir.empty()) p = std::filesystem::path(base_dir) / p;
    ds.mnist_dir = p.lexically_normal().string();
  }
  r.num("dataset", "train_limit", ds.train_limit);
  r.num("dataset", "test_limit", ds.test_limit);
  r.num("dataset", "warmup_size", ds.warmup_size);
  r.num("dataset", "warmup_epochs", ds.warmup_epochs);
  r.num("dataset", "dirichlet_alpha", ds.dirichlet_alpha);
  r.num("dataset", "synth_classes", ds.num_classes);
  r.num("dataset", "synth_samples_per_class", ds.samples_per_class);
  r.num("dataset", "synth_test_per_class", ds.test_per_class);
  r.num("dataset", "synth_image_side", ds.image_side);
  r.num("dataset", "edge_train_count", ds.edge_train_count);
  r.num("dataset", "edge_test_count", ds.edge_test_count);
  if (ds.kind == "mnist" && ds.mnist_dir.empty()) {
    r.fail("dataset", "mnist_dir", "required for the mnist dataset");
  }

  auto& s = out.surgery;
  s.arch_id = e.arch_id;
  s.training = t;
  s.seed = e.seed;
  s.cut_layer = d.cut_layer ? d.cut_layer : s.cut_layer;
  r.num("surgery", "cut_layer", s.cut_layer);
  r.num("surgery", "epochs", s.epochs);

  try {
    e.validate();
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(source_name + ": " + ex.what());
  }
  return out;
}

LoadedConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const auto base = std::filesystem::path(path).parent_path().string();
  return parse_config(ss.str(), base, path);
}

std::string config_to_ini(const LoadedConfig& cfg) {
  const auto& e = cfg.experiment;
  const auto& t = e.training;
  const auto& d = e.defense;
  const auto& a = e.attack;
  const auto& ds = e.dataset;
  const auto b = [](bool v) { return v ? "true" : "false"; };
  std::ostringstream o;
  o << "[federation]\n"
    << "num_clients = " << e.num_clients << "\n"
    << "clients_per_round = " << e.clients_per_round << "\n"
    << "rounds = " << e.rounds << "\n"
    << "malicious_fraction = " << fmt_double(e.malicious_fraction) << "\n"
    << "seed = " << e.seed << "\n"
    << "arch = " << e.arch_id << "\n"
    << "reset_velocity = " << b(e.reset_velocity) << "\n"
    << "boost_factor = " << fmt_double(e.boost_factor) << "\n"
    << "eval_every = " << e.eval_every << "\n"
    << "record_timing = " << b(e.record_timing) << "\n\n"
    << "[training]\n"
    << "learning_rate = " << fmt_double(t.learning_rate) << "\n"
    << "momentum = " << fmt_double(t.momentum) << "\n"
    << "weight_decay = " << fmt_double(t.weight_decay) << "\n"
    << "batch_size = " << t.batch_size << "\n"
    << "local_iterations = " << t.local_iterations << "\n"
    << "lr_decay_base = " << fmt_double(t.lr_decay_base) << "\n\n"
    << "[defense]\n"
    << "rule = " << to_string(d.rule) << "\n"
    << "cut_layer = " << d.cut_layer << "\n"
    << "krum_f = " << d.krum_f << "\n"
    << "multikrum_m = " << d.multikrum_m << "\n"
    << "ndc_threshold = " << fmt_double(d.ndc_threshold) << "\n"
    << "rsa_beta = " << fmt_double(d.rsa_beta) << "\n"
    << "rsa_beta_decay = " << b(d.rsa_beta_decay) << "\n"
    << "flame_sigma = " << fmt_double(d.flame_sigma) << "\n"
    << "flame_noise_absolute = " << b(d.flame_noise_absolute) << "\n"
    << "root_size = " << d.root_size << "\n\n"
    << "[attack]\n"
    << "kind = " << to_string(a.kind) << "\n"
    << "target_label = " << a.target_label << "\n"
    << "poison_fraction = " << fmt_double(a.poison_fraction) << "\n"
    << "trigger_corner = " << to_string(a.trigger.corner) << "\n"
    << "trigger_height = " << a.trigger.height << "\n"
    << "trigger_width = " << a.trigger.width << "\n"
    << "trigger_intensity = " << fmt_double(a.trigger.intensity) << "\n"
    << "trigger_pattern = " << to_string(a.trigger.pattern) << "\n"
    << "source_label = " << a.source_label << "\n"
    << "edge_base_label = " << a.edge.base_label << "\n"
    << "edge_rotation = " << fmt_double(a.edge.rotation_degrees) << "\n\n"
    << "[dataset]\n"
    << "kind = " << ds.kind << "\n";
  if (!ds.mnist_dir.empty()) o << "mnist_dir = " << ds.mnist_dir << "\n";
  o << "train_limit = " << ds.train_limit << "\n"
    << "test_limit = " << ds.test_limit << "\n"
    << "warmup_size = " << ds.warmup_size << "\n"
    << "warmup_epochs = " << ds.warmup_epochs << "\n"
    << "dirichlet_alpha = " << fmt_double(ds.dirichlet_alpha) << "\n"
    << "synth_classes = " << ds.num_classes << "\n"
    << "synth_samples_per_class = " << ds.samples_per_class << "\n"
    << "synth_test_per_class = " << ds.test_per_class << "\n"
    << "synth_image_side = " << ds.image_side << "\n"
    << "edge_train_count = " << ds.edge_train_count << "\n"
    << "edge_test_count = " << ds.edge_test_count << "\n\n"
    << "[surgery]\n"
    << "cut_layer = " << cfg.surgery.cut_layer << "\n"
    << "epochs = " << cfg.surgery.epochs << "\n";
  return o.str();
}

}  // namespace flplas
