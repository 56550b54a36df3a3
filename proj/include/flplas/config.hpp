#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include "flplas/federation.hpp"
#include "flplas/metrics.hpp"

namespace flplas {

// Invalid or unreadable experiment config. `line` is 0 when unknown.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct LoadedConfig {
  ExperimentConfig experiment;
  SurgeryConfig surgery;
  std::string source_path;
};

// INI file with sections [federation] [training] [defense] [attack]
// [dataset] and an optional [surgery]. Unknown keys are rejected. Relative
// paths resolve against the file's directory.
LoadedConfig load_config(const std::string& path);
LoadedConfig parse_config(const std::string& text, const std::string& base_dir,
                          const std::string& source_name = "<config>");

// Canonical INI text for a resolved config. Parsing it gives the same config.
std::string config_to_ini(const LoadedConfig& cfg);

}  // namespace flplas
