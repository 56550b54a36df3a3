#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flplas/federation.hpp"

namespace flplas {

inline constexpr std::string_view kRoundsHeader =
    "round,rule,malicious_fraction,ma,ba,ba_atk,loss,wall_ms";

// Fixed six-decimal rendering used by every CSV the tools write.
std::string format_real(double v);
std::string format_real(const std::optional<double>& v);  // empty when unset

// One rounds.csv line without the trailing newline. Rounds that were not
// evaluated leave ma/ba/ba_atk empty.
std::string format_round_row(const RoundLog& log);

struct CutSweepRow {
  std::size_t cut_layer = 0;
  double ma = 0.0;
  double ba = 0.0;
  std::optional<double> ba_atk;
};

// Human-readable findings for a cut sweep, rows in ascending cut order:
// each adjacent pair where MA or BA decreases, and whether the shallowest
// cut has the lowest BA. Empty when the sweep is monotone.
std::vector<std::string> cut_monotonicity_violations(std::span<const CutSweepRow> rows,
                                                     double tolerance = 0.0);

}  // namespace flplas
