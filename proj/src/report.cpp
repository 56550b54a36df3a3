#include "flplas/report.hpp"

#include <algorithm>
#include <cstdio>

namespace flplas {

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string format_real(const std::optional<double>& v) {
  return v ? format_real(*v) : std::string();
}

std::string format_round_row(const RoundLog& log) {
  std::string row = std::to_string(log.round) + "," + log.rule + "," +
                    format_real(log.malicious_fraction) + ",";
  if (log.evaluated) {
    row += format_real(log.eval.ma) + "," + format_real(log.eval.ba) + "," +
           format_real(log.eval.ba_atk);
  } else {
    row += ",,";
  }
  row += "," + format_real(log.loss) + "," + format_real(log.wall_ms);
  return row;
}

std::vector<std::string> cut_monotonicity_violations(std::span<const CutSweepRow> rows,
                                                     double tolerance) {
  std::vector<std::string> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& a = rows[i - 1];
    const auto& b = rows[i];
    const std::string pair =
        "cut " + std::to_string(a.cut_layer) + " -> " + std::to_string(b.cut_layer);
    if (b.ma + tolerance < a.ma) {
      out.push_back(pair + ": ma decreases " + format_real(a.ma) + " -> " +
                    format_real(b.ma));
    }
    if (b.ba + tolerance < a.ba) {
      out.push_back(pair + ": ba decreases " + format_real(a.ba) + " -> " +
                    format_real(b.ba));
    }
  }
  if (!rows.empty()) {
    const auto lowest = std::min_element(
        rows.begin(), rows.end(),
        [](const CutSweepRow& x, const CutSweepRow& y) { return x.ba < y.ba; });
    if (lowest->ba + tolerance < rows.front().ba) {
      out.push_back("shallowest cut " + std::to_string(rows.front().cut_layer) +
                    " does not have the lowest ba (cut " +
                    std::to_string(lowest->cut_layer) + " has " +
                    format_real(lowest->ba) + ")");
    }
  }
  return out;
}

}  // namespace flplas
