#pragma once

#include <string>

#include "cspd/harness.hpp"

namespace cspd {

// Writes metrics.csv (one row per trial, frozen column order, no wall-clock
// so repeat runs are byte-identical), summary.json (aggregates, assertions,
// comparisons, config echo, timing), and the two entropy histogram files
// (bin_center,count over 64 uniform bins spanning [0, indicator_range]).
// Creates dir if needed; refuses an empty trial list.
void emit_report(const MetricsReport& report, const std::string& dir);

}  // namespace cspd
