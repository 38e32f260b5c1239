#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cspd/config.hpp"
#include "cspd/engine.hpp"

namespace cspd {

struct TrialRow {
  int trial = 0;
  std::uint64_t seed = 0;
  RunMetrics metrics;
  double ks_vs_direct = 0.0;
  double wall_seconds = 0.0;  // timing lives in summary.json only, never the CSV
};

struct Aggregates {
  double mean_acceptance = 0.0;
  double mean_accepted_len = 0.0;
  // Both pooled over emitted tokens. Batched verification rounds are the
  // latency proxy (a perfect draft with bonus hits 1/(gamma+1)); per-position
  // evaluations are the compute proxy early stopping actually saves.
  double verifier_calls_per_token = 0.0;
  double target_evals_per_token = 0.0;
  double early_stop_rate = 0.0;  // pooled: stops per round
  double mean_ks_vs_direct = 0.0;
  double wall_seconds_per_token = 0.0;
};

struct NamedCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct MetricsReport {
  ExperimentConfig config;
  std::string variant = "full";
  std::vector<TrialRow> rows;
  Aggregates agg;
  std::vector<NamedCheck> assertions;
  std::map<std::string, double> comparisons;
  // Shallow-indicator samples from a fixed probe set, for the histogram files.
  std::vector<double> entropy_draft;
  std::vector<double> entropy_target;
  double indicator_range = 0.0;  // log R of the probe context width

  bool passed() const;
};

// Pure recomputation of the aggregate block from per-trial rows.
Aggregates aggregate(const std::vector<TrialRow>& rows);

// Names of the loss terms a pipeline variant trains with ('F' = full).
std::vector<std::string> loss_registry(char variant);

// Full pipeline: build models from the first seed, train both stages when the
// config asks for any epochs, then run every trial and the embedded checks.
MetricsReport run_benchmark(const ExperimentConfig& cfg);

// The same pipeline twice on identical seeds: as configured, and with one
// ingredient removed (A: entropy loss, B: annealed weighting pinned to 0.5,
// C: consistency-distillation stage, D: entropy early stopping).
std::pair<MetricsReport, MetricsReport> run_ablation(const ExperimentConfig& cfg,
                                                     char variant);

} // namespace cspd
