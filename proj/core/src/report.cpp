#include "cspd/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

namespace cspd {
namespace {

// Shortest representation that survives a double round-trip, so repeated
// runs of the same config produce byte-identical rows.
std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::ofstream open_for_write(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("emit_report: cannot write " + path);
  return out;
}

void write_metrics_csv(const MetricsReport& rep, const std::string& path) {
  std::ofstream out = open_for_write(path);
  out << "trial,seed,rounds,drafted,accepted,rejected,skipped,"
         "tested_rejections,bonus_tokens,fallback_tokens,resampled_tokens,"
         "resample_iters,target_rounds,target_evals,draft_evals,early_stops,"
         "prefill_tokens,emitted,acceptance_rate,rejection_rate,"
         "mean_accepted_len,verifier_calls_per_token,target_evals_per_token,"
         "ks_vs_direct\n";
  for (const TrialRow& r : rep.rows) {
    const RunMetrics& m = r.metrics;
    out << r.trial << ',' << r.seed << ',' << m.rounds << ',' << m.drafted
        << ',' << m.accepted << ',' << m.rejected << ',' << m.skipped << ','
        << m.tested_rejections << ',' << m.bonus_tokens << ','
        << m.fallback_tokens << ',' << m.resampled_tokens << ','
        << m.resample_iters << ',' << m.target_rounds << ',' << m.target_evals
        << ',' << m.draft_evals << ',' << m.early_stops << ','
        << m.prefill_tokens << ',' << m.emitted << ','
        << fmt(m.acceptance_rate()) << ',' << fmt(m.rejection_rate()) << ','
        << fmt(m.mean_accepted_len()) << ','
        << fmt(m.target_rounds_per_token()) << ','
        << fmt(m.target_evals_per_token()) << ',' << fmt(r.ks_vs_direct)
        << '\n';
  }
  if (!out) throw std::runtime_error("emit_report: write failed on " + path);
}

void write_summary_json(const MetricsReport& rep, const std::string& path) {
  nlohmann::ordered_json j;
  j["version"] = "cspd-metrics-v1";
  j["variant"] = rep.variant;
  nlohmann::ordered_json agg;
  agg["mean_acceptance"] = rep.agg.mean_acceptance;
  agg["mean_accepted_len"] = rep.agg.mean_accepted_len;
  agg["verifier_calls_per_token"] = rep.agg.verifier_calls_per_token;
  agg["target_evals_per_token"] = rep.agg.target_evals_per_token;
  agg["early_stop_rate"] = rep.agg.early_stop_rate;
  agg["mean_ks_vs_direct"] = rep.agg.mean_ks_vs_direct;
  j["aggregates"] = agg;
  j["assertions"] = nlohmann::ordered_json::array();
  for (const NamedCheck& c : rep.assertions)
    j["assertions"].push_back(
        {{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
  j["comparisons"] = nlohmann::ordered_json(rep.comparisons);
  j["config"] = nlohmann::ordered_json::parse(experiment_to_json(rep.config));
  double total_wall = 0.0;
  for (const TrialRow& r : rep.rows) total_wall += r.wall_seconds;
  j["timing"] = {{"total_wall_seconds", total_wall},
                 {"wall_seconds_per_token", rep.agg.wall_seconds_per_token}};
  std::ofstream out = open_for_write(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("emit_report: write failed on " + path);
}

void write_histogram(const std::vector<double>& values, double range,
                     const std::string& path) {
  constexpr int kBins = 64;
  if (!(range > 0.0) || !std::isfinite(range))
    throw std::invalid_argument("emit_report: histogram range must be positive");
  std::vector<long> counts(kBins, 0);
  for (double v : values) {
    // Indicators live in [0, range] by construction; the top edge folds into
    // the last bin so conservation holds exactly.
    const int b = std::clamp(static_cast<int>(v / range * kBins), 0, kBins - 1);
    counts[static_cast<std::size_t>(b)] += 1;
  }
  std::ofstream out = open_for_write(path);
  out << "bin_center,count\n";
  for (int b = 0; b < kBins; ++b)
    out << fmt((b + 0.5) * range / kBins) << ','
        << counts[static_cast<std::size_t>(b)] << '\n';
  if (!out) throw std::runtime_error("emit_report: write failed on " + path);
}

}  // namespace

void emit_report(const MetricsReport& report, const std::string& dir) {
  if (report.rows.empty())
    throw std::invalid_argument("emit_report: report has no trials");
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  write_metrics_csv(report, (base / "metrics.csv").string());
  write_summary_json(report, (base / "summary.json").string());
  write_histogram(report.entropy_draft, report.indicator_range,
                  (base / "entropy_hist_draft.csv").string());
  write_histogram(report.entropy_target, report.indicator_range,
                  (base / "entropy_hist_target.csv").string());
}

}  // namespace cspd
