#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cspd/entropy.hpp"
#include "cspd/gaussian.hpp"
#include "cspd/model.hpp"
#include "cspd/random.hpp"
#include "cspd/schedule.hpp"
#include "cspd/trajectory.hpp"

namespace cspd {

struct SpecConfig {
  int gamma = 4;                 // max draft tokens per round
  int denoise_steps = 1;         // T
  double temperature = 1.0;      // scales head variances by temperature^2, both models
  double cfg_scale = 1.75;       // guidance scale, threaded through; identity for the
                                 // unconditional toy heads here
  double prefix_fraction = 0.0;  // eta: share of seq_len sampled from the target up front
  double tau_ent = 0.0;          // early-stop threshold; indicators are >= 0 and the
                                 // comparison is strict, so 0 disables stopping
  int shallow_layer = 0;
  bool bonus_token = true;
  bool share_noise = true;       // verification chains reuse the draft's noise substreams
  double ratio_cap = 1e12;
  int resample_cap = 10000;
  double draft_beta_scale = 1.0; // draft chain betas = target betas * this
};

void validate(const SpecConfig& cfg, int draft_depth);

// The two chain schedules a config implies (T steps; the draft's betas scaled).
NoiseSchedule target_schedule(const SpecConfig& cfg);
NoiseSchedule draft_schedule(const SpecConfig& cfg);

struct DraftBatch {
  std::vector<Vec> tokens;             // kept draft tokens
  std::vector<GaussianParams> dists;   // q_i each kept token was drawn from
  std::vector<double> indicators;      // shallow indicator after each kept token
  std::vector<Vec> step_vars;          // draft per-step variances, t = T..2 (empty at T=1)
  bool stopped_early = false;
  std::optional<int> stop_index;       // 1-based index of the dropped token
};

struct VerificationResult {
  std::vector<GaussianParams> target_dists;  // p_i for i = 1..len+1
  double sigma_factor = 1.0;
  std::vector<double> ratios;                // capped sigma * p_i(x_i) / q_i(x_i)
  int accepted_n = 0;                        // filled by the accept stage
  std::optional<Vec> resampled;              // present iff accepted_n < len(ratios)
  std::optional<Vec> bonus;                  // present iff full accept and bonus enabled
  int target_evals = 0;                      // per-position target evaluations (len+1)
};

// prod_{t=2..T} sqrt(det Sigma_q,t / det Sigma_p,t) for diagonal covariances,
// computed in log space. Both lists hold per-step variance vectors for steps
// 2..T; empty lists (T=1) give the empty product 1.0.
double sigma_factor(const std::vector<Vec>& draft_vars,
                    const std::vector<Vec>& target_vars);

// sigma * exp(log_p - log_q) in log space, capped. Throws on non-finite
// inputs or sigma <= 0.
double pdf_ratio(double log_p, double log_q, double sigma, double cap = 1e12);

// Sequential draft pass with the per-token stop check: after each sampled
// token the shallow indicator of the extended prefix is tested against
// tau_ent; a strict drop below the threshold discards that token and keeps
// only the tokens generated before it. `draft_evals`, when given, is
// incremented by the number of next-distribution queries made.
DraftBatch draft_generate(const ArModel& draft, const std::vector<Vec>& ctx,
                          const Vec& cond, const SpecConfig& cfg,
                          const RandomSource& root, int round,
                          long* draft_evals = nullptr);

// Computes p_i for i = 1..len+1 over the same prefixes the draft extended,
// re-running each position's chain on the draft's noise substream (trajectory
// alignment) unless share_noise is off; fills sigma_factor from the recorded
// per-step variances and ratios per pdf_ratio. Does not mutate ctx. The
// accept / resample / bonus fields are left for the caller's accept stage.
VerificationResult verify_parallel(const ArModel& target, const std::vector<Vec>& ctx,
                                   const Vec& cond, const DraftBatch& batch,
                                   const SpecConfig& cfg, const RandomSource& root,
                                   int round);

// Longest accepted prefix: draws r_1..r_len uniform from the dedicated
// substream up front; the first i with r_i > ratio_i rejects (equality
// accepts), giving i-1; len if none fail.
int accept_prefix(const std::vector<double>& ratios, RandomSource rng);

struct ResampleResult {
  Vec token;
  int iterations = 0;  // proposals drawn, including the accepted one
};

// Acceptance-rejection draw from max(0, sigma*p - q) / Z: propose x ~ p,
// accept with probability max(0, sigma*p(x) - q(x)) / (sigma*p(x)). Throws
// std::runtime_error after cfg.resample_cap rejected proposals; unreachable
// from the engine when every ratio >= 1, since rejection requires r > ratio.
ResampleResult resample_rejected(const GaussianParams& p, const GaussianParams& q,
                                 double sigma, const SpecConfig& cfg, RandomSource rng);

struct RoundTrace {
  int round = 0;
  int drafted = 0;                 // sampled this round, including a dropped token
  int accepted = 0;
  bool stopped_early = false;
  std::optional<int> stop_index;
  double sigma = 1.0;
  std::vector<double> ratios;
  int resample_iters = 0;
  bool bonus_emitted = false;
};

struct RunMetrics {
  int rounds = 0;
  long drafted = 0;
  long accepted = 0;
  long rejected = 0;            // kept draft tokens discarded at or after a failure
  long skipped = 0;             // tokens dropped by the stop check (0/1 per round)
  long tested_rejections = 0;   // rounds whose acceptance test failed somewhere
  long bonus_tokens = 0;
  long fallback_tokens = 0;     // emitted when a round kept no tokens and bonus is off
  long resampled_tokens = 0;
  long resample_iters = 0;
  long target_rounds = 0;       // batched verification calls (one per round)
  long target_evals = 0;        // per-position target evaluations (len+1 per round)
  long draft_evals = 0;         // draft next-distribution queries
  long early_stops = 0;
  int prefill_tokens = 0;
  int emitted = 0;              // tokens the loop produced, prefill excluded,
                                // before truncation to seq_len

  // Fraction of tested positions that passed. Every accepted token is one
  // passed test; a failed round contributes exactly one failed test.
  double acceptance_rate() const;
  double rejection_rate() const { return 1.0 - acceptance_rate(); }
  double mean_accepted_len() const;          // accepted / rounds
  double target_evals_per_token() const;     // compute proxy
  double target_rounds_per_token() const;    // latency proxy
};

struct RunResult {
  std::vector<Vec> tokens;  // exactly seq_len tokens (prefill first)
  RunMetrics metrics;
  std::vector<RoundTrace> trace;
};

RunResult run_cspd(const ArModel& target, const ArModel& draft, const Vec& condition,
                   int seq_len, const SpecConfig& cfg, std::uint64_t seed);

// One JSON object per round:
// {round, drafted, accepted, stopped_early, stop_index, sigma, ratios,
//  resample_iters, bonus_emitted}
std::string trace_to_jsonl(const std::vector<RoundTrace>& trace);
void save_trace(const std::string& path, const std::vector<RoundTrace>& trace);

} // namespace cspd
