#include "cspd/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "cspd/diffusion.hpp"

namespace cspd {

namespace {

// All of a round's randomness hangs off one child stream, so draws made in
// one round can never shift another round's.
RandomSource round_stream(const RandomSource& root, int round) {
  return root.substream("round", static_cast<std::uint64_t>(round));
}

// Next-token head distribution with temperature folded into the variance.
// cfg_scale rides along in the config; the toy heads expose a single
// (un)conditional stream, so no score mixing happens here.
GaussianParams head_dist(const ArModel& m, const std::vector<Vec>& ctx, const Vec& cond,
                         const SpecConfig& cfg, ModelOutput* out = nullptr) {
  ModelOutput o = m.forward(ctx, cond);
  GaussianParams g = o.next_dist;
  if (cfg.temperature != 1.0) g.var *= cfg.temperature * cfg.temperature;
  if (out) *out = std::move(o);
  return g;
}

} // namespace

void validate(const SpecConfig& cfg, int draft_depth) {
  if (cfg.gamma < 1) throw std::invalid_argument("gamma must be >= 1");
  if (cfg.denoise_steps < 1) throw std::invalid_argument("denoise_steps must be >= 1");
  if (!(cfg.temperature > 0.0) || !std::isfinite(cfg.temperature))
    throw std::invalid_argument("temperature must be positive and finite");
  if (!std::isfinite(cfg.cfg_scale))
    throw std::invalid_argument("cfg_scale must be finite");
  // 1.0 is allowed: the run degenerates to pure prefill (direct target
  // sampling, zero speculation rounds), which doubles as the KS baseline.
  if (!(cfg.prefix_fraction >= 0.0) || !(cfg.prefix_fraction <= 1.0))
    throw std::invalid_argument("prefix_fraction must lie in [0, 1]");
  if (!std::isfinite(cfg.tau_ent))
    throw std::invalid_argument("tau_ent must be finite");
  if (cfg.shallow_layer < 0 || cfg.shallow_layer >= draft_depth - 1)
    throw std::invalid_argument("shallow_layer must probe a layer before the draft's last");
  if (!(cfg.ratio_cap >= 1.0) || !std::isfinite(cfg.ratio_cap))
    throw std::invalid_argument("ratio_cap must be finite and >= 1");
  if (cfg.resample_cap < 1) throw std::invalid_argument("resample_cap must be >= 1");
  if (!(cfg.draft_beta_scale > 0.0) || !std::isfinite(cfg.draft_beta_scale))
    throw std::invalid_argument("draft_beta_scale must be positive and finite");
  draft_schedule(cfg);  // beta range enforced by the schedule itself
}

NoiseSchedule target_schedule(const SpecConfig& cfg) {
  return NoiseSchedule::linear(cfg.denoise_steps);
}

NoiseSchedule draft_schedule(const SpecConfig& cfg) {
  const NoiseSchedule base = target_schedule(cfg);
  if (cfg.draft_beta_scale == 1.0) return base;
  std::vector<double> betas;
  betas.reserve(base.steps());
  for (int t = 1; t <= base.steps(); ++t)
    betas.push_back(cfg.draft_beta_scale * base.beta(t));
  return NoiseSchedule(std::move(betas));
}

double sigma_factor(const std::vector<Vec>& draft_vars,
                    const std::vector<Vec>& target_vars) {
  if (draft_vars.size() != target_vars.size())
    throw std::invalid_argument("sigma_factor: step-count mismatch");
  double log_sigma = 0.0;
  for (std::size_t s = 0; s < draft_vars.size(); ++s) {
    if (draft_vars[s].size() != target_vars[s].size())
      throw std::invalid_argument("sigma_factor: dimension mismatch at step " +
                                  std::to_string(s + 2));
    for (Eigen::Index k = 0; k < draft_vars[s].size(); ++k) {
      const double dv = draft_vars[s][k];
      const double tv = target_vars[s][k];
      if (!(dv > 0.0) || !(tv > 0.0))
        throw std::invalid_argument("sigma_factor: variances must be positive");
      log_sigma += 0.5 * (std::log(dv) - std::log(tv));
    }
  }
  return std::exp(log_sigma);
}

double pdf_ratio(double log_p, double log_q, double sigma, double cap) {
  if (!std::isfinite(log_p) || !std::isfinite(log_q))
    throw std::invalid_argument("pdf_ratio: log densities must be finite");
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw std::invalid_argument("pdf_ratio: sigma must be positive and finite");
  if (!(cap > 0.0)) throw std::invalid_argument("pdf_ratio: cap must be positive");
  const double lr = std::log(sigma) + log_p - log_q;
  if (lr >= std::log(cap)) return cap;
  return std::min(std::exp(lr), cap);
}

namespace {

// Works in place on the caller's context buffer and restores it before
// returning; long runs would otherwise pay a full context copy every round.
DraftBatch draft_generate_impl(const ArModel& draft, std::vector<Vec>& prefix,
                               const Vec& cond, const SpecConfig& cfg,
                               const RandomSource& root, int round,
                               long* draft_evals) {
  if (prefix.empty()) throw std::invalid_argument("draft_generate: empty context");
  validate(cfg, draft.depth());
  const RandomSource rr = round_stream(root, round);
  const NoiseSchedule sched = draft_schedule(cfg);
  const std::size_t base = prefix.size();

  DraftBatch batch;
  long evals = 0;
  GaussianParams q = head_dist(draft, prefix, cond, cfg);
  ++evals;
  for (int i = 1; i <= cfg.gamma; ++i) {
    RandomSource chain = rr.substream("chain", static_cast<std::uint64_t>(i));
    Trajectory traj = sample_token_trajectory(q, sched, chain);
    if (i == 1) batch.step_vars = traj.step_vars;
    batch.tokens.push_back(traj.sample);
    batch.dists.push_back(traj.final_dist);
    prefix.push_back(traj.sample);

    // The post-append prefix check doubles as the next token's sampling query.
    ModelOutput out;
    q = head_dist(draft, prefix, cond, cfg, &out);
    ++evals;
    const double ind = shallow_entropy_indicator(out, cfg.shallow_layer);
    if (early_stop_check(ind, cfg.tau_ent)) {
      batch.stopped_early = true;
      batch.stop_index = i;
      batch.tokens.pop_back();
      batch.dists.pop_back();
      break;
    }
    batch.indicators.push_back(ind);
  }
  prefix.resize(base);
  if (draft_evals) *draft_evals += evals;
  return batch;
}

}  // namespace

DraftBatch draft_generate(const ArModel& draft, const std::vector<Vec>& ctx,
                          const Vec& cond, const SpecConfig& cfg,
                          const RandomSource& root, int round, long* draft_evals) {
  std::vector<Vec> scratch = ctx;
  return draft_generate_impl(draft, scratch, cond, cfg, root, round, draft_evals);
}

namespace {

// Same in-place contract as draft_generate_impl: borrows the context buffer,
// appends as it walks the batch, restores on exit.
VerificationResult verify_parallel_impl(const ArModel& target,
                                        std::vector<Vec>& prefix, const Vec& cond,
                                        const DraftBatch& batch,
                                        const SpecConfig& cfg,
                                        const RandomSource& root, int round) {
  if (prefix.empty()) throw std::invalid_argument("verify_parallel: empty context");
  if (batch.tokens.size() != batch.dists.size())
    throw std::invalid_argument("verify_parallel: malformed batch");
  for (const Vec& t : batch.tokens)
    if (t.size() != target.dim())
      throw std::invalid_argument("verify_parallel: token dimension mismatch");

  const RandomSource rr = round_stream(root, round);
  const NoiseSchedule sched = target_schedule(cfg);
  const int len = static_cast<int>(batch.tokens.size());
  const std::size_t base = prefix.size();

  VerificationResult ver;
  std::vector<Vec> target_vars;
  std::vector<double> log_p(len);
  for (int pos = 1; pos <= len + 1; ++pos) {
    const GaussianParams p = head_dist(target, prefix, cond, cfg);
    ++ver.target_evals;
    GaussianParams final_p = p;
    if (cfg.denoise_steps > 1) {
      // Position len+1 after an early stop gets fresh noise: the dropped
      // token's substream is correlated with the decision to stop.
      RandomSource chain =
          (pos == len + 1 && batch.stopped_early)
              ? rr.substream("chain-fallback")
          : cfg.share_noise
              ? rr.substream("chain", static_cast<std::uint64_t>(pos))
              : rr.substream("chain-indep", static_cast<std::uint64_t>(pos));
      Trajectory traj = sample_token_trajectory(p, sched, chain);
      final_p = traj.final_dist;
      if (target_vars.empty()) target_vars = traj.step_vars;
    }
    ver.target_dists.push_back(final_p);
    if (pos <= len) {
      log_p[pos - 1] = gaussian_log_density(batch.tokens[pos - 1], final_p);
      prefix.push_back(batch.tokens[pos - 1]);
    }
  }

  prefix.resize(base);
  ver.sigma_factor = sigma_factor(batch.step_vars, target_vars);
  ver.ratios.reserve(len);
  for (int i = 0; i < len; ++i) {
    const double lq = gaussian_log_density(batch.tokens[i], batch.dists[i]);
    ver.ratios.push_back(pdf_ratio(log_p[i], lq, ver.sigma_factor, cfg.ratio_cap));
  }
  return ver;
}

}  // namespace

VerificationResult verify_parallel(const ArModel& target, const std::vector<Vec>& ctx,
                                   const Vec& cond, const DraftBatch& batch,
                                   const SpecConfig& cfg, const RandomSource& root,
                                   int round) {
  std::vector<Vec> scratch = ctx;
  return verify_parallel_impl(target, scratch, cond, batch, cfg, root, round);
}

int accept_prefix(const std::vector<double>& ratios, RandomSource rng) {
  for (double rho : ratios)
    if (!std::isfinite(rho) || rho < 0.0)
      throw std::invalid_argument("accept_prefix: ratios must be finite and non-negative");
  std::vector<double> r(ratios.size());
  for (double& u : r) u = rng.uniform();
  for (std::size_t i = 0; i < ratios.size(); ++i)
    if (r[i] > ratios[i]) return static_cast<int>(i);
  return static_cast<int>(ratios.size());
}

ResampleResult resample_rejected(const GaussianParams& p, const GaussianParams& q,
                                 double sigma, const SpecConfig& cfg, RandomSource rng) {
  validate(p);
  validate(q);
  if (p.dim() != q.dim())
    throw std::invalid_argument("resample_rejected: dimension mismatch");
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw std::invalid_argument("resample_rejected: sigma must be positive and finite");
  const double log_sigma = std::log(sigma);
  for (int it = 1; it <= cfg.resample_cap; ++it) {
    const Vec x = sample_gaussian(p, rng);
    const double lp = gaussian_log_density(x, p);
    const double lq = gaussian_log_density(x, q);
    // alpha = max(0, sigma*p - q) / (sigma*p) = 1 - min(1, q / (sigma*p))
    const double t = lq - (log_sigma + lp);
    const double alpha = t >= 0.0 ? 0.0 : 1.0 - std::exp(t);
    if (rng.uniform() < alpha) return {x, it};
  }
  throw std::runtime_error(
      "resample_rejected: iteration cap exceeded; sigma*p barely exceeds q anywhere");
}

double RunMetrics::acceptance_rate() const {
  const double tests = static_cast<double>(accepted + tested_rejections);
  return tests > 0.0 ? static_cast<double>(accepted) / tests : 0.0;
}

double RunMetrics::mean_accepted_len() const {
  return rounds > 0 ? static_cast<double>(accepted) / rounds : 0.0;
}

double RunMetrics::target_evals_per_token() const {
  return emitted > 0 ? static_cast<double>(target_evals) / emitted : 0.0;
}

double RunMetrics::target_rounds_per_token() const {
  return emitted > 0 ? static_cast<double>(target_rounds) / emitted : 0.0;
}

RunResult run_cspd(const ArModel& target, const ArModel& draft, const Vec& condition,
                   int seq_len, const SpecConfig& cfg, std::uint64_t seed) {
  if (seq_len < 1) throw std::invalid_argument("run_cspd: seq_len must be >= 1");
  if (target.dim() != draft.dim())
    throw std::invalid_argument("run_cspd: model dimension mismatch");
  if (condition.size() != target.dim())
    throw std::invalid_argument("run_cspd: condition dimension mismatch");
  validate(cfg, draft.depth());

  const RandomSource root(seed);
  const NoiseSchedule tsched = target_schedule(cfg);
  const Eigen::Index d = target.dim();

  RunResult res;
  RunMetrics& m = res.metrics;
  std::vector<Vec> ctx;
  ctx.reserve(static_cast<std::size_t>(seq_len + cfg.gamma + 3));
  ctx.push_back(Vec::Zero(d));  // BOS anchor

  const int n_pre = static_cast<int>(std::ceil(cfg.prefix_fraction * seq_len));
  for (int k = 0; k < n_pre; ++k) {
    const GaussianParams p = head_dist(target, ctx, condition, cfg);
    RandomSource chain = root.substream("prefill", static_cast<std::uint64_t>(k));
    Trajectory traj = sample_token_trajectory(p, tsched, chain);
    ctx.push_back(traj.sample);
    res.tokens.push_back(traj.sample);
  }
  m.prefill_tokens = n_pre;

  int round = 0;
  while (static_cast<int>(res.tokens.size()) < seq_len) {
    DraftBatch batch =
        draft_generate_impl(draft, ctx, condition, cfg, root, round, &m.draft_evals);
    VerificationResult ver =
        verify_parallel_impl(target, ctx, condition, batch, cfg, root, round);
    const RandomSource rr = round_stream(root, round);
    const int len = static_cast<int>(batch.tokens.size());
    const int n = accept_prefix(ver.ratios, rr.substream("accept"));
    ver.accepted_n = n;

    for (int i = 0; i < n; ++i) {
      ctx.push_back(batch.tokens[i]);
      res.tokens.push_back(batch.tokens[i]);
    }

    RoundTrace tr;
    tr.round = round;
    tr.drafted = len + (batch.stopped_early ? 1 : 0);
    tr.accepted = n;
    tr.stopped_early = batch.stopped_early;
    tr.stop_index = batch.stop_index;
    tr.sigma = ver.sigma_factor;
    tr.ratios = ver.ratios;

    if (n < len) {
      // r in [0,1) can only beat a sub-unit ratio.
      if (!(ver.ratios[n] < 1.0))
        throw std::logic_error("run_cspd: rejected position carries ratio >= 1");
      ResampleResult rs = resample_rejected(ver.target_dists[n], batch.dists[n],
                                            ver.sigma_factor, cfg, rr.substream("resample"));
      ver.resampled = rs.token;
      ctx.push_back(rs.token);
      res.tokens.push_back(rs.token);
      tr.resample_iters = rs.iterations;
      m.tested_rejections += 1;
      m.resampled_tokens += 1;
      m.resample_iters += rs.iterations;
    } else if (cfg.bonus_token) {
      RandomSource brng = rr.substream("bonus");
      const Vec b = gaussian_shift(ver.target_dists[len], brng.normal_vec(d));
      ver.bonus = b;
      ctx.push_back(b);
      res.tokens.push_back(b);
      tr.bonus_emitted = true;
      m.bonus_tokens += 1;
    } else if (len == 0) {
      // Nothing accepted and no bonus: take one token from the target so the
      // round always makes progress.
      RandomSource frng = rr.substream("fallback");
      const Vec b = gaussian_shift(ver.target_dists[0], frng.normal_vec(d));
      ctx.push_back(b);
      res.tokens.push_back(b);
      m.fallback_tokens += 1;
    }

    m.rounds += 1;
    m.drafted += tr.drafted;
    m.accepted += n;
    m.rejected += len - n;
    m.skipped += batch.stopped_early ? 1 : 0;
    m.early_stops += batch.stopped_early ? 1 : 0;
    m.target_rounds += 1;
    m.target_evals += ver.target_evals;
    res.trace.push_back(std::move(tr));
    ++round;
  }

  m.emitted = static_cast<int>(res.tokens.size()) - n_pre;
  if (static_cast<int>(res.tokens.size()) > seq_len) res.tokens.resize(seq_len);
  return res;
}

std::string trace_to_jsonl(const std::vector<RoundTrace>& trace) {
  std::string out;
  for (const RoundTrace& t : trace) {
    nlohmann::ordered_json j;
    j["round"] = t.round;
    j["drafted"] = t.drafted;
    j["accepted"] = t.accepted;
    j["stopped_early"] = t.stopped_early;
    if (t.stop_index)
      j["stop_index"] = *t.stop_index;
    else
      j["stop_index"] = nullptr;
    j["sigma"] = t.sigma;
    j["ratios"] = t.ratios;
    j["resample_iters"] = t.resample_iters;
    j["bonus_emitted"] = t.bonus_emitted;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_trace(const std::string& path, const std::vector<RoundTrace>& trace) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open trace file: " + path);
  f << trace_to_jsonl(trace);
  if (!f) throw std::runtime_error("failed writing trace file: " + path);
}

} // namespace cspd
