#include "cspd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "cspd/entropy.hpp"
#include "cspd/gaussian.hpp"

namespace cspd {

void TrainConfig::validate() const {
  if (epochs_stage1 < 0 || epochs_stage2 < 0)
    throw std::invalid_argument("TrainConfig: negative epoch count");
  if (batch < 1) throw std::invalid_argument("TrainConfig: batch must be >= 1");
  if (!(lr_stage1 > 0.0) || !(lr_gen_stage2 > 0.0) || !(lr_fake_stage2 > 0.0))
    throw std::invalid_argument("TrainConfig: learning rates must be positive");
  if (!(alphaT > 0.0) || !(alpha0 < 1.0) || !(alphaT < alpha0))
    throw std::invalid_argument("TrainConfig: need 0 < alphaT < alpha0 < 1");
  if (total_epochs < 1 || total_epochs < epochs_stage1 + epochs_stage2)
    throw std::invalid_argument("TrainConfig: total_epochs must cover both stages");
  if (!(lr_scale >= 0.0) || !std::isfinite(lr_scale))
    throw std::invalid_argument("TrainConfig: lr_scale must be finite and >= 0");
  if (!(entropy_weight >= 0.0) || !std::isfinite(entropy_weight))
    throw std::invalid_argument("TrainConfig: entropy_weight must be finite and >= 0");
  if (!(smooth_l1_beta > 0.0))
    throw std::invalid_argument("TrainConfig: smooth_l1_beta must be positive");
  if (!(clip_norm >= 0.0) || !std::isfinite(clip_norm))
    throw std::invalid_argument("TrainConfig: clip_norm must be finite and >= 0");
  if (!(alpha_override < 0.0) && !(alpha_override >= 0.0 && alpha_override <= 1.0))
    throw std::invalid_argument("TrainConfig: alpha_override must be negative or in [0,1]");
}

double alpha_schedule(double t, const TrainConfig& cfg) {
  cfg.validate();
  if (!(t >= 0.0) || t > static_cast<double>(cfg.total_epochs))
    throw std::out_of_range("alpha_schedule: epoch outside [0, total_epochs]");
  return cfg.alpha0 - (cfg.alpha0 - cfg.alphaT) * (t / cfg.total_epochs);
}

LossBreakdown total_loss(double reg, double entropy, double dist, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("total_loss: alpha outside [0, 1]");
  LossBreakdown b;
  b.reg = reg;
  b.entropy = entropy;
  b.dist = dist;
  b.alpha = alpha;
  b.total = alpha * (reg + entropy) + (1.0 - alpha) * dist;
  return b;
}

double reg_loss(const ModelOutput& draft_out, const ModelOutput& target_out,
                double beta) {
  if (draft_out.feature.size() != target_out.feature.size())
    throw std::invalid_argument("reg_loss: feature dimension mismatch");
  return smooth_l1(draft_out.feature, target_out.feature, beta);
}

const std::vector<std::string>& loss_registry() {
  static const std::vector<std::string> names{"reg", "entropy", "cd", "dmd"};
  return names;
}

std::vector<TrainSample> make_training_data(const ToyARModel& target, const Vec& cond,
                                            int n, int min_ctx, int max_ctx,
                                            RandomSource& rng) {
  if (n <= 0) throw std::invalid_argument("make_training_data: n must be positive");
  if (min_ctx < 1 || max_ctx < min_ctx)
    throw std::invalid_argument("make_training_data: bad context length range");
  const int d = target.dim();
  if (cond.size() != d)
    throw std::invalid_argument("make_training_data: condition dimension mismatch");

  std::vector<TrainSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int span = max_ctx - min_ctx + 1;
    const int len =
        min_ctx + std::min(span - 1, static_cast<int>(rng.uniform() * span));
    TrainSample s;
    s.cond = cond;
    s.ctx.push_back(Vec::Zero(d));
    while (static_cast<int>(s.ctx.size()) < len) {
      const ModelOutput o = target.forward(s.ctx, cond);
      s.ctx.push_back(gaussian_shift(o.next_dist, rng.normal_vec(d)));
    }
    const ModelOutput o = target.forward(s.ctx, cond);
    s.target_feature = o.feature;
    s.x0 = gaussian_shift(o.next_dist, rng.normal_vec(d));
    out.push_back(std::move(s));
  }
  return out;
}

double cd_loss(const DiffusionHead& student, const DiffusionHead& target_branch,
               const DiffusionHead& teacher, const std::vector<CdSample>& batch,
               const NoiseSchedule& sched, RandomSource rng) {
  if (batch.empty()) throw std::invalid_argument("cd_loss: empty batch");
  const int d = student.dim();
  if (target_branch.dim() != d || teacher.dim() != d)
    throw std::invalid_argument("cd_loss: head dimension mismatch");
  const double t_top = static_cast<double>(sched.steps());

  std::vector<double> vals;
  vals.reserve(batch.size());
  for (const CdSample& s : batch) {
    if (s.x0.size() != d || s.z.size() != d)
      throw std::invalid_argument("cd_loss: sample dimension mismatch");
    const double u = 1.0 + rng.uniform() * (t_top - 1.0);
    const Vec eps = rng.normal_vec(d);
    const Vec x_u = forward_diffuse_cont(s.x0, u, sched, eps);
    const Vec x_prev = ddim_step(teacher, x_u, u, s.z, sched);
    const Vec a = student.predict_x0(x_u, u, s.z);
    const Vec b = target_branch.predict_x0(x_prev, u - 1.0, s.z);
    vals.push_back((a - b).squaredNorm());
  }
  return pairwise_sum(vals) / static_cast<double>(batch.size());
}

double cd_loss(const DiffusionHead& student, const DiffusionHead& teacher,
               const std::vector<CdSample>& batch, const NoiseSchedule& sched,
               RandomSource rng) {
  return cd_loss(student, student, teacher, batch, sched, std::move(rng));
}

std::vector<Vec> dmd_grad(const std::vector<Vec>& x, const ScoreFn& real_score,
                          const ScoreFn& fake_score) {
  if (x.empty()) throw std::invalid_argument("dmd_grad: empty batch");
  std::vector<Vec> g;
  g.reserve(x.size());
  for (const Vec& xi : x) {
    const Vec sr = real_score(xi);
    const Vec sf = fake_score(xi);
    if (sr.size() != xi.size() || sf.size() != xi.size())
      throw std::invalid_argument("dmd_grad: score dimension mismatch");
    if (!sr.allFinite() || !sf.allFinite())
      throw std::runtime_error("dmd_grad: non-finite score");
    g.push_back(-(sr - sf));
  }
  return g;
}

GaussianParams FakeBranch::dist() const {
  GaussianParams g;
  g.mean = mu;
  g.var = logvar.array().exp();
  return g;
}

void FakeBranch::nll_step(const std::vector<Vec>& xs, double lr) {
  if (xs.empty()) return;
  Vec g_mu = Vec::Zero(mu.size());
  Vec g_lv = Vec::Zero(mu.size());
  for (const Vec& x : xs) {
    if (x.size() != mu.size())
      throw std::invalid_argument("FakeBranch::nll_step: sample dimension mismatch");
    const Eigen::ArrayXd diff = (mu - x).array();
    const Eigen::ArrayXd var = logvar.array().exp();
    g_mu.array() += diff / var;
    g_lv.array() += 0.5 - 0.5 * diff.square() / var;
  }
  const double inv_n = 1.0 / static_cast<double>(xs.size());
  mu -= (lr * inv_n) * g_mu;
  logvar -= (lr * inv_n) * g_lv;
}

StepResult joint_step(const ToyARModel& draft, const DiffusionHead& student,
                      const DiffusionHead& teacher, std::span<const TrainSample> batch,
                      const NoiseSchedule& sched, const TrainConfig& cfg, double alpha,
                      DistKind kind, RandomSource& rng, const FakeBranch* fake) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("joint_step: empty batch");
  if (draft.depth() < 2)
    throw std::invalid_argument(
        "joint_step: draft needs >= 2 layers (the entropy term reads the penultimate one)");
  if (student.dim() != draft.dim() || teacher.dim() != draft.dim())
    throw std::invalid_argument("joint_step: head/model dimension mismatch");
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("joint_step: alpha outside [0, 1]");
  if (kind == DistKind::dmd && cfg.learned_fake && fake == nullptr)
    throw std::invalid_argument("joint_step: learned fake branch requested but missing");

  const int d = draft.dim();
  const int pen = draft.depth() - 2;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const double t_top = static_cast<double>(sched.steps());

  StepResult res;
  res.draft_grads = zero_grads(draft);
  res.head_grads = zero_grads(student);
  std::vector<double> regs, ents, dists;
  regs.reserve(batch.size());
  ents.reserve(batch.size());
  dists.reserve(batch.size());

  for (const TrainSample& s : batch) {
    if (s.ctx.empty()) throw std::invalid_argument("joint_step: empty context");
    if (s.cond.size() != d || s.target_feature.size() != d || s.x0.size() != d)
      throw std::invalid_argument("joint_step: sample dimension mismatch");

    ForwardCache cache;
    const ModelOutput out = draft.forward_cached(s.ctx, s.cond, cache);

    const double reg = smooth_l1(out.feature, s.target_feature, cfg.smooth_l1_beta);
    Vec d_feature =
        alpha * smooth_l1_grad(out.feature, s.target_feature, cfg.smooth_l1_beta);

    const double ent = cfg.entropy_weight * entropy_loss(cache.layers[pen].attn);
    std::vector<std::vector<Mat>> d_attn(cache.layers.size());
    if (alpha * cfg.entropy_weight != 0.0) {
      d_attn[pen] = entropy_loss_grad(cache.layers[pen].attn);
      for (Mat& m : d_attn[pen]) m *= alpha * cfg.entropy_weight;
    }

    double dist = 0.0;
    if (kind == DistKind::cd) {
      const double u = 1.0 + rng.uniform() * (t_top - 1.0);
      const Vec eps = rng.normal_vec(d);
      const Vec x_u = forward_diffuse_cont(s.x0, u, sched, eps);
      const Vec x_prev = ddim_step(teacher, x_u, u, out.feature, sched);
      HeadCache hc;
      const Vec pred = student.predict_x0_cached(x_u, u, out.feature, hc);
      const Vec anchor = student.predict_x0(x_prev, u - 1.0, out.feature);  // constant
      const Vec diff = pred - anchor;
      dist = diff.squaredNorm();
      const HeadGrads hg = head_backward(student, hc, 2.0 * diff);
      axpy(res.head_grads, hg, (1.0 - alpha) * inv_n);
      if (cfg.condition_pathway) d_feature += (1.0 - alpha) * hg.d_z;
    } else {
      const Vec x_top = rng.normal_vec(d);
      HeadCache hc;
      const Vec x = student.predict_x0_cached(x_top, t_top, out.feature, hc);
      res.gen_outputs.push_back(x);
      const GaussianParams p_real = teacher.one_step_output_dist(t_top, out.feature);
      const GaussianParams p_fake = cfg.learned_fake
                                        ? fake->dist()
                                        : student.one_step_output_dist(t_top, out.feature);
      const Vec sr = gaussian_score(p_real, x);
      const Vec sf = gaussian_score(p_fake, x);
      if (!sr.allFinite() || !sf.allFinite())
        throw std::runtime_error("joint_step: non-finite score");
      // Logged value: the reverse-KL integrand at x; the applied update is its
      // pathwise x-gradient, the score difference (the critic's own parameter
      // dependence is deliberately dropped).
      dist = gaussian_log_density(x, p_fake) - gaussian_log_density(x, p_real);
      const HeadGrads hg = head_backward(student, hc, -(sr - sf));
      axpy(res.head_grads, hg, (1.0 - alpha) * inv_n);
      if (cfg.condition_pathway) d_feature += (1.0 - alpha) * hg.d_z;
    }

    axpy(res.draft_grads, ar_backward(draft, cache, d_feature, d_attn), inv_n);
    regs.push_back(reg);
    ents.push_back(ent);
    dists.push_back(dist);
  }

  res.loss = total_loss(pairwise_sum(regs) * inv_n, pairwise_sum(ents) * inv_n,
                        pairwise_sum(dists) * inv_n, alpha);
  res.grad_norm = std::sqrt(flatten(res.draft_grads).squaredNorm() +
                            flatten(res.head_grads).squaredNorm());
  return res;
}

namespace {

struct AdamState {
  Vec m, v;
  long t = 0;
};

void apply_update(Vec& p, const Vec& g, double lr, Optimizer opt, AdamState& st) {
  if (opt == Optimizer::sgd) {
    p -= lr * g;
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.95, eps = 1e-8;
  if (st.t == 0) {
    st.m = Vec::Zero(g.size());
    st.v = Vec::Zero(g.size());
  }
  ++st.t;
  st.m = b1 * st.m + (1.0 - b1) * g;
  st.v = (b2 * st.v.array() + (1.0 - b2) * g.array().square()).matrix();
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  p.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + eps);
}

TrainResult run_stage(const char* stage, ToyARModel& draft, DiffusionHead& student,
                      const DiffusionHead& teacher, const std::vector<TrainSample>& data,
                      const NoiseSchedule& sched, const TrainConfig& cfg,
                      RandomSource& rng, DistKind kind, int epochs, int epoch_offset,
                      double lr) {
  if (data.empty())
    throw std::invalid_argument(std::string(stage) + ": empty training set");
  TrainResult res;
  FakeBranch fake(draft.dim());
  AdamState ad_draft, ad_head;

  // Every epoch replays one fixed noise stream, so the stage optimizes a
  // fixed finite objective: losses are comparable across epochs and zero-lr
  // runs come out exactly flat.
  const RandomSource noise = rng.substream("train-noise", epoch_offset);

  for (int e = 0; e < epochs; ++e) {
    const int global = epoch_offset + e;
    const double alpha = cfg.alpha_override >= 0.0
                             ? cfg.alpha_override
                             : alpha_schedule(static_cast<double>(global), cfg);
    double reg = 0, ent = 0, dist = 0, total = 0, gnorm = 0;
    int batches = 0;
    RandomSource erng = noise;

    // Any numeric blowup inside a step -- non-finite losses, or activations
    // overflowing before the loss is even formed -- aborts with the same
    // "diverged" diagnostic. Shapes and config were validated up front, so
    // nothing else raises from inside the loop.
    std::string blew;
    try {
      for (std::size_t at = 0; at < data.size() && blew.empty(); at += cfg.batch) {
        const std::size_t n = std::min<std::size_t>(cfg.batch, data.size() - at);
        const StepResult st =
            joint_step(draft, student, teacher,
                       std::span<const TrainSample>(data.data() + at, n), sched, cfg,
                       alpha, kind, erng, &fake);
        if (!std::isfinite(st.loss.total) || !std::isfinite(st.loss.reg) ||
            !std::isfinite(st.loss.entropy) || !std::isfinite(st.loss.dist) ||
            !std::isfinite(st.grad_norm)) {
          char msg[256];
          std::snprintf(msg, sizeof msg, "reg=%g entropy=%g dist=%g total=%g grad_norm=%g",
                        st.loss.reg, st.loss.entropy, st.loss.dist, st.loss.total,
                        st.grad_norm);
          blew = msg;
          break;
        }

        const double gscale =
            (cfg.clip_norm > 0.0 && st.grad_norm > cfg.clip_norm)
                ? cfg.clip_norm / st.grad_norm
                : 1.0;
        Vec pd = flatten_layer_params(draft);
        apply_update(pd, Vec(flatten(st.draft_grads) * gscale), lr, cfg.optimizer,
                     ad_draft);
        set_layer_params(draft, pd);
        Vec ph = student.flatten_params();
        apply_update(ph, Vec(flatten(st.head_grads) * gscale), lr, cfg.optimizer,
                     ad_head);
        student.set_params(ph);
        if (kind == DistKind::dmd && cfg.learned_fake)
          fake.nll_step(st.gen_outputs, cfg.lr_fake_stage2 * cfg.lr_scale);

        reg += st.loss.reg;
        ent += st.loss.entropy;
        dist += st.loss.dist;
        total += st.loss.total;
        gnorm += st.grad_norm;
        ++batches;
      }
    } catch (const std::invalid_argument& ex) {
      blew = ex.what();
    } catch (const std::runtime_error& ex) {
      blew = ex.what();
    }
    if (!blew.empty()) {
      char msg[64];
      std::snprintf(msg, sizeof msg, "%s diverged at epoch %d: ", stage, global);
      throw std::runtime_error(msg + blew);
    }

    EpochStats row;
    row.epoch = global;
    row.alpha = alpha;
    row.reg = reg / batches;
    row.entropy = ent / batches;
    row.dist = dist / batches;
    row.total = total / batches;
    row.grad_norm = gnorm / batches;
    res.curves.push_back(row);
  }
  return res;
}

} // namespace

TrainResult train_stage1(ToyARModel& draft, DiffusionHead& student,
                         const DiffusionHead& teacher,
                         const std::vector<TrainSample>& data,
                         const NoiseSchedule& sched, const TrainConfig& cfg,
                         RandomSource& rng) {
  cfg.validate();
  TrainResult res =
      run_stage("train_stage1", draft, student, teacher, data, sched, cfg, rng,
                DistKind::cd, cfg.epochs_stage1, 0, cfg.lr_stage1 * cfg.lr_scale);
  student.set_stage(TrainStage::stage1);
  return res;
}

TrainResult train_stage2(ToyARModel& draft, DiffusionHead& student,
                         const DiffusionHead& teacher,
                         const std::vector<TrainSample>& data,
                         const NoiseSchedule& sched, const TrainConfig& cfg,
                         RandomSource& rng) {
  cfg.validate();
  if (teacher.hidden() != 0)
    throw std::invalid_argument(
        "train_stage2: teacher head must be affine (closed-form real score)");
  if (!cfg.learned_fake && student.hidden() != 0)
    throw std::invalid_argument(
        "train_stage2: analytic fake branch needs an affine student; set learned_fake");

  TrainResult res;
  if (student.stage() != TrainStage::stage1) {
    std::cerr << "train_stage2: student head has no stage-1 tag; distribution matching "
                 "without consistency initialization is prone to collapse\n";
    res.warned_missing_stage1 = true;
  }
  TrainResult stage = run_stage("train_stage2", draft, student, teacher, data, sched,
                                cfg, rng, DistKind::dmd, cfg.epochs_stage2,
                                cfg.epochs_stage1, cfg.lr_gen_stage2 * cfg.lr_scale);
  res.curves = std::move(stage.curves);
  student.set_stage(TrainStage::stage2);
  return res;
}

void save_training_log(const std::string& path, const std::vector<EpochStats>& curves) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_training_log: cannot open " + path);
  f << "epoch,alpha,reg,entropy,dist,total,grad_norm\n";
  char buf[256];
  for (const EpochStats& e : curves) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch,
                  e.alpha, e.reg, e.entropy, e.dist, e.total, e.grad_norm);
    f << buf;
  }
  if (!f) throw std::runtime_error("save_training_log: write failed for " + path);
}

double grad_check(const std::function<double(const Vec&)>& loss,
                  const std::function<Vec(const Vec&)>& grad, const Vec& params,
                  int max_coords, double h) {
  if (params.size() == 0)
    throw std::invalid_argument("grad_check: empty parameter vector");
  if (max_coords < 1) throw std::invalid_argument("grad_check: max_coords must be >= 1");
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  if (!std::isfinite(loss(params)))
    throw std::runtime_error("grad_check: non-finite loss at the base point");
  const Vec g = grad(params);
  if (g.size() != params.size())
    throw std::invalid_argument("grad_check: gradient size mismatch");

  const Eigen::Index n = params.size();
  const Eigen::Index m = std::min<Eigen::Index>(n, max_coords);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index idx = i * n / m;
    Vec p = params;
    p[idx] = params[idx] + h;
    const double up = loss(p);
    p[idx] = params[idx] - h;
    const double down = loss(p);
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::runtime_error("grad_check: non-finite loss in the probe neighborhood");
    const double num = (up - down) / (2.0 * h);
    const double ana = g[idx];
    const double denom = std::max(std::abs(num), std::abs(ana));
    const double err = denom < 1e-6 ? std::abs(num - ana) : std::abs(num - ana) / denom;
    worst = std::max(worst, err);
  }
  return worst;
}

} // namespace cspd
