#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cspd/backprop.hpp"
#include "cspd/diffusion.hpp"
#include "cspd/model.hpp"
#include "cspd/random.hpp"
#include "cspd/schedule.hpp"

namespace cspd {

enum class Optimizer : std::uint8_t { sgd = 0, adam = 1 };

struct TrainConfig {
  int epochs_stage1 = 20;
  int epochs_stage2 = 10;
  int batch = 32;
  double lr_stage1 = 1e-4;
  double lr_gen_stage2 = 2e-5;
  double lr_fake_stage2 = 1e-5;
  double alpha0 = 0.95;
  double alphaT = 0.05;
  int total_epochs = 30;  // annealing span; covers both stages

  double lr_scale = 1.0;        // one knob scaling every learning rate (0 allowed)
  double entropy_weight = 1.0;  // weight of the entropy term relative to reg
  bool condition_pathway = true;  // distillation gradient flows into the AR feature
  bool learned_fake = false;      // stage 2 fake branch: trained Gaussian instead of
                                  // the student's closed-form output law
  Optimizer optimizer = Optimizer::sgd;
  double smooth_l1_beta = 1.0;
  double clip_norm = 10.0;  // global grad-norm ceiling per step, 0 disables.
                            // Logged grad_norm stays the raw (pre-clip) value.
  double alpha_override = -1.0;  // >= 0 pins the anneal weight to a constant

  void validate() const;
};

// Linear anneal alpha0 -> alphaT over [0, total_epochs]; t is continuous so
// the affine identity can be probed at midpoints.
double alpha_schedule(double t, const TrainConfig& cfg);

struct LossBreakdown {
  double reg = 0.0;
  double entropy = 0.0;
  double dist = 0.0;
  double alpha = 0.0;
  double total = 0.0;
};

// total = alpha * (reg + entropy) + (1 - alpha) * dist; alpha must be in [0, 1].
LossBreakdown total_loss(double reg, double entropy, double dist, double alpha);

double reg_loss(const ModelOutput& draft_out, const ModelOutput& target_out,
                double beta = 1.0);

// The trainer's complete set of loss terms; there is deliberately no
// classification entry.
const std::vector<std::string>& loss_registry();

// One supervised example: a prefix plus what the frozen target model said
// about it (its last-position feature and a next-token sample). Carrying the
// supervision in the data keeps the training loop free of target forwards.
struct TrainSample {
  std::vector<Vec> ctx;
  Vec cond;
  Vec target_feature;
  Vec x0;
};

std::vector<TrainSample> make_training_data(const ToyARModel& target, const Vec& cond,
                                            int n, int min_ctx, int max_ctx,
                                            RandomSource& rng);

struct CdSample {
  Vec x0;
  Vec z;
};

// Consistency loss: diffuse x0 to a uniformly random continuous time u, pull
// x_{u-1} back with one teacher ODE step, and penalize the squared distance
// between the student's two predictions, treating the u-1 branch as a
// constant. target_branch lets gradient probes freeze that constant branch
// at base parameters; the two-argument form uses the student itself.
// Consumes, per sample in order: one uniform (the time), then dim normals.
double cd_loss(const DiffusionHead& student, const DiffusionHead& target_branch,
               const DiffusionHead& teacher, const std::vector<CdSample>& batch,
               const NoiseSchedule& sched, RandomSource rng);
double cd_loss(const DiffusionHead& student, const DiffusionHead& teacher,
               const std::vector<CdSample>& batch, const NoiseSchedule& sched,
               RandomSource rng);

// Reverse-KL gradient field on generator outputs: -(real_score - fake_score)
// per sample. Throws on non-finite scores.
std::vector<Vec> dmd_grad(const std::vector<Vec>& x, const ScoreFn& real_score,
                          const ScoreFn& fake_score);

// Diagonal-Gaussian score model for the learned fake branch: fitted to the
// generator's current outputs by SGD on the negative log-likelihood.
struct FakeBranch {
  Vec mu;
  Vec logvar;

  explicit FakeBranch(int dim) : mu(Vec::Zero(dim)), logvar(Vec::Zero(dim)) {}
  GaussianParams dist() const;
  void nll_step(const std::vector<Vec>& xs, double lr);
};

enum class DistKind : std::uint8_t { cd = 0, dmd = 1 };

// One batch of the annealed joint objective: loss parts (entropy already
// weighted), mean parameter gradients for the draft stack and the student
// head, and the norm of the applied update direction. Pure in the models;
// rng is consumed per sample in order — cd: one uniform then dim normals,
// dmd: dim normals. fake is required when kind == dmd and cfg.learned_fake
// is set.
struct StepResult {
  LossBreakdown loss;
  ModelGrads draft_grads;
  HeadGrads head_grads;
  double grad_norm = 0.0;
  std::vector<Vec> gen_outputs;  // dmd only: generator samples for the critic step
};

StepResult joint_step(const ToyARModel& draft, const DiffusionHead& student,
                      const DiffusionHead& teacher, std::span<const TrainSample> batch,
                      const NoiseSchedule& sched, const TrainConfig& cfg, double alpha,
                      DistKind kind, RandomSource& rng, const FakeBranch* fake = nullptr);

struct EpochStats {
  int epoch = 0;  // global index; stage 2 continues where stage 1 stopped
  double alpha = 0.0;
  double reg = 0.0;
  double entropy = 0.0;
  double dist = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> curves;
  bool warned_missing_stage1 = false;
};

// Stage 1: consistency distillation under the annealed joint loss, epochs
// [0, epochs_stage1). Tags the student head on completion. Aborts with a
// diagnostic if any logged quantity goes non-finite. Noise is drawn from a
// substream of rng fixed per stage and replayed every epoch.
TrainResult train_stage1(ToyARModel& draft, DiffusionHead& student,
                         const DiffusionHead& teacher,
                         const std::vector<TrainSample>& data,
                         const NoiseSchedule& sched, const TrainConfig& cfg,
                         RandomSource& rng);

// Stage 2: distribution matching, continuing the anneal from epochs_stage1.
// Warns (and records) when the student lacks the stage-1 tag — permitted so
// the ablation harness can measure the collapse.
TrainResult train_stage2(ToyARModel& draft, DiffusionHead& student,
                         const DiffusionHead& teacher,
                         const std::vector<TrainSample>& data,
                         const NoiseSchedule& sched, const TrainConfig& cfg,
                         RandomSource& rng);

// CSV: epoch,alpha,reg,entropy,dist,total,grad_norm
void save_training_log(const std::string& path, const std::vector<EpochStats>& curves);

// Central differences (step h per coordinate, at most max_coords coordinates,
// evenly strided) against the supplied analytic gradient; returns the worst
// relative error. Throws if the loss goes non-finite anywhere probed.
double grad_check(const std::function<double(const Vec&)>& loss,
                  const std::function<Vec(const Vec&)>& grad, const Vec& params,
                  int max_coords = 64, double h = 1e-5);

} // namespace cspd
