#pragma once

#include <functional>

#include "cspd/gaussian.hpp"
#include "cspd/numeric.hpp"
#include "cspd/random.hpp"
#include "cspd/schedule.hpp"

namespace cspd {

// Anything that can turn a noisy latent into an x0 estimate. t is continuous
// so probability-flow steps can land between grid points.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Vec predict_x0(const Vec& x_t, double t, const Vec& z) const = 0;
  virtual int dim() const = 0;
};

enum class HeadRole : std::uint8_t { teacher = 0, student = 1 };
enum class TrainStage : std::uint8_t { none = 0, stage1 = 1, stage2 = 2 };

struct HeadCache {
  Vec input;
  Vec hid;  // post-tanh, empty for affine heads
};

// Small feed-forward denoiser on [x_t ; time embedding ; condition z].
// hidden == 0 gives a head affine in its input, whose one-step output
// distribution under standard normal noise is exactly Gaussian.
class DiffusionHead : public Denoiser {
 public:
  DiffusionHead(int dim, int temb_dim, int hidden, HeadRole role, RandomSource& rng,
                double scale = 1.0);
  DiffusionHead() = default;

  Vec predict_x0(const Vec& x_t, double t, const Vec& z) const override;
  Vec predict_x0_cached(const Vec& x_t, double t, const Vec& z, HeadCache& cache) const;
  int dim() const override { return dim_; }

  int input_dim() const { return 2 * dim_ + temb_dim_; }
  int hidden() const { return hidden_; }
  int temb_dim() const { return temb_dim_; }
  HeadRole role() const { return role_; }
  TrainStage stage() const { return stage_; }
  void set_stage(TrainStage s) { stage_ = s; }

  Vec flatten_params() const;
  void set_params(const Vec& p);

  // Exact output distribution of x0 = head(eps, t, z), eps ~ N(0, I).
  // Affine heads only; throws std::logic_error otherwise.
  GaussianParams one_step_output_dist(double t, const Vec& z) const;

  Mat w1, w2;
  Vec b1, b2;

 private:
  Vec assemble_input(const Vec& x_t, double t, const Vec& z) const;
  int dim_ = 0, temb_dim_ = 0, hidden_ = 0;
  HeadRole role_ = HeadRole::teacher;
  TrainStage stage_ = TrainStage::none;
};

Vec time_embedding(double t, int dim);

// Closed-form exact denoiser for diagonal-Gaussian data: the posterior mean
// E[x0 | x_t] under the schedule. The condition input is ignored.
class AnalyticDenoiser : public Denoiser {
 public:
  AnalyticDenoiser(GaussianParams data_dist, const NoiseSchedule* sched);
  Vec predict_x0(const Vec& x_t, double t, const Vec& z) const override;
  int dim() const override { return static_cast<int>(data_.dim()); }

 private:
  GaussianParams data_;
  const NoiseSchedule* sched_;
};

struct DenoiseStepResult {
  Vec x_prev;
  GaussianParams step_dist;  // transition the sample was drawn from
};

// One ancestral step t -> t-1. The transition mean blends the x0 estimate
// with x_t (posterior-mean form); the variance is beta(t) straight from the
// schedule, so per-step covariances never depend on the trajectory.
DenoiseStepResult denoise_step(const Denoiser& den, const Vec& x_t, int t, const Vec& z,
                               const NoiseSchedule& sched, const Vec& eps);

// One deterministic DDIM step from t to t-1: first order, a single denoiser
// evaluation. Used as the teacher map in consistency distillation where a
// cheap stable step matters more than integration accuracy. Real t in [1, T].
Vec ddim_step(const Denoiser& den, const Vec& x_t, double t, const Vec& z,
              const NoiseSchedule& sched);

// One second-order (midpoint exponential-integrator) step of the
// probability-flow ODE from t to t-1, with the denoiser's prediction as the
// score surrogate. Real t in [1, T].
Vec ode_step(const Denoiser& den, const Vec& x_t, double t, const Vec& z,
             const NoiseSchedule& sched);

using ScoreFn = std::function<Vec(const Vec&)>;

Vec gaussian_score(const GaussianParams& g, const Vec& x);

} // namespace cspd
