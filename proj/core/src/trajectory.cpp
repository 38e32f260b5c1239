#include "cspd/trajectory.hpp"

#include <cmath>

#include "cspd/diffusion.hpp"

namespace cspd {

Trajectory sample_token_trajectory(const GaussianParams& dist,
                                   const NoiseSchedule& sched, RandomSource& rng) {
  validate(dist);
  const int steps = sched.steps();
  const Eigen::Index d = dist.dim();

  Trajectory out;
  if (steps == 1) {
    out.final_dist = dist;
    out.sample = gaussian_shift(dist, rng.normal_vec(d));
    return out;
  }

  const AnalyticDenoiser den(dist, &sched);
  const double a_last = sched.alpha_bar(steps);
  GaussianParams init;
  init.mean = std::sqrt(a_last) * dist.mean;
  init.var = (a_last * dist.var.array() + (1.0 - a_last)).matrix();
  Vec x = gaussian_shift(init, rng.normal_vec(d));

  out.step_vars.reserve(steps - 1);
  const Vec z = Vec::Zero(d);
  for (int t = steps; t >= 1; --t) {
    const auto step = denoise_step(den, x, t, z, sched, rng.normal_vec(d));
    if (t >= 2)
      out.step_vars.push_back(step.step_dist.var);
    else
      out.final_dist = step.step_dist;
    x = step.x_prev;
  }
  out.sample = x;
  return out;
}

} // namespace cspd
