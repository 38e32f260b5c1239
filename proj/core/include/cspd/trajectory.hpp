#pragma once

#include <vector>

#include "cspd/gaussian.hpp"
#include "cspd/random.hpp"
#include "cspd/schedule.hpp"

namespace cspd {

// One token's denoising trajectory.
//
// T == 1 draws the token directly from `dist` (single-step generation from
// pure noise). T > 1 runs an ancestral chain whose transition means are the
// exact Gaussian posteriors for `dist` and whose variances are beta(t)
// straight from the schedule, so per-step covariances depend on the schedule
// alone and the round-level variance-ratio product is position-independent.
struct Trajectory {
  Vec sample;                 // emitted x0
  GaussianParams final_dist;  // conditional distribution the sample came from
  std::vector<Vec> step_vars; // per-step variances, steps t = T..2
};

Trajectory sample_token_trajectory(const GaussianParams& dist,
                                   const NoiseSchedule& sched, RandomSource& rng);

} // namespace cspd
