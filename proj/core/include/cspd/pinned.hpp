#pragma once

#include <cstdint>

namespace cspd {

// Fixed toy scenarios with everything but the seed pinned, sized to make the
// training claims measurable in seconds rather than hours.

// A draft whose attention has been sharpened away from its diffuse target,
// then stage-1-trained twice from the same state: once with the entropy term,
// once without it (the A ablation). Rejection rates come from paired engine
// runs against the same target.
struct PinnedEntropyResult {
  std::uint64_t seed = 0;
  double rejection_entropy = 0.0;  // entropy-trained arm
  double rejection_ablated = 0.0;  // entropy term removed
  double relative_reduction = 0.0; // (ablated - entropy) / ablated
};
PinnedEntropyResult pinned_entropy_task(std::uint64_t seed);

// Identical distillation problem attacked twice: consistency-initialized
// stage 2 versus stage 2 from scratch. Distance is the squared gap between
// the student's one-step output law and the teacher's on a fixed probe set;
// a diverged arm reports infinity.
struct PinnedStabilityResult {
  std::uint64_t seed = 0;
  bool staged_diverged = false;
  bool scratch_diverged = false;
  double staged_dist = 0.0;
  double scratch_dist = 0.0;
};
PinnedStabilityResult pinned_stability_task(std::uint64_t seed);

}  // namespace cspd
