#pragma once

#include <vector>

#include "cspd/numeric.hpp"

namespace cspd {

// Variance-preserving corruption schedule. Step index convention: step t in
// 1..T carries beta(t); alpha_bar(t) = prod_{s<=t} (1 - beta(s)), alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::vector<double> betas);

  // Evenly spaced betas from beta_lo to beta_hi inclusive.
  static NoiseSchedule linear(int steps, double beta_lo = 1e-4, double beta_hi = 2e-2);
  // Uniform betas summing to `total`; refining steps at fixed total corruption
  // is what step-size convergence checks need.
  static NoiseSchedule uniform_total(int steps, double total);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const;            // t in 1..T
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const;       // t in 0..T
  // Linear interpolation of alpha_bar over real t in [0, T].
  double alpha_bar_cont(double t) const;

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;     // size T+1
};

// sqrt(alpha_bar(t)) x0 + sqrt(1 - alpha_bar(t)) eps, integer t in 1..T.
Vec forward_diffuse(const Vec& x0, int t, const NoiseSchedule& sched, const Vec& eps);

// Same corruption at a continuous interpolation point t in (0, T].
Vec forward_diffuse_cont(const Vec& x0, double t, const NoiseSchedule& sched, const Vec& eps);

} // namespace cspd
