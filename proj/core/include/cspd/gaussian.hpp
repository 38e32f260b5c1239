#pragma once

#include "cspd/numeric.hpp"
#include "cspd/random.hpp"

namespace cspd {

// Diagonal Gaussian, densities in natural log space throughout.
struct GaussianParams {
  Vec mean;
  Vec var;   // elementwise, strictly positive

  Eigen::Index dim() const { return mean.size(); }
};

// Throws std::invalid_argument on mismatched sizes, non-finite entries or a
// non-positive variance coordinate.
void validate(const GaussianParams& g);

double gaussian_log_density(const Vec& x, const GaussianParams& g);

Vec sample_gaussian(const GaussianParams& g, RandomSource& rng);

// mean + sqrt(var) .* eps for a caller-supplied standard normal draw; the
// shared-noise trajectory paths go through here.
Vec gaussian_shift(const GaussianParams& g, const Vec& eps);

} // namespace cspd
