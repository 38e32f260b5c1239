#pragma once

#include <vector>

#include "cspd/gaussian.hpp"
#include "cspd/numeric.hpp"

namespace cspd {

// Two-sample sup-CDF distance, O(n log n). Throws on empty or non-finite input.
double ks_statistic(std::vector<double> a, std::vector<double> b);

// Per-coordinate KS, maximized over dimensions.
double ks_statistic(const std::vector<Vec>& a, const std::vector<Vec>& b);

// Integral of min(p(x), q(x)) over the line for 1-D Gaussians, by adaptive
// Simpson quadrature with absolute error well under 1e-6. For equal variances
// this equals 2*Phi(-|mean gap|/2). Errors on dimension > 1.
double expected_acceptance_oracle(const GaussianParams& p, const GaussianParams& q);

} // namespace cspd
