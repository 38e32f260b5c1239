#include "cspd/gaussian.hpp"

#include <cmath>
#include <stdexcept>

namespace cspd {

void validate(const GaussianParams& g) {
  if (g.mean.size() != g.var.size())
    throw std::invalid_argument("GaussianParams: mean/var size mismatch");
  if (g.mean.size() == 0)
    throw std::invalid_argument("GaussianParams: empty");
  if (!g.mean.allFinite() || !g.var.allFinite())
    throw std::invalid_argument("GaussianParams: non-finite entry");
  if ((g.var.array() <= 0.0).any())
    throw std::invalid_argument("GaussianParams: variance must be strictly positive");
}

double gaussian_log_density(const Vec& x, const GaussianParams& g) {
  validate(g);
  if (x.size() != g.mean.size())
    throw std::invalid_argument("gaussian_log_density: dimension mismatch");
  double acc = 0.0;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double d = x[k] - g.mean[k];
    acc += -0.5 * std::log(2.0 * M_PI * g.var[k]) - d * d / (2.0 * g.var[k]);
  }
  return acc;
}

Vec sample_gaussian(const GaussianParams& g, RandomSource& rng) {
  validate(g);
  return gaussian_shift(g, rng.normal_vec(g.dim()));
}

Vec gaussian_shift(const GaussianParams& g, const Vec& eps) {
  if (eps.size() != g.mean.size())
    throw std::invalid_argument("gaussian_shift: dimension mismatch");
  return g.mean.array() + g.var.array().sqrt() * eps.array();
}

} // namespace cspd
