#include "cspd/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace cspd {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw std::invalid_argument("NoiseSchedule: empty betas");
  alpha_bars_.resize(betas_.size() + 1);
  alpha_bars_[0] = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    if (!(betas_[i] > 0.0 && betas_[i] < 1.0))
      throw std::invalid_argument("NoiseSchedule: betas must lie in (0, 1)");
    alpha_bars_[i + 1] = alpha_bars_[i] * (1.0 - betas_[i]);
  }
}

NoiseSchedule NoiseSchedule::linear(int steps, double beta_lo, double beta_hi) {
  if (steps < 1) throw std::invalid_argument("NoiseSchedule::linear: steps must be >= 1");
  std::vector<double> b(steps);
  if (steps == 1) {
    b[0] = beta_hi;
  } else {
    for (int i = 0; i < steps; ++i)
      b[i] = beta_lo + (beta_hi - beta_lo) * static_cast<double>(i) / (steps - 1);
  }
  return NoiseSchedule(std::move(b));
}

NoiseSchedule NoiseSchedule::uniform_total(int steps, double total) {
  if (steps < 1) throw std::invalid_argument("NoiseSchedule::uniform_total: steps must be >= 1");
  std::vector<double> b(steps, total / steps);
  return NoiseSchedule(std::move(b));
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > steps())
    throw std::out_of_range("NoiseSchedule::beta: step out of range");
  return betas_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps())
    throw std::out_of_range("NoiseSchedule::alpha_bar: step out of range");
  return alpha_bars_[t];
}

double NoiseSchedule::alpha_bar_cont(double t) const {
  if (!(t >= 0.0 && t <= steps()))
    throw std::out_of_range("NoiseSchedule::alpha_bar_cont: t out of range");
  const int lo = static_cast<int>(std::floor(t));
  if (lo == steps()) return alpha_bars_.back();
  const double frac = t - lo;
  return alpha_bars_[lo] * (1.0 - frac) + alpha_bars_[lo + 1] * frac;
}

namespace {
Vec diffuse_at(const Vec& x0, double abar, const Vec& eps) {
  if (x0.size() != eps.size())
    throw std::invalid_argument("forward_diffuse: x0/eps size mismatch");
  return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * eps;
}
} // namespace

Vec forward_diffuse(const Vec& x0, int t, const NoiseSchedule& sched, const Vec& eps) {
  if (t < 1 || t > sched.steps())
    throw std::out_of_range("forward_diffuse: step out of range");
  return diffuse_at(x0, sched.alpha_bar(t), eps);
}

Vec forward_diffuse_cont(const Vec& x0, double t, const NoiseSchedule& sched, const Vec& eps) {
  if (!(t > 0.0 && t <= sched.steps()))
    throw std::out_of_range("forward_diffuse_cont: t out of range");
  return diffuse_at(x0, sched.alpha_bar_cont(t), eps);
}

} // namespace cspd
