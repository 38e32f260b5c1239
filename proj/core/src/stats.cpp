#include "cspd/stats.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace cspd {

double ks_statistic(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty())
    throw std::invalid_argument("ks_statistic: empty sample list");
  for (double x : a)
    if (!std::isfinite(x)) throw std::invalid_argument("ks_statistic: non-finite sample");
  for (double x : b)
    if (!std::isfinite(x)) throw std::invalid_argument("ks_statistic: non-finite sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double sup = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    sup = std::max(sup, std::abs(static_cast<double>(i) / na -
                                 static_cast<double>(j) / nb));
  }
  return sup;
}

double ks_statistic(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  if (a.empty() || b.empty())
    throw std::invalid_argument("ks_statistic: empty sample list");
  const Eigen::Index d = a.front().size();
  for (const Vec& v : a)
    if (v.size() != d) throw std::invalid_argument("ks_statistic: ragged samples");
  for (const Vec& v : b)
    if (v.size() != d) throw std::invalid_argument("ks_statistic: ragged samples");
  double worst = 0.0;
  for (Eigen::Index k = 0; k < d; ++k) {
    std::vector<double> ca(a.size()), cb(b.size());
    for (std::size_t s = 0; s < a.size(); ++s) ca[s] = a[s][k];
    for (std::size_t s = 0; s < b.size(); ++s) cb[s] = b[s][k];
    worst = std::max(worst, ks_statistic(std::move(ca), std::move(cb)));
  }
  return worst;
}

namespace {

double simpson_rec(const std::function<double(double)>& f, double a, double m, double b,
                   double fa, double fm, double fb, double whole, double eps, int depth) {
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * eps)
    return left + right + delta / 15.0;
  return simpson_rec(f, a, lm, m, fa, flm, fm, left, 0.5 * eps, depth - 1) +
         simpson_rec(f, m, rm, b, fm, frm, fb, right, 0.5 * eps, depth - 1);
}

double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double eps) {
  const double m = 0.5 * (a + b);
  const double fa = f(a);
  const double fm = f(m);
  const double fb = f(b);
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return simpson_rec(f, a, m, b, fa, fm, fb, whole, eps, 48);
}

} // namespace

double expected_acceptance_oracle(const GaussianParams& p, const GaussianParams& q) {
  validate(p);
  validate(q);
  if (p.dim() != 1 || q.dim() != 1)
    throw std::invalid_argument("expected_acceptance_oracle: 1-D only");
  const double sp = std::sqrt(p.var[0]);
  const double sq = std::sqrt(q.var[0]);
  const double lo = std::min(p.mean[0] - 10.0 * sp, q.mean[0] - 10.0 * sq);
  const double hi = std::max(p.mean[0] + 10.0 * sp, q.mean[0] + 10.0 * sq);
  const auto f = [&](double x) {
    Vec xv(1);
    xv[0] = x;
    return std::exp(std::min(gaussian_log_density(xv, p), gaussian_log_density(xv, q)));
  };
  return adaptive_simpson(f, lo, hi, 1e-9);
}

} // namespace cspd
