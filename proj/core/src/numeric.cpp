#include "cspd/numeric.hpp"

#include <cmath>
#include <stdexcept>

namespace cspd {

bool all_finite(const Vec& v) { return v.allFinite(); }
bool all_finite(const Mat& m) { return m.allFinite(); }

double pairwise_sum(std::span<const double> xs) {
  const std::size_t n = xs.size();
  if (n == 0) return 0.0;
  if (n <= 8) {
    double acc = xs[0];
    for (std::size_t i = 1; i < n; ++i) acc += xs[i];
    return acc;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

Mat softmax_rows(const Mat& logits) {
  if (!logits.allFinite())
    throw std::invalid_argument("softmax_rows: non-finite logits");
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    Eigen::ArrayXd e = (logits.row(r).array() - m).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

namespace {
void check_pair(const Vec& a, const Vec& b, const char* who) {
  if (a.size() != b.size())
    throw std::invalid_argument(std::string(who) + ": length mismatch");
  if (a.size() == 0)
    throw std::invalid_argument(std::string(who) + ": empty input");
}
} // namespace

double smooth_l1(const Vec& a, const Vec& b, double beta) {
  check_pair(a, b, "smooth_l1");
  if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be > 0");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double e = std::abs(a[i] - b[i]);
    acc += (e < beta) ? 0.5 * e * e / beta : e - 0.5 * beta;
  }
  return acc / static_cast<double>(a.size());
}

Vec smooth_l1_grad(const Vec& a, const Vec& b, double beta) {
  check_pair(a, b, "smooth_l1_grad");
  if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1_grad: beta must be > 0");
  Vec g(a.size());
  const double inv_n = 1.0 / static_cast<double>(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double e = a[i] - b[i];
    g[i] = inv_n * ((std::abs(e) < beta) ? e / beta : (e > 0 ? 1.0 : -1.0));
  }
  return g;
}

} // namespace cspd
