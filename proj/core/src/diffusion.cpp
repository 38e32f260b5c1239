#include "cspd/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace cspd {

Vec time_embedding(double t, int dim) {
  Vec e(dim);
  for (int k = 0; k < dim; ++k) {
    const int pair = k / 2;
    const double freq = std::pow(10000.0, -2.0 * pair / dim);
    e[k] = (k % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
  }
  return e;
}

DiffusionHead::DiffusionHead(int dim, int temb_dim, int hidden, HeadRole role,
                             RandomSource& rng, double scale)
    : dim_(dim), temb_dim_(temb_dim), hidden_(hidden), role_(role) {
  if (dim < 1 || temb_dim < 1 || hidden < 0)
    throw std::invalid_argument("DiffusionHead: bad shape");
  const int in = input_dim();
  auto fill = [&](Mat& m, int rows, int cols) {
    m.resize(rows, cols);
    const double s = scale / std::sqrt(static_cast<double>(cols));
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = s * rng.normal();
  };
  if (hidden_ > 0) {
    fill(w1, hidden_, in);
    b1 = Vec::Zero(hidden_);
    fill(w2, dim_, hidden_);
  } else {
    fill(w2, dim_, in);
  }
  b2 = Vec::Zero(dim_);
}

Vec DiffusionHead::assemble_input(const Vec& x_t, double t, const Vec& z) const {
  if (x_t.size() != dim_ || z.size() != dim_)
    throw std::invalid_argument("DiffusionHead: input dimension mismatch");
  Vec u(input_dim());
  u.head(dim_) = x_t;
  u.segment(dim_, temb_dim_) = time_embedding(t, temb_dim_);
  u.tail(dim_) = z;
  return u;
}

Vec DiffusionHead::predict_x0(const Vec& x_t, double t, const Vec& z) const {
  HeadCache cache;
  return predict_x0_cached(x_t, t, z, cache);
}

Vec DiffusionHead::predict_x0_cached(const Vec& x_t, double t, const Vec& z,
                                     HeadCache& cache) const {
  cache.input = assemble_input(x_t, t, z);
  if (hidden_ == 0) {
    cache.hid.resize(0);
    return w2 * cache.input + b2;
  }
  cache.hid = (w1 * cache.input + b1).array().tanh();
  return w2 * cache.hid + b2;
}

Vec DiffusionHead::flatten_params() const {
  const Eigen::Index n = w1.size() + b1.size() + w2.size() + b2.size();
  Vec p(n);
  Eigen::Index at = 0;
  for (const Mat* m : {&w1, &w2})
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) p[at++] = (*m)(i, j);
  for (const Vec* v : {&b1, &b2})
    for (Eigen::Index i = 0; i < v->size(); ++i) p[at++] = (*v)[i];
  return p;
}

void DiffusionHead::set_params(const Vec& p) {
  const Eigen::Index n = w1.size() + b1.size() + w2.size() + b2.size();
  if (p.size() != n) throw std::invalid_argument("DiffusionHead::set_params: size mismatch");
  Eigen::Index at = 0;
  for (Mat* m : {&w1, &w2})
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) (*m)(i, j) = p[at++];
  for (Vec* v : {&b1, &b2})
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = p[at++];
}

GaussianParams DiffusionHead::one_step_output_dist(double t, const Vec& z) const {
  if (hidden_ != 0)
    throw std::logic_error("one_step_output_dist: head is not affine");
  Vec u = assemble_input(Vec::Zero(dim_), t, z);
  GaussianParams g;
  g.mean = w2 * u + b2;
  g.var = Vec(dim_);
  for (int i = 0; i < dim_; ++i) {
    double s = 0.0;
    for (int k = 0; k < dim_; ++k) s += w2(i, k) * w2(i, k);
    g.var[i] = std::max(s, 1e-12);  // keep the distribution valid at W_x = 0
  }
  return g;
}

AnalyticDenoiser::AnalyticDenoiser(GaussianParams data_dist, const NoiseSchedule* sched)
    : data_(std::move(data_dist)), sched_(sched) {
  validate(data_);
  if (!sched_) throw std::invalid_argument("AnalyticDenoiser: null schedule");
}

Vec AnalyticDenoiser::predict_x0(const Vec& x_t, double t, const Vec& /*z*/) const {
  const double a = sched_->alpha_bar_cont(t);
  Vec out(data_.dim());
  for (Eigen::Index k = 0; k < data_.dim(); ++k) {
    const double v = data_.var[k];
    out[k] = (std::sqrt(a) * v * x_t[k] + (1.0 - a) * data_.mean[k]) /
             (a * v + (1.0 - a));
  }
  return out;
}

DenoiseStepResult denoise_step(const Denoiser& den, const Vec& x_t, int t, const Vec& z,
                               const NoiseSchedule& sched, const Vec& eps) {
  if (t < 1 || t > sched.steps())
    throw std::out_of_range("denoise_step: step out of range");
  if (x_t.size() != den.dim() || eps.size() != den.dim())
    throw std::invalid_argument("denoise_step: dimension mismatch");
  const double beta = sched.beta(t);
  const double abar = sched.alpha_bar(t);
  const double abar_prev = sched.alpha_bar(t - 1);
  const Vec x0_hat = den.predict_x0(x_t, t, z);
  DenoiseStepResult res;
  res.step_dist.mean = (std::sqrt(abar_prev) * beta * x0_hat +
                        std::sqrt(1.0 - beta) * (1.0 - abar_prev) * x_t) /
                       (1.0 - abar);
  res.step_dist.var = Vec::Constant(den.dim(), beta);
  res.x_prev = gaussian_shift(res.step_dist, eps);
  return res;
}

Vec ddim_step(const Denoiser& den, const Vec& x_t, double t, const Vec& z,
              const NoiseSchedule& sched) {
  if (!(t >= 1.0 && t <= sched.steps()))
    throw std::out_of_range("ddim_step: t out of range");
  const double a = sched.alpha_bar_cont(t);
  const double a_prev = sched.alpha_bar_cont(t - 1.0);
  const Vec x0_hat = den.predict_x0(x_t, t, z);
  const Vec eps_hat = (x_t - std::sqrt(a) * x0_hat) / std::sqrt(1.0 - a);
  return std::sqrt(a_prev) * x0_hat + std::sqrt(1.0 - a_prev) * eps_hat;
}

Vec ode_step(const Denoiser& den, const Vec& x_t, double t, const Vec& z,
             const NoiseSchedule& sched) {
  if (!(t >= 1.0 && t <= sched.steps()))
    throw std::out_of_range("ode_step: t out of range");
  // Exponential-integrator step in the epsilon parametrization:
  //   x_r = (sqrt(a_r)/sqrt(a_t)) x_t - [sqrt(a_r (1-a_t)/a_t) - sqrt(1-a_r)] eps
  // (stable at a_r -> 1). Second order: evaluate eps at the midpoint state.
  const double a = sched.alpha_bar_cont(t);
  const auto shoot = [&](double a_r, const Vec& eps) -> Vec {
    const double c = std::sqrt(a_r / a);
    return c * x_t - (c * std::sqrt(1.0 - a) - std::sqrt(1.0 - a_r)) * eps;
  };
  const Vec x0_a = den.predict_x0(x_t, t, z);
  const Vec eps_a = (x_t - std::sqrt(a) * x0_a) / std::sqrt(1.0 - a);
  const double s = t - 0.5;
  const double a_mid = sched.alpha_bar_cont(s);
  const Vec x_mid = shoot(a_mid, eps_a);
  const Vec x0_m = den.predict_x0(x_mid, s, z);
  const Vec eps_m = (x_mid - std::sqrt(a_mid) * x0_m) / std::sqrt(1.0 - a_mid);
  return shoot(sched.alpha_bar_cont(t - 1.0), eps_m);
}

Vec gaussian_score(const GaussianParams& g, const Vec& x) {
  if (x.size() != g.mean.size())
    throw std::invalid_argument("gaussian_score: dimension mismatch");
  return ((g.mean - x).array() / g.var.array()).matrix();
}

} // namespace cspd
