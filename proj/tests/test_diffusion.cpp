#include "doctest.h"

#include <cmath>
#include <stdexcept>

#include "cspd/diffusion.hpp"
#include "cspd/random.hpp"

using namespace cspd;

namespace {

// Denoiser that always predicts the origin. Under it the deterministic steps
// become pure contractions with hand-computable factors.
struct ZeroDenoiser : Denoiser {
  explicit ZeroDenoiser(int d) : d_(d) {}
  Vec predict_x0(const Vec&, double, const Vec&) const override { return Vec::Zero(d_); }
  int dim() const override { return d_; }
  int d_;
};

DiffusionHead affine_head(int dim, int temb, RandomSource& rng) {
  return DiffusionHead(dim, temb, 0, HeadRole::teacher, rng);
}

} // namespace

TEST_CASE("time embedding: unit frequency in the first pair, unit norm per pair") {
  const double t = 2.75;
  const Vec e = time_embedding(t, 8);
  REQUIRE(e.size() == 8);
  CHECK(e[0] == std::sin(t));
  CHECK(e[1] == std::cos(t));
  for (int k = 0; k + 1 < 8; k += 2)
    CHECK(e[k] * e[k] + e[k + 1] * e[k + 1] == doctest::Approx(1.0).epsilon(1e-15));

  const Vec at0 = time_embedding(0.0, 6);
  for (int k = 0; k < 6; ++k) CHECK(at0[k] == ((k % 2 == 0) ? 0.0 : 1.0));

  // Odd width still fills every slot.
  CHECK(time_embedding(1.0, 5).size() == 5);
}

TEST_CASE("time embedding separates grid times") {
  const int dim = 8;
  for (int s = 1; s <= 64; ++s)
    for (int t = s + 1; t <= 64; ++t)
      CHECK((time_embedding(s, dim) - time_embedding(t, dim)).norm() > 1e-9);
}

TEST_CASE("head construction: shapes, zero biases, scale") {
  RandomSource rng(11);
  DiffusionHead aff = affine_head(3, 4, rng);
  CHECK(aff.input_dim() == 10);
  CHECK(aff.w2.rows() == 3);
  CHECK(aff.w2.cols() == 10);
  CHECK(aff.w1.size() == 0);
  CHECK(aff.b1.size() == 0);
  CHECK(aff.b2.isZero(0.0));
  CHECK(aff.hidden() == 0);
  CHECK(aff.stage() == TrainStage::none);

  DiffusionHead mlp(3, 4, 7, HeadRole::student, rng);
  CHECK(mlp.w1.rows() == 7);
  CHECK(mlp.w1.cols() == 10);
  CHECK(mlp.w2.rows() == 3);
  CHECK(mlp.w2.cols() == 7);
  CHECK(mlp.b1.isZero(0.0));
  CHECK(mlp.role() == HeadRole::student);

  DiffusionHead flat(2, 2, 0, HeadRole::teacher, rng, 0.0);
  CHECK(flat.w2.isZero(0.0));
  CHECK(flat.predict_x0(Vec::Ones(2), 1.0, Vec::Ones(2)).isZero(0.0));

  CHECK_THROWS_AS(DiffusionHead(0, 4, 0, HeadRole::teacher, rng), std::invalid_argument);
  CHECK_THROWS_AS(DiffusionHead(3, 0, 0, HeadRole::teacher, rng), std::invalid_argument);
  CHECK_THROWS_AS(DiffusionHead(3, 4, -1, HeadRole::teacher, rng), std::invalid_argument);
}

TEST_CASE("affine head wires [x ; time ; z] in that order") {
  const int d = 2, temb = 3;
  RandomSource rng(13);
  DiffusionHead h = affine_head(d, temb, rng);
  // Rows read x with identity and z with 2*identity; time block silent.
  h.w2.setZero();
  h.w2(0, 0) = 1.0;
  h.w2(1, 1) = 1.0;
  h.w2(0, d + temb) = 2.0;
  h.w2(1, d + temb + 1) = 2.0;
  h.b2 << 0.1, -0.2;

  const Vec x = (Vec(2) << 0.4, -0.7).finished();
  const Vec z = (Vec(2) << 1.5, 0.25).finished();
  const Vec out = h.predict_x0(x, 5.0, z);
  CHECK(out[0] == doctest::Approx(0.4 + 2.0 * 1.5 + 0.1).epsilon(1e-15));
  CHECK(out[1] == doctest::Approx(-0.7 + 2.0 * 0.25 - 0.2).epsilon(1e-15));

  // Turning on one time column shifts the output by exactly that embedding
  // coordinate, so the middle block really is the time embedding.
  const double t = 3.25;
  h.w2(0, d + 1) = 1.0;
  const Vec shifted = h.predict_x0(x, t, z);
  CHECK(shifted[0] - out[0] == doctest::Approx(time_embedding(t, temb)[1]).epsilon(1e-15));

  CHECK_THROWS_AS(h.predict_x0(Vec::Zero(3), 1.0, z), std::invalid_argument);
  CHECK_THROWS_AS(h.predict_x0(x, 1.0, Vec::Zero(1)), std::invalid_argument);
}

TEST_CASE("cached forward matches plain forward and exposes the real activations") {
  const int d = 3, temb = 4, hid = 6;
  RandomSource rng(17);
  DiffusionHead aff = affine_head(d, temb, rng);
  DiffusionHead mlp(d, temb, hid, HeadRole::student, rng);

  const Vec x = rng.normal_vec(d);
  const Vec z = rng.normal_vec(d);
  const double t = 2.5;

  HeadCache ca;
  const Vec ya = aff.predict_x0_cached(x, t, z, ca);
  CHECK((ya - aff.predict_x0(x, t, z)).norm() == 0.0);
  REQUIRE(ca.input.size() == aff.input_dim());
  CHECK((ca.input.head(d) - x).norm() == 0.0);
  CHECK((ca.input.segment(d, temb) - time_embedding(t, temb)).norm() == 0.0);
  CHECK((ca.input.tail(d) - z).norm() == 0.0);
  CHECK(ca.hid.size() == 0);

  HeadCache cm;
  const Vec ym = mlp.predict_x0_cached(x, t, z, cm);
  CHECK((ym - mlp.predict_x0(x, t, z)).norm() == 0.0);
  REQUIRE(cm.hid.size() == hid);
  const Vec hand = (mlp.w1 * cm.input + mlp.b1).array().tanh();
  CHECK((cm.hid - hand).norm() == 0.0);
  CHECK((ym - (mlp.w2 * cm.hid + mlp.b2)).norm() == 0.0);
}

TEST_CASE("head params flatten and restore bitwise") {
  RandomSource rng(19);
  for (int hid : {0, 5}) {
    DiffusionHead h(3, 4, hid, HeadRole::teacher, rng);
    const Vec p = h.flatten_params();
    const Eigen::Index expect =
        hid > 0 ? Eigen::Index(hid * 10 + hid + 3 * hid + 3) : Eigen::Index(3 * 10 + 3);
    REQUIRE(p.size() == expect);

    DiffusionHead other(3, 4, hid, HeadRole::teacher, rng);
    other.set_params(p);
    CHECK((other.flatten_params() - p).norm() == 0.0);
    const Vec x = rng.normal_vec(3), z = rng.normal_vec(3);
    CHECK((other.predict_x0(x, 2.0, z) - h.predict_x0(x, 2.0, z)).norm() == 0.0);

    // First flattened slot is the top-left of the leading weight matrix.
    Vec q = p;
    q[0] += 1.0;
    other.set_params(q);
    if (hid > 0)
      CHECK(other.w1(0, 0) == h.w1(0, 0) + 1.0);
    else
      CHECK(other.w2(0, 0) == h.w2(0, 0) + 1.0);

    CHECK_THROWS_AS(other.set_params(Vec::Zero(p.size() + 1)), std::invalid_argument);
  }
}

TEST_CASE("one-step output law of an affine head") {
  const int d = 2, temb = 3;
  RandomSource rng(23);
  DiffusionHead h = affine_head(d, temb, rng);
  h.w2.setZero();
  h.w2(0, 0) = 1.0;
  h.w2(0, 1) = 2.0;
  h.w2(1, 0) = 3.0;
  h.w2(1, 1) = 4.0;
  h.w2(0, d + temb) = 0.5;  // z coupling shows up in the mean only
  h.b2 << 0.3, -0.1;

  const Vec z = (Vec(2) << 1.0, -2.0).finished();
  const double t = 4.0;
  const GaussianParams g = h.one_step_output_dist(t, z);
  // Mean is the head's response to a zeroed x block.
  CHECK((g.mean - h.predict_x0(Vec::Zero(d), t, z)).norm() == 0.0);
  // Variance collects the squared x-block row entries.
  CHECK(g.var[0] == doctest::Approx(1.0 + 4.0).epsilon(1e-15));
  CHECK(g.var[1] == doctest::Approx(9.0 + 16.0).epsilon(1e-15));

  h.w2.block(0, 0, d, d).setZero();
  CHECK(h.one_step_output_dist(t, z).var[0] == 1e-12);

  DiffusionHead mlp(d, temb, 4, HeadRole::teacher, rng);
  CHECK_THROWS_AS(mlp.one_step_output_dist(t, z), std::logic_error);
}

TEST_CASE("one-step law matches the sampled law") {
  const int d = 2, temb = 3;
  RandomSource rng(29);
  DiffusionHead h = affine_head(d, temb, rng);
  const Vec z = rng.normal_vec(d);
  const double t = 6.0;
  const GaussianParams g = h.one_step_output_dist(t, z);

  const int n = 20000;
  Vec acc = Vec::Zero(d), acc2 = Vec::Zero(d);
  for (int i = 0; i < n; ++i) {
    const Vec x0 = h.predict_x0(rng.normal_vec(d), t, z);
    acc += x0;
    acc2 += x0.cwiseProduct(x0);
  }
  for (int k = 0; k < d; ++k) {
    const double mean = acc[k] / n;
    const double var = acc2[k] / n - mean * mean;
    CHECK(mean == doctest::Approx(g.mean[k]).epsilon(0.05));
    CHECK(var == doctest::Approx(g.var[k]).epsilon(0.05));
  }
}

TEST_CASE("analytic denoiser: worked point, limits, and ignored condition") {
  // Single step with beta = 0.19: alpha_bar(1) = 0.81.
  NoiseSchedule s({0.19});
  GaussianParams data{Vec::Constant(1, 2.0), Vec::Constant(1, 4.0)};
  AnalyticDenoiser den(data, &s);
  const Vec x = Vec::Constant(1, 1.0);
  // (0.9 * 4 * 1 + 0.19 * 2) / (0.81 * 4 + 0.19) = 3.98 / 3.43
  CHECK(den.predict_x0(x, 1.0, Vec::Zero(1))[0] ==
        doctest::Approx(3.98 / 3.43).epsilon(1e-14));

  // Point-mass data pins the estimate to the mean no matter the observation.
  AnalyticDenoiser point({Vec::Constant(1, -0.4), Vec::Constant(1, 1e-12)}, &s);
  CHECK(point.predict_x0(Vec::Constant(1, 50.0), 1.0, Vec::Zero(1))[0] ==
        doctest::Approx(-0.4).epsilon(1e-9));

  // Diffuse data makes the estimate invert the forward scaling.
  AnalyticDenoiser flat({Vec::Constant(1, 0.0), Vec::Constant(1, 1e12)}, &s);
  CHECK(flat.predict_x0(x, 1.0, Vec::Zero(1))[0] ==
        doctest::Approx(1.0 / 0.9).epsilon(1e-6));

  // The condition input plays no role.
  CHECK(den.predict_x0(x, 1.0, Vec::Constant(1, 9.0))[0] ==
        den.predict_x0(x, 1.0, Vec::Constant(1, -9.0))[0]);

  CHECK_THROWS_AS(AnalyticDenoiser(data, nullptr), std::invalid_argument);
  CHECK_THROWS_AS(
      AnalyticDenoiser({Vec::Constant(1, 0.0), Vec::Constant(1, -1.0)}, &s),
      std::invalid_argument);
}

TEST_CASE("ancestral step: fixed beta variance, shift semantics, range checks") {
  auto s = NoiseSchedule::linear(10);
  GaussianParams data{Vec::Constant(2, 0.5), Vec::Constant(2, 1.0)};
  AnalyticDenoiser den(data, &s);
  RandomSource rng(31);

  const int t = 7;
  const Vec eps = rng.normal_vec(2);
  const Vec xa = rng.normal_vec(2);
  const Vec xb = 10.0 * rng.normal_vec(2);
  const DenoiseStepResult ra = denoise_step(den, xa, t, Vec::Zero(2), s, eps);
  const DenoiseStepResult rb = denoise_step(den, xb, t, Vec::Zero(2), s, eps);

  // Step variance comes from the schedule alone.
  CHECK((ra.step_dist.var.array() == s.beta(t)).all());
  CHECK((rb.step_dist.var - ra.step_dist.var).norm() == 0.0);
  // The sample is the transition mean shifted by sqrt(beta) * eps.
  CHECK((ra.x_prev - ra.step_dist.mean - std::sqrt(s.beta(t)) * eps).norm() < 1e-15);

  // Same inputs, same outputs.
  const DenoiseStepResult again = denoise_step(den, xa, t, Vec::Zero(2), s, eps);
  CHECK((again.x_prev - ra.x_prev).norm() == 0.0);

  CHECK_THROWS_AS(denoise_step(den, xa, 0, Vec::Zero(2), s, eps), std::out_of_range);
  CHECK_THROWS_AS(denoise_step(den, xa, 11, Vec::Zero(2), s, eps), std::out_of_range);
  CHECK_THROWS_AS(denoise_step(den, Vec::Zero(3), t, Vec::Zero(2), s, eps),
                  std::invalid_argument);
}

TEST_CASE("ddim step: exact landing at t=1 and zero-denoiser contraction") {
  auto s = NoiseSchedule::linear(8);
  GaussianParams data{Vec::Constant(1, 0.3), Vec::Constant(1, 0.25)};
  AnalyticDenoiser den(data, &s);
  const Vec x = Vec::Constant(1, 1.1);

  // alpha_bar(0) = 1, so the last step returns the x0 prediction itself.
  CHECK((ddim_step(den, x, 1.0, Vec::Zero(1), s) - den.predict_x0(x, 1.0, Vec::Zero(1)))
            .norm() < 1e-15);

  ZeroDenoiser zero(1);
  const double a = s.alpha_bar_cont(5.0), ap = s.alpha_bar_cont(4.0);
  const Vec stepped = ddim_step(zero, x, 5.0, Vec::Zero(1), s);
  CHECK(stepped[0] ==
        doctest::Approx(x[0] * std::sqrt((1.0 - ap) / (1.0 - a))).epsilon(1e-15));

  CHECK_THROWS_AS(ddim_step(den, x, 0.5, Vec::Zero(1), s), std::out_of_range);
  CHECK_THROWS_AS(ddim_step(den, x, 8.5, Vec::Zero(1), s), std::out_of_range);
}

TEST_CASE("flow step reduces to ddim when the epsilon field is constant") {
  // The zero denoiser gives eps(x, t) = x / sqrt(1 - abar(t)), which is
  // constant along its own flow, so the midpoint correction changes nothing.
  auto s = NoiseSchedule::linear(8);
  ZeroDenoiser zero(2);
  RandomSource rng(37);
  const Vec x = rng.normal_vec(2);
  for (double t : {2.0, 5.0, 8.0})
    CHECK((ode_step(zero, x, t, Vec::Zero(2), s) -
           ddim_step(zero, x, t, Vec::Zero(2), s))
              .norm() < 1e-14);

  CHECK_THROWS_AS(ode_step(zero, x, 0.5, Vec::Zero(2), s), std::out_of_range);
  CHECK_THROWS_AS(ode_step(zero, x, 9.0, Vec::Zero(2), s), std::out_of_range);
}

namespace {

// Exact probability-flow endpoint for Gaussian data: the flow preserves
// quantiles of the Gaussian marginals N(sqrt(abar) m, abar v + 1 - abar), so
// the map from x_T to x_0 is the affine quantile map between the endpoint
// marginals — independent of the path.
double exact_flow_endpoint(double m, double v, double x_T, const NoiseSchedule& s) {
  const double abar = s.alpha_bar(s.steps());
  return m + std::sqrt(v) * (x_T - std::sqrt(abar) * m) /
                 std::sqrt(abar * v + 1.0 - abar);
}

double flow_endpoint_error(double m, double v, double x_T, const NoiseSchedule& s) {
  GaussianParams data{Vec::Constant(1, m), Vec::Constant(1, v)};
  AnalyticDenoiser den(data, &s);
  Vec x = Vec::Constant(1, x_T);
  for (int t = s.steps(); t >= 1; --t) x = ode_step(den, x, t, Vec::Zero(1), s);
  return std::fabs(x[0] - exact_flow_endpoint(m, v, x_T, s));
}

} // namespace

TEST_CASE("probability-flow endpoint hits the closed-form Gaussian transport") {
  const double m = 0.3, v = 0.25, xT = 1.3;

  // 64 steps of the default schedule land within 1e-3 of the exact endpoint.
  const double e64 = flow_endpoint_error(m, v, xT, NoiseSchedule::linear(64));
  CHECK(e64 < 1e-3);

  // Refining the default schedule keeps shrinking the error.
  const double e128 = flow_endpoint_error(m, v, xT, NoiseSchedule::linear(128));
  const double e256 = flow_endpoint_error(m, v, xT, NoiseSchedule::linear(256));
  CHECK(e128 < e64);
  CHECK(e256 < e128);

  // Same story when the total corruption is pinned and only the step count
  // grows: each halving of the step size cuts the error by at least 30%.
  double prev = flow_endpoint_error(m, v, xT, NoiseSchedule::uniform_total(32, 0.3));
  for (int T : {64, 128}) {
    const double err = flow_endpoint_error(m, v, xT, NoiseSchedule::uniform_total(T, 0.3));
    CHECK(err < 0.7 * prev);
    prev = err;
  }
}

TEST_CASE("gaussian score field") {
  GaussianParams g{(Vec(2) << 1.0, -2.0).finished(), (Vec(2) << 4.0, 0.5).finished()};
  const Vec x = (Vec(2) << 3.0, -2.0).finished();
  const Vec sc = gaussian_score(g, x);
  CHECK(sc[0] == doctest::Approx((1.0 - 3.0) / 4.0).epsilon(1e-15));
  CHECK(sc[1] == 0.0);

  // Standard normal: score is -x.
  GaussianParams std2{Vec::Zero(2), Vec::Ones(2)};
  const Vec y = (Vec(2) << 0.7, -1.1).finished();
  CHECK((gaussian_score(std2, y) + y).norm() < 1e-15);

  CHECK_THROWS_AS(gaussian_score(g, Vec::Zero(3)), std::invalid_argument);
}
