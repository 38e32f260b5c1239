#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

namespace cspd {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Row-stochastic attention weights for one head; rows index query positions.
using AttentionMap = Mat;

bool all_finite(const Vec& v);
bool all_finite(const Mat& m);

// Sums in pairwise (tree) order. Equal-term sums over power-of-two counts
// stay exact, and batch reductions don't depend on accumulation chunking.
double pairwise_sum(std::span<const double> xs);

// Row softmax with max subtraction. Throws std::invalid_argument on
// non-finite input; output rows sum to 1 up to roundoff.
Mat softmax_rows(const Mat& logits);

// Mean-over-coordinates smooth L1 with quadratic/linear transition at beta.
double smooth_l1(const Vec& a, const Vec& b, double beta = 1.0);

// d smooth_l1 / d a, same reduction convention (mean over coordinates).
Vec smooth_l1_grad(const Vec& a, const Vec& b, double beta = 1.0);

} // namespace cspd
