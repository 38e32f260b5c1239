#pragma once

#include <memory>
#include <vector>

#include "cspd/gaussian.hpp"
#include "cspd/numeric.hpp"
#include "cspd/random.hpp"

namespace cspd {

struct ModelOutput {
  Vec feature;                                // last-position feature
  std::vector<std::vector<AttentionMap>> attn;  // [layer][head], each R x R
  GaussianParams next_dist;
};

// Everything the backward pass needs from one forward evaluation.
struct LayerCache {
  Mat input;                    // R x d going into the block
  std::vector<Mat> q, k, v;     // per head, R x d_h
  std::vector<Mat> attn;        // per head, R x R row-stochastic
};
struct ForwardCache {
  Mat embedded;                 // tokens + positions + condition
  std::vector<LayerCache> layers;
  Vec feature;
};

class ArModel {
 public:
  virtual ~ArModel() = default;
  virtual ModelOutput forward(const std::vector<Vec>& ctx, const Vec& cond) const = 0;
  virtual int dim() const = 0;
  virtual int depth() const = 0;
};

struct AttentionBlock {
  Mat wq, wk, wv;  // d x d; heads slice columns
};

struct GaussianHead {
  Mat mean_w;
  Vec mean_b;
  Mat logvar_w;
  Vec logvar_b;
};

// Pre-norm-free residual attention stack over the full prefix (the prefix IS
// the conditioning set; autoregression happens at the sequence level), with
// sinusoidal positions and the condition vector added to every position.
// The head maps the last-position feature to a diagonal Gaussian; log-variance
// is clamped to [-10, 4] so the distribution stays valid under any weights.
class ToyARModel : public ArModel {
 public:
  ToyARModel(int dim, int heads, std::vector<AttentionBlock> layers, GaussianHead head);

  ModelOutput forward(const std::vector<Vec>& ctx, const Vec& cond) const override;
  ModelOutput forward_cached(const std::vector<Vec>& ctx, const Vec& cond,
                             ForwardCache& cache) const;

  int dim() const override { return dim_; }
  int depth() const override { return static_cast<int>(layers_.size()); }
  int heads() const { return heads_; }

  const std::vector<AttentionBlock>& layers() const { return layers_; }
  std::vector<AttentionBlock>& layers() { return layers_; }
  const GaussianHead& head() const { return head_; }
  GaussianHead& head() { return head_; }

  static constexpr double kLogVarLo = -10.0;
  static constexpr double kLogVarHi = 4.0;

 private:
  int dim_;
  int heads_;
  std::vector<AttentionBlock> layers_;
  GaussianHead head_;
};

struct ModelInitOpts {
  double qk_scale = 1.0;     // multiplies the 1/sqrt(d) base scale
  double v_scale = 1.0;
  double head_scale = 1.0;
  double logvar_bias = 0.0;  // constant added to the log-variance bias
};

ToyARModel random_model(int dim, int depth, int heads, RandomSource& rng,
                        const ModelInitOpts& opts = {});

// Value-copies the target's first n_blocks layers and its head.
// Requires 2 <= n_blocks < target.depth().
ToyARModel init_draft_from_target(const ToyARModel& target, int n_blocks);

// Context-independent Gaussian sampler with uniform attention; drops into
// every ArModel slot so closed-form expectations apply.
class AnalyticGaussianModel : public ArModel {
 public:
  explicit AnalyticGaussianModel(GaussianParams dist, int depth = 2);
  ModelOutput forward(const std::vector<Vec>& ctx, const Vec& cond) const override;
  int dim() const override { return static_cast<int>(dist_.dim()); }
  int depth() const override { return depth_; }
  const GaussianParams& dist() const { return dist_; }

 private:
  GaussianParams dist_;
  int depth_;
};

Vec positional_encoding(int position, int dim);

// Layer-parameter flattening (the head is excluded: it is copied from the
// target at init and no loss updates it).
Vec flatten_layer_params(const ToyARModel& m);
void set_layer_params(ToyARModel& m, const Vec& params);

} // namespace cspd
