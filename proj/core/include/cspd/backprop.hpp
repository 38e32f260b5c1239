#pragma once

#include <vector>

#include "cspd/diffusion.hpp"
#include "cspd/model.hpp"

namespace cspd {

// Gradients for one attention block. The Gaussian head is excluded on
// purpose: it is copied from the target at init and stays frozen.
struct LayerGrads {
  Mat wq, wk, wv;
};

struct ModelGrads {
  std::vector<LayerGrads> layers;
};

ModelGrads zero_grads(const ToyARModel& m);
void axpy(ModelGrads& into, const ModelGrads& g, double scale);
void scale(ModelGrads& g, double s);

// Same coordinate order as flatten_layer_params, so the optimizer and the
// finite-difference probes index identically.
Vec flatten(const ModelGrads& g);

// Reverse pass through the residual attention stack. d_feature is the
// upstream gradient on the last-row feature. d_attn, when non-empty, injects
// extra gradient on the softmax outputs (one R x R matrix per head per
// layer; an empty inner vector skips that layer) — this is how the entropy
// term reaches the weights.
ModelGrads ar_backward(const ToyARModel& m, const ForwardCache& cache,
                       const Vec& d_feature,
                       const std::vector<std::vector<Mat>>& d_attn = {});

// Gradients for the denoiser head, plus the input-slot gradients d_x (noisy
// latent) and d_z (condition) so losses can keep flowing into the AR stack.
struct HeadGrads {
  Mat w1, w2;
  Vec b1, b2;
  Vec d_x, d_z;
};

HeadGrads zero_grads(const DiffusionHead& head);
void axpy(HeadGrads& into, const HeadGrads& g, double scale);

// Same coordinate order as DiffusionHead::flatten_params.
Vec flatten(const HeadGrads& g);

HeadGrads head_backward(const DiffusionHead& head, const HeadCache& cache,
                        const Vec& d_out);

} // namespace cspd
