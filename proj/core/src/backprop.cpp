#include "cspd/backprop.hpp"

#include <cmath>
#include <stdexcept>

namespace cspd {

ModelGrads zero_grads(const ToyARModel& m) {
  ModelGrads g;
  g.layers.resize(m.layers().size());
  for (auto& l : g.layers) {
    l.wq = Mat::Zero(m.dim(), m.dim());
    l.wk = Mat::Zero(m.dim(), m.dim());
    l.wv = Mat::Zero(m.dim(), m.dim());
  }
  return g;
}

void axpy(ModelGrads& into, const ModelGrads& g, double scale) {
  if (into.layers.size() != g.layers.size())
    throw std::invalid_argument("axpy: layer count mismatch");
  for (std::size_t l = 0; l < g.layers.size(); ++l) {
    into.layers[l].wq += scale * g.layers[l].wq;
    into.layers[l].wk += scale * g.layers[l].wk;
    into.layers[l].wv += scale * g.layers[l].wv;
  }
}

void scale(ModelGrads& g, double s) {
  for (auto& l : g.layers) {
    l.wq *= s;
    l.wk *= s;
    l.wv *= s;
  }
}

Vec flatten(const ModelGrads& g) {
  Eigen::Index n = 0;
  for (const auto& l : g.layers) n += l.wq.size() + l.wk.size() + l.wv.size();
  Vec out(n);
  Eigen::Index at = 0;
  for (const auto& l : g.layers) {
    for (const Mat* w : {&l.wq, &l.wk, &l.wv})
      for (Eigen::Index i = 0; i < w->rows(); ++i)
        for (Eigen::Index j = 0; j < w->cols(); ++j) out[at++] = (*w)(i, j);
  }
  return out;
}

ModelGrads ar_backward(const ToyARModel& m, const ForwardCache& cache,
                       const Vec& d_feature,
                       const std::vector<std::vector<Mat>>& d_attn) {
  const int d = m.dim();
  const int heads = m.heads();
  const int dh = d / heads;
  const std::size_t depth = m.layers().size();
  if (cache.layers.size() != depth)
    throw std::invalid_argument("ar_backward: cache depth mismatch");
  if (d_feature.size() != d)
    throw std::invalid_argument("ar_backward: feature gradient dimension mismatch");
  if (!d_attn.empty() && d_attn.size() != depth)
    throw std::invalid_argument("ar_backward: attention gradient layer count mismatch");

  const Eigen::Index rows = cache.embedded.rows();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  ModelGrads g = zero_grads(m);
  Mat dh_acc = Mat::Zero(rows, d);  // gradient on the running hidden state
  dh_acc.row(rows - 1) = d_feature.transpose();

  for (int l = static_cast<int>(depth) - 1; l >= 0; --l) {
    const LayerCache& lc = cache.layers[l];
    Mat dq = Mat::Zero(rows, d), dk = Mat::Zero(rows, d), dv = Mat::Zero(rows, d);
    for (int hd = 0; hd < heads; ++hd) {
      const Mat& a = lc.attn[hd];
      const Mat d_out = dh_acc.middleCols(hd * dh, dh);  // copy: dh_acc mutates below
      Mat da = d_out * lc.v[hd].transpose();
      if (!d_attn.empty() && !d_attn[l].empty()) {
        if (d_attn[l][hd].rows() != rows || d_attn[l][hd].cols() != rows)
          throw std::invalid_argument("ar_backward: attention gradient shape mismatch");
        da += d_attn[l][hd];
      }
      Mat ds(rows, rows);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const double dot = (da.row(r).array() * a.row(r).array()).sum();
        ds.row(r) = a.row(r).array() * (da.row(r).array() - dot);
      }
      ds *= inv_sqrt_dh;
      dq.middleCols(hd * dh, dh) = ds * lc.k[hd];
      dk.middleCols(hd * dh, dh) = ds.transpose() * lc.q[hd];
      dv.middleCols(hd * dh, dh) = a.transpose() * d_out;
    }
    g.layers[l].wq = lc.input.transpose() * dq;
    g.layers[l].wk = lc.input.transpose() * dk;
    g.layers[l].wv = lc.input.transpose() * dv;
    dh_acc += dq * m.layers()[l].wq.transpose() + dk * m.layers()[l].wk.transpose() +
              dv * m.layers()[l].wv.transpose();
  }
  return g;
}

HeadGrads zero_grads(const DiffusionHead& head) {
  HeadGrads g;
  g.w1 = Mat::Zero(head.w1.rows(), head.w1.cols());
  g.b1 = Vec::Zero(head.b1.size());
  g.w2 = Mat::Zero(head.w2.rows(), head.w2.cols());
  g.b2 = Vec::Zero(head.b2.size());
  g.d_x = Vec::Zero(head.dim());
  g.d_z = Vec::Zero(head.dim());
  return g;
}

void axpy(HeadGrads& into, const HeadGrads& g, double scale) {
  into.w1 += scale * g.w1;
  into.b1 += scale * g.b1;
  into.w2 += scale * g.w2;
  into.b2 += scale * g.b2;
  into.d_x += scale * g.d_x;
  into.d_z += scale * g.d_z;
}

Vec flatten(const HeadGrads& g) {
  Vec out(g.w1.size() + g.b1.size() + g.w2.size() + g.b2.size());
  Eigen::Index at = 0;
  for (const Mat* m : {&g.w1, &g.w2})
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) out[at++] = (*m)(i, j);
  for (const Vec* v : {&g.b1, &g.b2})
    for (Eigen::Index i = 0; i < v->size(); ++i) out[at++] = (*v)[i];
  return out;
}

HeadGrads head_backward(const DiffusionHead& head, const HeadCache& cache,
                        const Vec& d_out) {
  const int d = head.dim();
  if (cache.input.size() != head.input_dim())
    throw std::invalid_argument("head_backward: cache input size mismatch");
  if (d_out.size() != d)
    throw std::invalid_argument("head_backward: output gradient dimension mismatch");

  HeadGrads g;
  Vec du;
  if (head.hidden() == 0) {
    g.w1.resize(0, 0);
    g.b1.resize(0);
    g.w2 = d_out * cache.input.transpose();
    g.b2 = d_out;
    du = head.w2.transpose() * d_out;
  } else {
    if (cache.hid.size() != head.hidden())
      throw std::invalid_argument("head_backward: cache hidden size mismatch");
    g.w2 = d_out * cache.hid.transpose();
    g.b2 = d_out;
    const Vec d_pre =
        (head.w2.transpose() * d_out).array() * (1.0 - cache.hid.array().square());
    g.w1 = d_pre * cache.input.transpose();
    g.b1 = d_pre;
    du = head.w1.transpose() * d_pre;
  }
  g.d_x = du.head(d);
  g.d_z = du.tail(d);
  return g;
}

} // namespace cspd
