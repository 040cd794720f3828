#pragma once

// Differentiable building blocks with explicit backward passes. Every forward
// op has a matching *_backward taking the values it recorded.

#include <cmath>

#include "newt/common.hpp"

namespace newt {

inline constexpr double kLayerNormEps = 1e-5;

template <typename S>
Matrix<S> dense_forward(const Matrix<S>& x, const Matrix<S>& w, const Matrix<S>& b) {
  if (x.cols() != w.rows())
    throw DimensionError("dense: input " + shape_str(x) + " vs weight " + shape_str(w));
  if (b.rows() != 1 || b.cols() != w.cols())
    throw DimensionError("dense: bias " + shape_str(b) + " vs weight " + shape_str(w));
  Matrix<S> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <typename S>
struct DenseGrads {
  Matrix<S> dx;
  Matrix<S> dw;
  Matrix<S> db;
};

template <typename S>
DenseGrads<S> dense_backward(const Matrix<S>& x, const Matrix<S>& w, const Matrix<S>& dy) {
  if (dy.rows() != x.rows() || dy.cols() != w.cols())
    throw DimensionError("dense_backward: upstream " + shape_str(dy));
  DenseGrads<S> g;
  g.dx = dy * w.transpose();
  g.dw = x.transpose() * dy;
  g.db = dy.colwise().sum();
  return g;
}

// Values kept by layernorm_forward for the backward pass.
template <typename S>
struct LayerNormCache {
  Matrix<S> xhat;
  Vector<S> rstd;
};

template <typename S>
Matrix<S> layernorm_forward(const Matrix<S>& x, const Matrix<S>& gain, const Matrix<S>& bias,
                            S eps = static_cast<S>(kLayerNormEps),
                            LayerNormCache<S>* cache = nullptr) {
  if (x.cols() == 0) throw DimensionError("layernorm: zero-width input");
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols())
    throw DimensionError("layernorm: gain/bias must be 1x" + std::to_string(x.cols()));
  const Vector<S> mean = x.rowwise().mean();
  Matrix<S> xhat = x.colwise() - mean;
  Vector<S> rstd = (xhat.array().square().rowwise().mean() + eps).rsqrt().matrix();
  xhat.array().colwise() *= rstd.array();
  Matrix<S> y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename S>
struct LayerNormGrads {
  Matrix<S> dx;
  Matrix<S> dgain;
  Matrix<S> dbias;
};

template <typename S>
LayerNormGrads<S> layernorm_backward(const LayerNormCache<S>& cache, const Matrix<S>& gain,
                                     const Matrix<S>& dy) {
  if (cache.xhat.size() == 0) throw StateError("layernorm_backward before forward");
  if (dy.rows() != cache.xhat.rows() || dy.cols() != cache.xhat.cols())
    throw DimensionError("layernorm_backward: upstream " + shape_str(dy));
  LayerNormGrads<S> g;
  g.dgain = (dy.array() * cache.xhat.array()).colwise().sum();
  g.dbias = dy.colwise().sum();
  const Matrix<S> dxhat = dy.array().rowwise() * gain.row(0).array();
  const Vector<S> mean_d = dxhat.rowwise().mean();
  const Vector<S> mean_dx = (dxhat.array() * cache.xhat.array()).rowwise().mean();
  g.dx = ((dxhat.colwise() - mean_d).array() -
          cache.xhat.array().colwise() * mean_dx.array())
             .colwise() *
         cache.rstd.array();
  return g;
}

template <typename S>
S softplus(S x) {
  if (x > S(20)) return x;
  return std::log1p(std::exp(x));
}

// tanh(softplus(x)) = n / (n + 2) with n = e^x (e^x + 2); one exponential per
// element. Inputs above 20 are clamped inside the exponential only, where the
// ratio is already 1 in both precisions.
template <typename S>
Matrix<S> mish(const Matrix<S>& x) {
  const auto e = x.array().min(S(20)).exp();
  const auto n = e * (e + S(2));
  return (x.array() * n / (n + S(2))).matrix();
}

template <typename S>
S mish_grad(S x) {
  const S e = std::exp(std::min(x, S(20)));
  const S n = e * (e + S(2));
  const S t = n / (n + S(2));
  // 1 - t^2 = 4 (n + 1) / (n + 2)^2
  return t + x * (S(4) * (n + S(1)) / ((n + S(2)) * (n + S(2)))) * (e / (S(1) + e));
}

template <typename S>
Matrix<S> mish_backward(const Matrix<S>& x, const Matrix<S>& dy) {
  if (x.rows() != dy.rows() || x.cols() != dy.cols())
    throw DimensionError("mish_backward: shape mismatch");
  const auto e = x.array().min(S(20)).exp();
  const auto n = e * (e + S(2));
  const auto np2 = n + S(2);
  return (dy.array() *
          (n / np2 + x.array() * (S(4) * (n + S(1)) / np2.square()) * (e / (S(1) + e))))
      .matrix();
}

template <typename S>
Matrix<S> softmax_rows(const Matrix<S>& x) {
  const Vector<S> m = x.rowwise().maxCoeff();
  Matrix<S> y = (x.colwise() - m).array().exp().matrix();
  const Vector<S> sum = y.rowwise().sum();
  y.array().colwise() /= sum.array();
  return y;
}

// Takes the softmax output, not its input.
template <typename S>
Matrix<S> softmax_rows_backward(const Matrix<S>& y, const Matrix<S>& dy) {
  if (y.rows() != dy.rows() || y.cols() != dy.cols())
    throw DimensionError("softmax_backward: shape mismatch");
  const Vector<S> dot = (y.array() * dy.array()).rowwise().sum();
  return (y.array() * (dy.colwise() - dot).array()).matrix();
}

// Softmax over consecutive groups of `v` columns, logits divided by `tau`.
template <typename S>
Matrix<S> simplicial(const Matrix<S>& z, Index v, S tau = S(1)) {
  if (v <= 0 || z.cols() % v != 0)
    throw DimensionError("simplicial: width " + std::to_string(z.cols()) +
                         " not divisible by " + std::to_string(v));
  // Row-major storage lets every group be viewed as one row of a
  // (rows * groups) x v matrix.
  const Index groups = z.cols() / v;
  using Block = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Block> in(z.data(), z.rows() * groups, v);
  Matrix<S> y(z.rows(), z.cols());
  Eigen::Map<Block> out(y.data(), z.rows() * groups, v);
  const Vector<S> m = in.rowwise().maxCoeff();
  out = ((in.colwise() - m) / tau).array().exp().matrix();
  const Vector<S> sum = out.rowwise().sum();
  out.array().colwise() /= sum.array();
  return y;
}

template <typename S>
Matrix<S> simplicial_backward(const Matrix<S>& y, const Matrix<S>& dy, Index v, S tau = S(1)) {
  if (y.rows() != dy.rows() || y.cols() != dy.cols())
    throw DimensionError("simplicial_backward: shape mismatch");
  if (v <= 0 || y.cols() % v != 0) throw DimensionError("simplicial_backward: bad group width");
  const Index groups = y.cols() / v;
  using Block = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Block> yy(y.data(), y.rows() * groups, v);
  Eigen::Map<const Block> dd(dy.data(), y.rows() * groups, v);
  Matrix<S> dx(y.rows(), y.cols());
  Eigen::Map<Block> out(dx.data(), y.rows() * groups, v);
  const Vector<S> dot = (yy.array() * dd.array()).rowwise().sum();
  out = (yy.array() * (dd.colwise() - dot).array() / tau).matrix();
  return dx;
}

// Horizontal concatenation of row-aligned blocks.
template <typename S>
Matrix<S> hcat(std::initializer_list<const Matrix<S>*> blocks) {
  Index rows = -1, cols = 0;
  for (const auto* b : blocks) {
    if (b->cols() == 0) continue;
    if (rows >= 0 && b->rows() != rows) throw DimensionError("hcat: row mismatch");
    rows = b->rows();
    cols += b->cols();
  }
  Matrix<S> out(rows < 0 ? 0 : rows, cols);
  Index c = 0;
  for (const auto* b : blocks) {
    if (b->cols() == 0) continue;
    out.middleCols(c, b->cols()) = *b;
    c += b->cols();
  }
  return out;
}

}  // namespace newt
