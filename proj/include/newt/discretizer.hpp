#pragma once

// Discrete regression in symlog space: targets are spread over two adjacent
// bins, predictions are decoded as the expectation over bin centers.

#include <algorithm>
#include <cmath>
#include <vector>

#include "newt/common.hpp"
#include "newt/nn.hpp"

namespace newt {

struct DiscretizerSpec {
  Index num_bins = 101;
  double vmin = -10.0;
  double vmax = 10.0;
  std::vector<double> bin_centers;

  DiscretizerSpec() : DiscretizerSpec(101, -10.0, 10.0) {}
  DiscretizerSpec(Index bins, double lo, double hi) : num_bins(bins), vmin(lo), vmax(hi) {
    if (bins < 2) throw std::invalid_argument("discretizer needs at least 2 bins");
    if (!(hi > lo)) throw std::invalid_argument("discretizer needs vmax > vmin");
    bin_centers.resize(bins);
    for (Index i = 0; i < bins; ++i)
      bin_centers[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins - 1);
  }

  double bin_width() const { return (vmax - vmin) / static_cast<double>(num_bins - 1); }
};

inline double symlog(double y) { return std::copysign(std::log1p(std::abs(y)), y); }
inline double symexp(double u) { return std::copysign(std::expm1(std::abs(u)), u); }

inline std::vector<double> two_hot(double y, const DiscretizerSpec& spec) {
  std::vector<double> w(spec.num_bins, 0.0);
  const double u = std::clamp(symlog(y), spec.vmin, spec.vmax);
  const double pos = (u - spec.vmin) / spec.bin_width();
  Index k = static_cast<Index>(std::floor(pos));
  k = std::clamp<Index>(k, 0, spec.num_bins - 2);
  const double frac = std::clamp(pos - static_cast<double>(k), 0.0, 1.0);
  w[k] = 1.0 - frac;
  w[k + 1] += frac;
  return w;
}

// Row-wise two-hot encoding of a batch of scalars.
template <typename S>
Matrix<S> two_hot_rows(const Vector<S>& ys, const DiscretizerSpec& spec) {
  Matrix<S> out = Matrix<S>::Zero(ys.size(), spec.num_bins);
  for (Index r = 0; r < ys.size(); ++r) {
    const auto w = two_hot(static_cast<double>(ys(r)), spec);
    for (Index k = 0; k < spec.num_bins; ++k) out(r, k) = static_cast<S>(w[k]);
  }
  return out;
}

struct CeResult {
  double loss;
  std::vector<double> grad_logits;
};

inline CeResult ce_loss(const std::vector<double>& logits, const std::vector<double>& target) {
  if (logits.size() != target.size()) throw DimensionError("ce_loss: length mismatch");
  double tsum = 0.0;
  for (double t : target) tsum += t;
  if (std::abs(tsum - 1.0) > 1e-6) throw ContractError("ce_loss: target does not sum to 1");
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  const double lse = m + std::log(z);
  CeResult r{0.0, std::vector<double>(logits.size())};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    r.loss -= target[i] * (logits[i] - lse);
    r.grad_logits[i] = std::exp(logits[i] - lse) - target[i];
  }
  return r;
}

// Batched cross-entropy: per-row loss, gradient written to `grad` if given.
template <typename S>
Vector<S> ce_loss_rows(const Matrix<S>& logits, const Matrix<S>& target, Matrix<S>* grad) {
  if (logits.rows() != target.rows() || logits.cols() != target.cols())
    throw DimensionError("ce_loss_rows: shape mismatch");
  const Vector<S> m = logits.rowwise().maxCoeff();
  const Matrix<S> shifted = logits.colwise() - m;
  const Vector<S> lse = shifted.array().exp().rowwise().sum().log().matrix();
  const Matrix<S> logp = shifted.colwise() - lse;
  if (grad) *grad = logp.array().exp().matrix() - target;
  return -(target.array() * logp.array()).rowwise().sum().matrix();
}

inline double decode(const std::vector<double>& logits, const DiscretizerSpec& spec) {
  if (static_cast<Index>(logits.size()) != spec.num_bins)
    throw DimensionError("decode: logits length mismatch");
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0, acc = 0.0;
  for (Index i = 0; i < spec.num_bins; ++i) {
    const double p = std::exp(logits[i] - m);
    z += p;
    acc += p * spec.bin_centers[i];
  }
  return symexp(acc / z);
}

template <typename S>
Vector<S> decode_rows(const Matrix<S>& logits, const DiscretizerSpec& spec,
                      Matrix<S>* dvalue_dlogits = nullptr) {
  if (logits.cols() != spec.num_bins) throw DimensionError("decode: logits width mismatch");
  Eigen::Map<const Eigen::VectorXd> cd(spec.bin_centers.data(), spec.num_bins);
  const RowVector<S> centers = cd.cast<S>().transpose();
  const Matrix<S> p = softmax_rows(logits);
  const Vector<S> u = (p.array().rowwise() * centers.array()).rowwise().sum().matrix();
  const Vector<S> e = u.array().abs().exp().matrix();
  // d symexp(u) / du = exp(|u|); du / dlogit_j = p_j (c_j - u).
  if (dvalue_dlogits)
    *dvalue_dlogits = (p.array() * ((-u).replicate(1, p.cols()).rowwise() + centers).array())
                          .colwise() *
                      e.array();
  return (u.array().sign() * (e.array() - S(1))).matrix();
}

}  // namespace newt
