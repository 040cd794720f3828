#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "newt/common.hpp"

namespace newt {

// Learning-rate tag carried by each parameter array.
enum class LrGroup { base, encoder };

template <typename S>
struct ParamEntry {
  Matrix<S> values;
  Matrix<S> grad;
  Matrix<S> adam_m;
  Matrix<S> adam_v;
  LrGroup group = LrGroup::base;
};

// Named parameter arrays with gradient and Adam moment buffers. Ordered map so
// iteration order (global norms, serialization) is deterministic.
template <typename S>
struct ParamStore {
  std::map<std::string, ParamEntry<S>> entries;
  std::int64_t step_count = 0;

  void add(const std::string& name, Matrix<S> values, LrGroup group = LrGroup::base) {
    if (entries.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    ParamEntry<S> e;
    e.grad = Matrix<S>::Zero(values.rows(), values.cols());
    e.adam_m = e.grad;
    e.adam_v = e.grad;
    e.values = std::move(values);
    e.group = group;
    entries.emplace(name, std::move(e));
  }

  const ParamEntry<S>& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }
  ParamEntry<S>& at(const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
  }

  const Matrix<S>& values(const std::string& name) const { return at(name).values; }

  void zero_grad() {
    for (auto& [_, e] : entries) e.grad.setZero();
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& [_, e] : entries) n += e.values.size();
    return n;
  }

  double grad_norm() const {
    double sq = 0.0;
    for (const auto& [_, e] : entries)
      for (Index i = 0; i < e.grad.size(); ++i) {
        const double g = static_cast<double>(e.grad.data()[i]);
        sq += g * g;
      }
    return std::sqrt(sq);
  }

  // Grad norm restricted to entries whose name starts with `prefix`.
  double grad_norm(const std::string& prefix) const {
    double sq = 0.0;
    for (const auto& [name, e] : entries) {
      if (name.compare(0, prefix.size(), prefix) != 0) continue;
      sq += e.grad.template cast<double>().squaredNorm();
    }
    return std::sqrt(sq);
  }

  template <typename T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    out.step_count = step_count;
    for (const auto& [name, e] : entries) {
      ParamEntry<T> c;
      c.values = e.values.template cast<T>();
      c.grad = e.grad.template cast<T>();
      c.adam_m = e.adam_m.template cast<T>();
      c.adam_v = e.adam_v.template cast<T>();
      c.group = e.group;
      out.entries.emplace(name, std::move(c));
    }
    return out;
  }
};

struct AdamConfig {
  double lr = 3e-4;
  double encoder_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 20.0;
};

// Clips the global gradient norm to `clip_norm`, applies a bias-corrected Adam
// update, increments step_count and zeroes the gradients. Returns the
// pre-clip gradient norm. A gradient whose norm already equals the threshold
// up to float rounding is left untouched.
template <typename S>
double adam_step(ParamStore<S>& store, const AdamConfig& cfg) {
  for (const auto& [name, e] : store.entries)
    if (!e.grad.allFinite()) throw NonFiniteError("nonfinite gradient in parameter " + name);
  const double norm = store.grad_norm();
  const double slack = 4.0 * std::numeric_limits<S>::epsilon();
  const bool clip = cfg.clip_norm > 0.0 && norm > cfg.clip_norm * (1.0 + slack);
  const double scale = clip ? cfg.clip_norm / norm : 1.0;

  store.step_count += 1;
  const double t = static_cast<double>(store.step_count);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  for (auto& [name, e] : store.entries) {
    if (clip) e.grad = (e.grad.template cast<double>() * scale).template cast<S>();
    const S lr = static_cast<S>(e.group == LrGroup::encoder ? cfg.encoder_lr : cfg.lr);
    e.adam_m = b1 * e.adam_m + (S(1) - b1) * e.grad;
    e.adam_v = b2 * e.adam_v + (S(1) - b2) * e.grad.cwiseProduct(e.grad);
    const S c1 = static_cast<S>(bc1), c2 = static_cast<S>(bc2);
    const S eps = static_cast<S>(cfg.eps);
    e.values.array() -=
        lr * (e.adam_m.array() / c1) / ((e.adam_v.array() / c2).sqrt() + eps);
    e.grad.setZero();
  }
  return norm;
}

// target <- momentum * target + (1 - momentum) * online, for every entry of
// `target`. `online` may hold additional entries.
template <typename S>
void ema_update(ParamStore<S>& target, const ParamStore<S>& online, double momentum) {
  const S m = static_cast<S>(momentum);
  for (auto& [name, e] : target.entries) {
    auto it = online.entries.find(name);
    if (it == online.entries.end()) throw std::invalid_argument("ema: online lacks " + name);
    const auto& src = it->second.values;
    if (src.rows() != e.values.rows() || src.cols() != e.values.cols())
      throw DimensionError("ema: shape mismatch for " + name);
    e.values = m * e.values + (S(1) - m) * src;
  }
}

}  // namespace newt
