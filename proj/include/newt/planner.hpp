#pragma once

// Sampling-based trajectory optimization over a learned (or analytic) model:
// iterative refit of a time-dependent diagonal Gaussian to weighted elites,
// with policy-prior candidates, receding-horizon warm start and bias toward
// the policy distribution early in training.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "newt/common.hpp"
#include "newt/worldmodel.hpp"

namespace newt {

enum class FinalSelection { elite, gaussian };

struct PlannerConfig {
  Index horizon = 3;
  Index iterations = 6;
  Index population = 512;
  Index prior_samples = 24;
  Index elites = 64;
  double std_min = 0.05;
  double std_max = 2.0;
  double temperature = 0.5;
  bool momentum = false;  // accepted for completeness; refits never blend iterations
  bool common_random_numbers = false;
  // Keeps the best candidate of the previous iteration in the pool.
  bool carry_best = true;
  FinalSelection selection = FinalSelection::elite;

  static PlannerConfig paper() { return {}; }
  static PlannerConfig desk() {
    PlannerConfig c;
    c.iterations = 3;
    c.population = 64;
    c.prior_samples = 8;
    c.elites = 8;
    return c;
  }

  void validate() const {
    if (horizon < 1) throw std::invalid_argument("planner.horizon must be >= 1");
    if (iterations < 1) throw std::invalid_argument("planner.iterations must be >= 1");
    if (population < 0 || prior_samples < 0 || population + prior_samples < 1)
      throw std::invalid_argument("planner needs at least one candidate");
    if (elites < 1 || elites > population + prior_samples)
      throw std::invalid_argument("planner.elites must lie in [1, population + prior_samples]");
    if (!(std_min < std_max)) throw std::invalid_argument("planner.std_min must be < std_max");
    if (!(temperature > 0)) throw std::invalid_argument("planner.temperature must be > 0");
    if (momentum) throw std::invalid_argument("planner.momentum is not supported");
  }
};

struct PlanState {
  MatrixD mu;     // horizon x action_dim
  MatrixD sigma;  // horizon x action_dim
  double value_estimate = 0.0;
};

struct BiasSchedule {
  double start = 2e6;
  double end = 12e6;
};

inline double bias_coef(double step, const BiasSchedule& s) {
  if (!(s.start < s.end)) throw std::invalid_argument("bias schedule needs start < end");
  if (step <= s.start) return 1.0;
  if (step >= s.end) return 0.0;
  return 1.0 - (step - s.start) / (s.end - s.start);
}

// Sequences of actions are stored time-major: seq[t] is (candidates x A).
using ActionSeqs = std::vector<MatrixD>;

struct PolicyDistribution {
  MatrixD mean;  // horizon x A, already squashed into [-1, 1]
  MatrixD std;   // horizon x A
};

template <typename M>
concept PlanningModel = requires(const M& m, const ActionSeqs& seqs, Rng& rng, Index n) {
  { m.action_mask() } -> std::convertible_to<RowVectorD>;
  { m.score(seqs, rng) } -> std::convertible_to<VectorD>;
  { m.prior_samples(n, n, rng) } -> std::convertible_to<ActionSeqs>;
  { m.prior_distribution(n) } -> std::convertible_to<PolicyDistribution>;
  { m.prior_action() } -> std::convertible_to<RowVectorD>;
};

// Shifted warm start (or the unconstrained prior), blended toward the policy
// distribution by beta. Masked dims get mu = sigma = 0.
inline PlanState init_distribution(const PlanState* prev, const PolicyDistribution* policy,
                                   double beta, const PlannerConfig& cfg,
                                   const RowVectorD& action_mask) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in [0, 1]");
  const Index H = cfg.horizon, A = action_mask.size();
  PlanState s;
  s.mu = MatrixD::Zero(H, A);
  s.sigma = MatrixD::Constant(H, A, cfg.std_max);
  if (prev && prev->mu.size() != 0) {
    if (prev->mu.cols() != A) throw DimensionError("warm start action width mismatch");
    const Index n = std::min<Index>(H - 1, prev->mu.rows() - 1);
    for (Index t = 0; t < n; ++t) {
      s.mu.row(t) = prev->mu.row(t + 1);
      s.sigma.row(t) = prev->sigma.row(t + 1);
    }
  }
  if (beta > 0.0) {
    if (!policy || policy->mean.rows() < H || policy->mean.cols() != A)
      throw DimensionError("policy distribution must cover the planning horizon");
    s.mu = (1.0 - beta) * s.mu + beta * policy->mean.topRows(H);
    s.sigma = (1.0 - beta) * s.sigma + beta * policy->std.topRows(H);
  }
  s.sigma = s.sigma.cwiseMax(cfg.std_min).cwiseMin(cfg.std_max);
  for (Index j = 0; j < A; ++j)
    if (action_mask(j) == 0.0) {
      s.mu.col(j).setZero();
      s.sigma.col(j).setZero();
    }
  return s;
}

enum class PlanMode { closed, open };

struct PlanResult {
  MatrixD actions;  // 1 x A in closed mode, horizon x A in open mode
  PlanState state;
  std::vector<double> best_elite_score;  // per iteration
  std::vector<double> elite_weights;     // final iteration
  Index nonfinite = 0;
  bool fallback = false;
};

struct PlanOptions {
  PlanMode mode = PlanMode::closed;
  bool deterministic = false;  // return mu instead of sampling
  double beta = 0.0;
};

namespace detail {

inline std::vector<Index> top_k(const VectorD& g, Index k) {
  std::vector<Index> idx;
  for (Index i = 0; i < g.size(); ++i)
    if (std::isfinite(g(i))) idx.push_back(i);
  k = std::min<Index>(k, static_cast<Index>(idx.size()));
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Index a, Index b) {
    return g(a) > g(b) || (g(a) == g(b) && a < b);
  });
  idx.resize(k);
  return idx;
}

}  // namespace detail

// Softmax weights exp((G - G_max) / temperature), normalized.
inline std::vector<double> elite_weights(const std::vector<double>& scores, double temperature) {
  const double gmax = *std::max_element(scores.begin(), scores.end());
  std::vector<double> w(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) sum += w[i] = std::exp((scores[i] - gmax) / temperature);
  for (auto& x : w) x /= sum;
  return w;
}

template <PlanningModel M>
PlanResult plan(const M& model, const PlanState* prev, const PlannerConfig& cfg, Rng& rng,
                const PlanOptions& opt = {}) {
  cfg.validate();
  const RowVectorD mask = model.action_mask();
  const Index H = cfg.horizon, A = mask.size(), N = cfg.population, P = cfg.prior_samples;

  std::optional<PolicyDistribution> pd;
  if (opt.beta > 0.0) pd = model.prior_distribution(H);
  PlanResult res;
  PlanState s = init_distribution(prev, pd ? &*pd : nullptr, opt.beta, cfg, mask);

  const ActionSeqs prior = P > 0 ? model.prior_samples(H, P, rng) : ActionSeqs{};
  ActionSeqs fixed_eps;
  Rng score_seed(rng.next_u64());
  if (cfg.common_random_numbers)
    for (Index t = 0; t < H; ++t) fixed_eps.push_back(rng.normal_matrix<double>(N, A));

  const Index extra = cfg.carry_best ? 1 : 0;
  ActionSeqs cand(H, MatrixD(N + P + extra, A));
  std::optional<RowVectorD> best_seq_flat;  // H*A, previous iteration's best
  std::vector<Index> elites;
  std::vector<double> w;
  VectorD g;
  for (Index it = 0; it < cfg.iterations; ++it) {
    for (Index t = 0; t < H; ++t) {
      const MatrixD eps = cfg.common_random_numbers ? fixed_eps[t] : rng.normal_matrix<double>(N, A);
      MatrixD& c = cand[t];
      for (Index i = 0; i < N; ++i)
        c.row(i) = (s.mu.row(t) + s.sigma.row(t).cwiseProduct(eps.row(i)))
                       .cwiseMax(-1.0)
                       .cwiseMin(1.0)
                       .cwiseProduct(mask);
      if (P > 0) c.middleRows(N, P) = prior[t];
      if (extra) {
        if (best_seq_flat)
          c.row(N + P) = best_seq_flat->segment(t * A, A);
        else
          c.row(N + P) = s.mu.row(t).cwiseMax(-1.0).cwiseMin(1.0).cwiseProduct(mask);
      }
    }
    Rng score_rng = cfg.common_random_numbers ? score_seed : Rng(rng.next_u64());
    g = model.score(cand, score_rng);
    if (g.size() != N + P + extra) throw DimensionError("model.score returned wrong length");
    Index bad = 0;
    for (Index i = 0; i < g.size(); ++i)
      if (!std::isfinite(g(i))) ++bad;
    res.nonfinite += bad;
    elites = detail::top_k(g, cfg.elites);
    if (elites.empty()) {
      res.fallback = true;
      res.actions = model.prior_action();
      if (opt.mode == PlanMode::open) {
        res.actions = MatrixD(H, A);
        res.actions.row(0) = model.prior_action();
        for (Index t = 1; t < H; ++t) res.actions.row(t) = s.mu.row(t);
      }
      res.state = s;
      return res;
    }
    std::vector<double> eg;
    for (Index e : elites) eg.push_back(g(e));
    w = elite_weights(eg, cfg.temperature);
    res.best_elite_score.push_back(eg.front());
    best_seq_flat = RowVectorD(H * A);
    for (Index t = 0; t < H; ++t) best_seq_flat->segment(t * A, A) = cand[t].row(elites.front());

    for (Index t = 0; t < H; ++t) {
      RowVectorD m = RowVectorD::Zero(A), v = RowVectorD::Zero(A);
      for (std::size_t k = 0; k < elites.size(); ++k) m += w[k] * cand[t].row(elites[k]);
      for (std::size_t k = 0; k < elites.size(); ++k)
        v += w[k] * (cand[t].row(elites[k]) - m).array().square().matrix();
      s.mu.row(t) = m;
      s.sigma.row(t) = v.cwiseSqrt().cwiseMax(cfg.std_min).cwiseMin(cfg.std_max);
    }
    for (Index j = 0; j < A; ++j)
      if (mask(j) == 0.0) {
        s.mu.col(j).setZero();
        s.sigma.col(j).setZero();
      }
  }
  s.value_estimate = 0.0;
  for (std::size_t k = 0; k < elites.size(); ++k) s.value_estimate += w[k] * g(elites[k]);
  res.elite_weights = w;

  MatrixD seq(H, A);
  if (opt.deterministic) {
    seq = s.mu;
  } else if (cfg.selection == FinalSelection::elite) {
    const double u = rng.uniform();
    std::size_t k = 0;
    for (double acc = w[0]; k + 1 < w.size() && u >= acc; acc += w[++k]) {
    }
    for (Index t = 0; t < H; ++t) seq.row(t) = cand[t].row(elites[k]);
  } else {
    for (Index t = 0; t < H; ++t) {
      RowVectorD e(A);
      for (Index j = 0; j < A; ++j) e(j) = rng.normal();
      seq.row(t) = (s.mu.row(t) + s.sigma.row(t).cwiseProduct(e)).cwiseMax(-1.0).cwiseMin(1.0);
    }
  }
  for (Index t = 0; t < H; ++t) seq.row(t) = seq.row(t).cwiseProduct(mask);
  res.actions = opt.mode == PlanMode::closed ? MatrixD(seq.topRows(1)) : seq;
  res.state = std::move(s);
  return res;
}

// ---------------------------------------------------------------------------
// Adapter exposing a world model (at one encoded state) to the planner.

template <typename S>
class LatentPlanningModel {
 public:
  LatentPlanningModel(const WorldModel<S>& wm, Matrix<S> z0, Matrix<S> lang, RowVectorD action_mask,
                      double gamma)
      : wm_(wm), z0_(std::move(z0)), lang_(std::move(lang)), mask_(std::move(action_mask)),
        gamma_(gamma) {
    if (z0_.rows() != 1 || lang_.rows() != 1) throw DimensionError("planner adapter takes one state");
  }

  RowVectorD action_mask() const { return mask_; }

  // Discounted decoded rewards along the latent rollout plus the discounted
  // min-of-subset Q at the final latent with a sampled policy action.
  VectorD score(const ActionSeqs& seqs, Rng& rng) const {
    const Index H = static_cast<Index>(seqs.size()), n = seqs.front().rows();
    const auto& c = wm_.config;
    Matrix<S> z = z0_.replicate(n, 1);
    const Matrix<S> g = lang_.replicate(n, 1);
    const Matrix<S> m = mask_.cast<S>();
    VectorD total = VectorD::Zero(n);
    double disc = 1.0;
    for (Index t = 0; t < H; ++t) {
      const Matrix<S> a = apply_mask<S>(seqs[t].cast<S>(), m);
      total += disc * decode_rows(reward_logits(wm_, z, a, g), wm_.disc).template cast<double>();
      z = dynamics_step(wm_, z, a, g);
      disc *= gamma_;
    }
    const auto heads = random_subset(c.q_ensemble, c.q_subset, rng);
    const auto pi = policy_forward(wm_, z, g, m, rng.normal_matrix<S>(n, c.action_dim));
    total += disc * q_min(wm_, wm_.model, heads, z, pi.action, g).template cast<double>();
    return total;
  }

  ActionSeqs prior_samples(Index H, Index n, Rng& rng) const {
    ActionSeqs out;
    Matrix<S> z = z0_.replicate(n, 1);
    const Matrix<S> g = lang_.replicate(n, 1);
    const Matrix<S> m = mask_.cast<S>();
    for (Index t = 0; t < H; ++t) {
      const auto pi = policy_forward(wm_, z, g, m, rng.normal_matrix<S>(n, wm_.config.action_dim));
      out.push_back(pi.action.template cast<double>());
      if (t + 1 < H) z = dynamics_step(wm_, z, pi.action, g);
    }
    return out;
  }

  PolicyDistribution prior_distribution(Index H) const {
    PolicyDistribution d;
    const Index A = wm_.config.action_dim;
    d.mean.resize(H, A);
    d.std.resize(H, A);
    Matrix<S> z = z0_;
    const Matrix<S> m = mask_.cast<S>();
    for (Index t = 0; t < H; ++t) {
      const auto pi = policy_forward(wm_, z, lang_, m, Matrix<S>());
      d.mean.row(t) = pi.mean_action.template cast<double>();
      d.std.row(t) = pi.std.template cast<double>().cwiseProduct(mask_);
      if (t + 1 < H) z = dynamics_step(wm_, z, pi.mean_action, lang_);
    }
    return d;
  }

  RowVectorD prior_action() const {
    const auto pi = policy_forward(wm_, z0_, lang_, Matrix<S>(mask_.cast<S>()), Matrix<S>());
    return pi.mean_action.template cast<double>();
  }

 private:
  const WorldModel<S>& wm_;
  Matrix<S> z0_;
  Matrix<S> lang_;
  RowVectorD mask_;
  double gamma_;
};

}  // namespace newt
