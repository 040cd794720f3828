#pragma once

// Latent world model: encoder h, latent dynamics d, reward head R, Q ensemble
// with an EMA target copy, and a tanh-Gaussian policy prior p. All components
// are MLPs over concatenated inputs. Losses accumulate parameter gradients
// into the owning ParamStore; callers zero or step the stores.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "newt/batch.hpp"
#include "newt/discretizer.hpp"
#include "newt/mlp.hpp"
#include "newt/param_store.hpp"

namespace newt {

struct WorldModelConfig {
  Index state_dim = 128;
  Index action_dim = 16;
  Index lang_dim = 512;
  Index img_dim = 0;  // 0 disables the image pathway
  Index latent_dim = 512;
  Index mlp_dim = 1024;
  Index enc_dim = 1024;
  Index encoder_layers = 3;
  Index q_ensemble = 5;
  Index q_subset = 2;
  Index horizon = 3;
  double lambda = 0.5;
  double coef_self_pred = 20.0;
  double coef_reward = 0.1;
  double coef_value = 0.1;
  double coef_bc = 10.0;
  double coef_entropy = 1e-4;
  double log_std_min = -10.0;
  double log_std_max = 2.0;
  Index simplicial_v = 8;
  double simplicial_tau = 1.0;
  Index num_bins = 101;
  double vmin = -10.0;
  double vmax = 10.0;
  double target_momentum = 0.99;
  double scale_decay = 0.99;

  static WorldModelConfig paper() { return {}; }

  static WorldModelConfig desk() {
    WorldModelConfig c;
    c.state_dim = 16;
    c.action_dim = 4;
    c.lang_dim = 64;
    c.latent_dim = 64;
    c.mlp_dim = 128;
    c.enc_dim = 128;
    c.encoder_layers = 2;
    c.q_ensemble = 3;
    c.q_subset = 2;
    return c;
  }

  void validate() const {
    if (latent_dim % simplicial_v != 0)
      throw std::invalid_argument("latent_dim must be divisible by simplicial_v");
    if (q_subset < 1 || q_subset > q_ensemble)
      throw std::invalid_argument("q_subset must lie in [1, q_ensemble]");
    if (!(lambda > 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must be in (0, 1]");
    if (encoder_layers < 1) throw std::invalid_argument("encoder_layers must be >= 1");
    if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
    if (!(log_std_min < log_std_max)) throw std::invalid_argument("log-std bounds inverted");
  }
};

// Moving (5%, 95%) percentile range of decoded Q values.
struct RunningScale {
  double p5 = 0.0;
  double p95 = 1.0;
  double decay = 0.99;

  double value() const { return std::max(p95 - p5, 1e-3); }

  template <typename S>
  void update(const Vector<S>& q) {
    if (q.size() == 0) return;
    std::vector<double> v(q.data(), q.data() + q.size());
    std::sort(v.begin(), v.end());
    auto pct = [&](double f) {
      const double pos = f * static_cast<double>(v.size() - 1);
      const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi = std::min(lo + 1, v.size() - 1);
      return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
    };
    p5 = decay * p5 + (1.0 - decay) * pct(0.05);
    p95 = decay * p95 + (1.0 - decay) * pct(0.95);
  }
};

template <typename S>
struct WorldModel {
  WorldModelConfig config;
  DiscretizerSpec disc;
  Mlp<S> encoder;
  Mlp<S> dynamics;
  Mlp<S> reward;
  std::vector<Mlp<S>> qs;
  Mlp<S> policy_net;
  ParamStore<S> model;   // encoder, dynamics, reward, Q ensemble
  ParamStore<S> policy;  // policy prior
  ParamStore<S> target;  // EMA copy of the Q ensemble
  RunningScale scale;

  Index parameter_count() const { return model.parameter_count() + policy.parameter_count(); }
};

template <typename S>
WorldModel<S> make_world_model(const WorldModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  WorldModel<S> wm;
  wm.config = cfg;
  wm.disc = DiscretizerSpec(cfg.num_bins, cfg.vmin, cfg.vmax);
  wm.scale.decay = cfg.scale_decay;
  auto spec = [&](std::vector<Index> widths, FinalActivation act) {
    MlpSpec s;
    s.layer_widths = std::move(widths);
    s.final_activation = act;
    s.simplicial_v = cfg.simplicial_v;
    s.simplicial_tau = cfg.simplicial_tau;
    return s;
  };
  std::vector<Index> enc{cfg.state_dim + cfg.img_dim + cfg.lang_dim};
  for (Index l = 0; l + 1 < cfg.encoder_layers; ++l) enc.push_back(cfg.enc_dim);
  enc.push_back(cfg.latent_dim);
  const Index za = cfg.latent_dim + cfg.action_dim + cfg.lang_dim;
  wm.encoder = Mlp<S>("enc", spec(enc, FinalActivation::simplicial));
  wm.dynamics =
      Mlp<S>("dyn", spec({za, cfg.mlp_dim, cfg.mlp_dim, cfg.latent_dim}, FinalActivation::simplicial));
  wm.reward = Mlp<S>("rew", spec({za, cfg.mlp_dim, cfg.mlp_dim, cfg.num_bins}, FinalActivation::linear));
  for (Index i = 0; i < cfg.q_ensemble; ++i)
    wm.qs.emplace_back("q" + std::to_string(i),
                       spec({za, cfg.mlp_dim, cfg.mlp_dim, cfg.num_bins}, FinalActivation::linear));
  wm.policy_net = Mlp<S>("pi", spec({cfg.latent_dim + cfg.lang_dim, cfg.mlp_dim, cfg.mlp_dim,
                                     2 * cfg.action_dim},
                                    FinalActivation::gaussian_head));
  Rng rng(seed);
  wm.encoder.init(wm.model, rng, LrGroup::encoder);
  wm.dynamics.init(wm.model, rng);
  wm.reward.init(wm.model, rng);
  for (const auto& q : wm.qs) q.init(wm.model, rng);
  wm.policy_net.init(wm.policy, rng);
  for (const auto& q : wm.qs)
    for (const auto& name : q.parameter_names()) wm.target.add(name, wm.model.values(name));
  return wm;
}

template <typename S>
Matrix<S> apply_mask(const Matrix<S>& x, const Matrix<S>& mask) {
  if (mask.size() == 0) return x;
  if (mask.rows() == 1 && x.rows() != 1) return x.array().rowwise() * mask.row(0).array();
  return x.cwiseProduct(mask);
}

// ---------------------------------------------------------------------------
// Components

template <typename S>
Matrix<S> encode(const WorldModel<S>& wm, const Matrix<S>& states, const Matrix<S>& img,
                 const Matrix<S>& lang, const Matrix<S>& state_mask = {},
                 MlpTape<S>* tape = nullptr) {
  const auto& c = wm.config;
  if (states.cols() != c.state_dim) throw DimensionError("encode: state width mismatch");
  if (lang.cols() != c.lang_dim || lang.rows() != states.rows())
    throw DimensionError("encode: language embedding shape mismatch");
  if (img.size() != 0 && (img.cols() != c.img_dim || img.rows() != states.rows()))
    throw DimensionError("encode: image embedding shape mismatch");
  if (img.size() == 0 && c.img_dim != 0)
    throw DimensionError("encode: model expects an image embedding");
  const Matrix<S> s = apply_mask(states, state_mask);
  return wm.encoder.forward(wm.model, hcat<S>({&s, &img, &lang}), tape);
}

template <typename S>
Matrix<S> dynamics_step(const WorldModel<S>& wm, const Matrix<S>& z, const Matrix<S>& a,
                        const Matrix<S>& lang, MlpTape<S>* tape = nullptr) {
  if (z.cols() != wm.config.latent_dim || a.cols() != wm.config.action_dim)
    throw DimensionError("dynamics: latent/action width mismatch");
  return wm.dynamics.forward(wm.model, hcat<S>({&z, &a, &lang}), tape);
}

template <typename S>
Matrix<S> reward_logits(const WorldModel<S>& wm, const Matrix<S>& z, const Matrix<S>& a,
                        const Matrix<S>& lang) {
  return wm.reward.forward(wm.model, hcat<S>({&z, &a, &lang}));
}

// Output of the tanh-squashed diagonal Gaussian policy head.
template <typename S>
struct GaussianHead {
  Matrix<S> mean_raw;
  Matrix<S> ls_raw;
  Matrix<S> log_std;
  Matrix<S> std;
  Matrix<S> noise;
  Matrix<S> pre_tanh;
  Matrix<S> action;       // tanh(mean + std * noise), masked
  Matrix<S> mean_action;  // tanh(mean), masked
  Vector<S> log_prob;     // over valid dims, with tanh correction
};

// `out` holds [mean | log-std pre-activation]. log-std is squashed smoothly
// into [ls_min, ls_max]. Empty `noise` means zero noise.
template <typename S>
GaussianHead<S> gaussian_head_forward(const Matrix<S>& out, const Matrix<S>& mask,
                                      const Matrix<S>& noise, double ls_min, double ls_max) {
  if (out.cols() % 2 != 0) throw DimensionError("gaussian head needs even width");
  const Index a = out.cols() / 2, n = out.rows();
  GaussianHead<S> h;
  h.mean_raw = out.leftCols(a);
  h.ls_raw = out.rightCols(a);
  const S lo = static_cast<S>(ls_min), span = static_cast<S>(ls_max - ls_min);
  h.log_std = (lo + S(0.5) * span * (h.ls_raw.array().tanh() + S(1))).matrix();
  h.std = h.log_std.array().exp().matrix();
  h.noise = noise.size() == 0 ? Matrix<S>::Zero(n, a) : noise;
  if (h.noise.rows() != n || h.noise.cols() != a) throw DimensionError("gaussian head: noise shape");
  const Matrix<S> m = mask.size() == 0 ? Matrix<S>::Ones(n, a)
                      : mask.rows() == 1 ? Matrix<S>(mask.replicate(n, 1))
                                         : mask;
  h.pre_tanh = h.mean_raw + h.std.cwiseProduct(h.noise);
  h.action = h.pre_tanh.array().tanh().matrix().cwiseProduct(m);
  h.mean_action = h.mean_raw.array().tanh().matrix().cwiseProduct(m);
  const S half_log_2pi = static_cast<S>(0.5 * std::log(2.0 * std::numbers::pi));
  const S log2 = static_cast<S>(std::log(2.0));
  h.log_prob.resize(n);
  for (Index r = 0; r < n; ++r) {
    S lp = 0;
    for (Index j = 0; j < a; ++j) {
      if (m(r, j) == S(0)) continue;
      const S e = h.noise(r, j), u = h.pre_tanh(r, j);
      // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
      const S log_jac = S(2) * (log2 - u - softplus(S(-2) * u));
      lp += S(-0.5) * e * e - h.log_std(r, j) - half_log_2pi - log_jac;
    }
    h.log_prob(r) = lp;
  }
  return h;
}

// Gradient of a scalar objective w.r.t. the head's raw output, given its
// gradients w.r.t. action, log_prob and mean_action (any may be empty).
template <typename S>
Matrix<S> gaussian_head_backward(const GaussianHead<S>& h, const Matrix<S>& mask,
                                 const Matrix<S>& d_action, const Vector<S>& d_log_prob,
                                 const Matrix<S>& d_mean_action, double ls_min, double ls_max) {
  const Index n = h.mean_raw.rows(), a = h.mean_raw.cols();
  const Matrix<S> m = mask.size() == 0 ? Matrix<S>::Ones(n, a)
                      : mask.rows() == 1 ? Matrix<S>(mask.replicate(n, 1))
                                         : mask;
  Matrix<S> d_mean = Matrix<S>::Zero(n, a);
  Matrix<S> d_u = Matrix<S>::Zero(n, a);
  Matrix<S> d_ls = Matrix<S>::Zero(n, a);
  const Matrix<S> t_u = h.pre_tanh.array().tanh().matrix();
  if (d_mean_action.size() != 0) {
    const Matrix<S> t_m = h.mean_raw.array().tanh().matrix();
    d_mean.array() += d_mean_action.array() * m.array() * (S(1) - t_m.array().square());
  }
  if (d_action.size() != 0)
    d_u.array() += d_action.array() * m.array() * (S(1) - t_u.array().square());
  if (d_log_prob.size() != 0) {
    for (Index r = 0; r < n; ++r) {
      d_u.row(r).array() += d_log_prob(r) * S(2) * t_u.row(r).array() * m.row(r).array();
      d_ls.row(r).array() -= d_log_prob(r) * m.row(r).array();
    }
  }
  d_mean += d_u;
  d_ls.array() += d_u.array() * h.std.array() * h.noise.array();
  const S span = static_cast<S>(ls_max - ls_min);
  const Matrix<S> d_ls_raw =
      (d_ls.array() * S(0.5) * span * (S(1) - h.ls_raw.array().tanh().square())).matrix();
  Matrix<S> d_out(n, 2 * a);
  d_out.leftCols(a) = d_mean;
  d_out.rightCols(a) = d_ls_raw;
  return d_out;
}

template <typename S>
GaussianHead<S> policy_forward(const WorldModel<S>& wm, const Matrix<S>& z, const Matrix<S>& lang,
                               const Matrix<S>& action_mask, const Matrix<S>& noise,
                               MlpTape<S>* tape = nullptr) {
  if (z.cols() != wm.config.latent_dim) throw DimensionError("policy: latent width mismatch");
  const Matrix<S> out = wm.policy_net.forward(wm.policy, hcat<S>({&z, &lang}), tape);
  return gaussian_head_forward(out, action_mask, noise, wm.config.log_std_min,
                               wm.config.log_std_max);
}

// Draws `k` distinct indices from [0, n).
inline std::vector<Index> random_subset(Index n, Index k, Rng& rng) {
  std::vector<Index> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (Index i = 0; i < k; ++i) {
    const Index j = i + static_cast<Index>(rng.index(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

// Decoded Q values of the given heads, evaluated with `store` (online or
// target parameters); returns per-row minimum and the arg-min position.
template <typename S>
Vector<S> q_min(const WorldModel<S>& wm, const ParamStore<S>& store,
                const std::vector<Index>& heads, const Matrix<S>& z, const Matrix<S>& a,
                const Matrix<S>& lang, std::vector<Index>* argmin = nullptr) {
  const Matrix<S> in = hcat<S>({&z, &a, &lang});
  Vector<S> best;
  if (argmin) argmin->assign(z.rows(), 0);
  for (std::size_t k = 0; k < heads.size(); ++k) {
    const Vector<S> v = decode_rows(wm.qs[heads[k]].forward(store, in), wm.disc);
    if (k == 0) {
      best = v;
      continue;
    }
    for (Index r = 0; r < v.size(); ++r)
      if (v(r) < best(r)) {
        best(r) = v(r);
        if (argmin) (*argmin)[r] = static_cast<Index>(k);
      }
  }
  return best;
}

// One-step TD target r + gamma * min over a random subset of target Q heads,
// evaluated at the next latent with a sampled policy action. No tape is
// recorded, so nothing here contributes gradient.
template <typename S>
Vector<S> td_target(const WorldModel<S>& wm, const Vector<S>& r, const Vector<S>& gamma,
                    const Matrix<S>& z_next, const Matrix<S>& lang, const Matrix<S>& action_mask,
                    Rng& rng) {
  const auto& c = wm.config;
  const auto heads = random_subset(c.q_ensemble, c.q_subset, rng);
  const Matrix<S> noise = rng.normal_matrix<S>(z_next.rows(), c.action_dim);
  const auto pi = policy_forward(wm, z_next, lang, action_mask, noise);
  const Vector<S> q = q_min(wm, wm.target, heads, z_next, pi.action, lang);
  return r + gamma.cwiseProduct(q);
}

// ---------------------------------------------------------------------------
// Model objective

// Stop-gradient quantities of the model objective: target-branch encodings
// of s_{t+1} and TD targets, both for t = 0..H-1.
template <typename S>
struct ModelTargets {
  std::vector<Matrix<S>> next_z;
  Matrix<S> td;  // batch x H
};

template <typename S>
ModelTargets<S> compute_targets(const WorldModel<S>& wm, const SegmentBatch<S>& batch, Rng& rng) {
  const Index H = batch.horizon();
  ModelTargets<S> t;
  t.td.resize(batch.batch_size(), H);
  for (Index i = 0; i < H; ++i) {
    const Matrix<S> img = batch.img.empty() ? Matrix<S>() : batch.img[i + 1];
    t.next_z.push_back(encode(wm, batch.states[i + 1], img, batch.lang, batch.state_mask));
    t.td.col(i) = td_target(wm, Vector<S>(batch.rewards.col(i)), batch.gamma, t.next_z.back(),
                            batch.lang, batch.action_mask, rng);
  }
  return t;
}

struct ModelLossReport {
  double total = 0.0;
  double self_pred = 0.0;
  double reward = 0.0;
  double value = 0.0;
};

struct ModelLossWeights {
  double self_pred = 1.0;
  double reward = 1.0;
  double value = 1.0;
  double lambda_scale = 1.0;  // multiplies every lambda^t weight
};

inline void check_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NonFiniteError(std::string("nonfinite loss term: ") + term);
}

// Sum over t of lambda^t [c_sp * mean_j (z'_t - sg(h(s_{t+1})))_j^2
//   + c_r * CE(R, r_t) + c_q * mean_i CE(Q_i, q_t)], averaged over the batch.
// Gradients are accumulated into wm.model.
template <typename S>
ModelLossReport model_loss(WorldModel<S>& wm, const SegmentBatch<S>& batch,
                           const ModelTargets<S>& targets, const ModelLossWeights& mask = {}) {
  const auto& c = wm.config;
  const Index H = batch.horizon(), B = batch.batch_size(), L = c.latent_dim;
  const Index Q = c.q_ensemble;
  if (H < 1 || static_cast<Index>(batch.states.size()) != H + 1)
    throw DimensionError("model_loss: malformed batch");
  const S inv_b = S(1) / static_cast<S>(B);

  MlpTape<S> enc_tape;
  const Matrix<S> img0 = batch.img.empty() ? Matrix<S>() : batch.img[0];
  std::vector<Matrix<S>> zs{encode(wm, batch.states[0], img0, batch.lang, batch.state_mask,
                                   &enc_tape)};
  std::vector<MlpTape<S>> dyn_tapes(H), rew_tapes(H);
  std::vector<std::vector<MlpTape<S>>> q_tapes(H, std::vector<MlpTape<S>>(Q));
  std::vector<Matrix<S>> d_sp(H), d_rew(H);
  std::vector<std::vector<Matrix<S>>> d_q(H, std::vector<Matrix<S>>(Q));
  ModelLossReport rep;
  double w = mask.lambda_scale;
  for (Index t = 0; t < H; ++t, w *= c.lambda) {
    const Matrix<S> in = hcat<S>({&zs[t], &batch.actions[t], &batch.lang});
    zs.push_back(wm.dynamics.forward(wm.model, in, &dyn_tapes[t]));

    const Matrix<S> diff = zs[t + 1] - targets.next_z[t];
    const double c_sp = w * c.coef_self_pred * mask.self_pred;
    rep.self_pred += c_sp * static_cast<double>(diff.squaredNorm()) / static_cast<double>(L * B);
    d_sp[t] = (static_cast<S>(2 * c_sp / static_cast<double>(L)) * inv_b) * diff;

    const double c_r = w * c.coef_reward * mask.reward;
    const Matrix<S> rlog = wm.reward.forward(wm.model, in, &rew_tapes[t]);
    Matrix<S> g;
    const Vector<S> rl =
        ce_loss_rows(rlog, two_hot_rows(Vector<S>(batch.rewards.col(t)), wm.disc), &g);
    rep.reward += c_r * static_cast<double>(rl.sum()) / static_cast<double>(B);
    d_rew[t] = (static_cast<S>(c_r) * inv_b) * g;

    const double c_q = w * c.coef_value * mask.value / static_cast<double>(Q);
    const Matrix<S> tq = two_hot_rows(Vector<S>(targets.td.col(t)), wm.disc);
    for (Index i = 0; i < Q; ++i) {
      const Matrix<S> qlog = wm.qs[i].forward(wm.model, in, &q_tapes[t][i]);
      const Vector<S> ql = ce_loss_rows(qlog, tq, &g);
      rep.value += c_q * static_cast<double>(ql.sum()) / static_cast<double>(B);
      d_q[t][i] = (static_cast<S>(c_q) * inv_b) * g;
    }
  }
  check_finite(rep.self_pred, "self_pred");
  check_finite(rep.reward, "reward");
  check_finite(rep.value, "value");
  rep.total = rep.self_pred + rep.reward + rep.value;

  Matrix<S> dz = d_sp[H - 1];  // gradient w.r.t. zs[H]
  for (Index t = H - 1; t >= 0; --t) {
    Matrix<S> d_in = wm.dynamics.backward(wm.model, dyn_tapes[t], dz);
    d_in += wm.reward.backward(wm.model, rew_tapes[t], d_rew[t]);
    for (Index i = 0; i < Q; ++i) d_in += wm.qs[i].backward(wm.model, q_tapes[t][i], d_q[t][i]);
    dz = d_in.leftCols(L);
    if (t >= 1) dz += d_sp[t - 1];
  }
  wm.encoder.backward(wm.model, enc_tape, dz);
  return rep;
}

template <typename S>
ModelLossReport model_loss(WorldModel<S>& wm, const SegmentBatch<S>& batch, Rng& rng) {
  const auto targets = compute_targets(wm, batch, rng);
  return model_loss(wm, batch, targets);
}

// ---------------------------------------------------------------------------
// Policy objective

struct PolicyLossOptions {
  double q_coef = 1.0;  // 0 disables the Q-value term (pretraining)
  double scale = -1.0;  // < 0: use wm.scale.value()
};

template <typename S>
struct PolicyLossReport {
  double total = 0.0;
  double bc = 0.0;
  double q = 0.0;        // weighted -Q / scale term
  double entropy = 0.0;  // weighted c_H * log_prob / scale term
  Vector<S> q_values;    // decoded Q at the sampled actions, for scale updates
};

// Along the latent rollout of the batch actions (treated as constants):
// sum_t lambda^t [c_bc |tanh(mean) - a_t|^2 - q_coef Q / scale
//                 + c_H log_prob / scale], averaged over the batch.
// Gradients reach the policy prior only.
template <typename S>
PolicyLossReport<S> policy_loss(WorldModel<S>& wm, const SegmentBatch<S>& batch, Rng& rng,
                                const PolicyLossOptions& opt = {}) {
  const auto& c = wm.config;
  const Index H = batch.horizon(), B = batch.batch_size(), L = c.latent_dim, A = c.action_dim;
  const double scale = opt.scale > 0 ? opt.scale : wm.scale.value();

  const Matrix<S> img0 = batch.img.empty() ? Matrix<S>() : batch.img[0];
  Matrix<S> z = encode(wm, batch.states[0], img0, batch.lang, batch.state_mask);
  Matrix<S> Z(H * B, L), G(H * B, c.lang_dim), M(H * B, A), Act(H * B, A);
  Vector<S> w(H * B);
  double lw = 1.0;
  for (Index t = 0; t < H; ++t, lw *= c.lambda) {
    Z.middleRows(t * B, B) = z;
    G.middleRows(t * B, B) = batch.lang;
    M.middleRows(t * B, B) = batch.action_mask;
    Act.middleRows(t * B, B) = batch.actions[t];
    w.segment(t * B, B).setConstant(static_cast<S>(lw));
    if (t + 1 < H) z = dynamics_step(wm, z, batch.actions[t], batch.lang);
  }

  MlpTape<S> tape;
  const Matrix<S> noise = rng.normal_matrix<S>(H * B, A);
  const auto head = policy_forward(wm, Z, G, M, noise, &tape);
  const auto heads = random_subset(c.q_ensemble, c.q_subset, rng);

  const Matrix<S> q_in = hcat<S>({&Z, &head.action, &G});
  std::vector<MlpTape<S>> q_tapes(heads.size());
  std::vector<Matrix<S>> dv(heads.size());
  Vector<S> q;
  std::vector<Index> arg(H * B, 0);
  for (std::size_t k = 0; k < heads.size(); ++k) {
    const Matrix<S> logits = wm.qs[heads[k]].forward(wm.model, q_in, &q_tapes[k]);
    const Vector<S> v = decode_rows(logits, wm.disc, &dv[k]);
    if (k == 0) {
      q = v;
      continue;
    }
    for (Index r = 0; r < v.size(); ++r)
      if (v(r) < q(r)) {
        q(r) = v(r);
        arg[r] = static_cast<Index>(k);
      }
  }

  PolicyLossReport<S> rep;
  rep.q_values = q;
  const Matrix<S> bc_err = (head.mean_action - Act).cwiseProduct(M);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (Index r = 0; r < H * B; ++r) {
    const double wr = static_cast<double>(w(r)) * inv_b;
    rep.bc += wr * c.coef_bc * static_cast<double>(bc_err.row(r).squaredNorm());
    rep.q -= wr * opt.q_coef * static_cast<double>(q(r)) / scale;
    rep.entropy += wr * c.coef_entropy * static_cast<double>(head.log_prob(r)) / scale;
  }
  check_finite(rep.bc, "bc");
  check_finite(rep.q, "q");
  check_finite(rep.entropy, "entropy");
  rep.total = rep.bc + rep.q + rep.entropy;

  const Vector<S> wb = w * static_cast<S>(inv_b);
  const Matrix<S> d_mean_action =
      (static_cast<S>(2 * c.coef_bc) * bc_err).array().colwise() * wb.array();
  const Vector<S> d_logp = wb * static_cast<S>(c.coef_entropy / scale);
  Matrix<S> d_action;
  if (opt.q_coef != 0.0) {
    d_action = Matrix<S>::Zero(H * B, A);
    const Vector<S> d_q = wb * static_cast<S>(-opt.q_coef / scale);
    for (std::size_t k = 0; k < heads.size(); ++k) {
      Matrix<S> dl = dv[k];
      for (Index r = 0; r < H * B; ++r)
        dl.row(r) *= (arg[r] == static_cast<Index>(k)) ? d_q(r) : S(0);
      const Matrix<S> d_in = wm.qs[heads[k]].backward(wm.model, q_tapes[k], dl, false);
      d_action += d_in.middleCols(L, A);
    }
  }
  const Matrix<S> d_out = gaussian_head_backward(head, M, d_action, d_logp, d_mean_action,
                                                 c.log_std_min, c.log_std_max);
  wm.policy_net.backward(wm.policy, tape, d_out);
  return rep;
}

struct PretrainLossReport {
  ModelLossReport model;
  double bc = 0.0;
  double entropy = 0.0;
  double total = 0.0;
};

// Model objective plus policy objective with the Q-value term disabled.
template <typename S>
PretrainLossReport pretrain_loss(WorldModel<S>& wm, const SegmentBatch<S>& batch, Rng& rng,
                                 Vector<S>* q_values = nullptr) {
  PretrainLossReport rep;
  rep.model = model_loss(wm, batch, rng);
  PolicyLossOptions opt;
  opt.q_coef = 0.0;
  auto p = policy_loss(wm, batch, rng, opt);
  rep.bc = p.bc;
  rep.entropy = p.entropy;
  rep.total = rep.model.total + p.total;
  if (q_values) *q_values = std::move(p.q_values);
  return rep;
}

// Behavior cloning through encoder and policy only: masked squared error
// between tanh(mean) at h(s_t) and a_t, averaged over rows and steps.
template <typename S>
double bc_loss(WorldModel<S>& wm, const SegmentBatch<S>& batch) {
  const auto& c = wm.config;
  const Index H = batch.horizon(), B = batch.batch_size();
  Matrix<S> St(H * B, c.state_dim), G(H * B, c.lang_dim), M(H * B, c.action_dim),
      SM(H * B, c.state_dim), Act(H * B, c.action_dim);
  Matrix<S> I;
  if (!batch.img.empty()) I.resize(H * B, c.img_dim);
  for (Index t = 0; t < H; ++t) {
    St.middleRows(t * B, B) = batch.states[t];
    if (!batch.img.empty()) I.middleRows(t * B, B) = batch.img[t];
    G.middleRows(t * B, B) = batch.lang;
    M.middleRows(t * B, B) = batch.action_mask;
    SM.middleRows(t * B, B) = batch.state_mask;
    Act.middleRows(t * B, B) = batch.actions[t];
  }
  MlpTape<S> enc_tape, pi_tape;
  const Matrix<S> z = encode(wm, St, I, G, SM, &enc_tape);
  const auto head = policy_forward(wm, z, G, M, Matrix<S>(), &pi_tape);
  const Matrix<S> err = (head.mean_action - Act).cwiseProduct(M);
  const double n = static_cast<double>(H * B);
  const double loss = static_cast<double>(err.squaredNorm()) / n;
  check_finite(loss, "bc");
  const Matrix<S> d_mean = static_cast<S>(2.0 / n) * err;
  const Matrix<S> d_out = gaussian_head_backward(head, M, Matrix<S>(), Vector<S>(), d_mean,
                                                 c.log_std_min, c.log_std_max);
  const Matrix<S> d_in = wm.policy_net.backward(wm.policy, pi_tape, d_out);
  wm.encoder.backward(wm.model, enc_tape, Matrix<S>(d_in.leftCols(c.latent_dim)));
  return loss;
}

}  // namespace newt
