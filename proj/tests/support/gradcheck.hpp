#pragma once

// Central-difference gradient checks in double. Shared by the unit tests and
// the acceptance runner so both judge the same quantities.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "newt/worldmodel.hpp"

namespace newt::testing {

struct GradCheck {
  std::string name;
  double rel_error = 0.0;
};

// ||a - n|| / max(||a||, ||n||); falls back to the absolute difference when
// both gradients vanish.
inline double rel_error(const MatrixD& analytic, const MatrixD& numeric) {
  const double diff = (analytic - numeric).norm();
  const double den = std::max(analytic.norm(), numeric.norm());
  return den < 1e-10 ? diff : diff / den;
}

// Perturbs `x` in place; `f` must read `x` each call.
inline MatrixD numeric_grad(const std::function<double()>& f, MatrixD& x, double h = 1e-6) {
  MatrixD g(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double x0 = x.data()[i];
    x.data()[i] = x0 + h;
    const double fp = f();
    x.data()[i] = x0 - h;
    const double fm = f();
    x.data()[i] = x0;
    g.data()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline MatrixD random_matrix(Rng& rng, Index r, Index c, double scale = 1.0) {
  return rng.normal_matrix<double>(r, c) * scale;
}

inline double dot(const MatrixD& a, const MatrixD& b) { return a.cwiseProduct(b).sum(); }

// Sizes used by every check: latent 8, mlp 16, horizon 2, 11 bins.
inline WorldModelConfig tiny_config() {
  WorldModelConfig c;
  c.state_dim = 6;
  c.action_dim = 3;
  c.lang_dim = 4;
  c.latent_dim = 8;
  c.mlp_dim = 16;
  c.enc_dim = 16;
  c.encoder_layers = 2;
  c.q_ensemble = 3;
  c.q_subset = 2;
  c.horizon = 2;
  c.num_bins = 11;
  c.simplicial_v = 4;
  return c;
}

// Random parameters so LayerNorm gains and biases are not at their identity.
inline WorldModel<double> tiny_model(std::uint64_t seed) {
  WorldModel<double> wm = make_world_model<double>(tiny_config(), seed);
  Rng rng(seed ^ 0x9e37);
  for (auto* store : {&wm.model, &wm.policy})
    for (auto& [name, e] : store->entries)
      e.values += random_matrix(rng, e.values.rows(), e.values.cols(), 0.2);
  wm.target = wm.model;
  for (auto& [name, e] : wm.target.entries)
    e.values += random_matrix(rng, e.values.rows(), e.values.cols(), 0.05);
  return wm;
}

// A random batch with one masked state column and one masked action column.
inline SegmentBatch<double> tiny_batch(const WorldModelConfig& c, Index B, std::uint64_t seed) {
  Rng rng(seed);
  SegmentBatch<double> b;
  b.state_mask = MatrixD::Ones(B, c.state_dim);
  b.state_mask.col(c.state_dim - 1).setZero();
  b.action_mask = MatrixD::Ones(B, c.action_dim);
  b.action_mask.col(c.action_dim - 1).setZero();
  for (Index t = 0; t <= c.horizon; ++t)
    b.states.push_back(random_matrix(rng, B, c.state_dim).cwiseProduct(b.state_mask));
  for (Index t = 0; t < c.horizon; ++t) {
    MatrixD a = (random_matrix(rng, B, c.action_dim) * 0.6).array().tanh().matrix();
    b.actions.push_back(a.cwiseProduct(b.action_mask));
  }
  b.lang = random_matrix(rng, B, c.lang_dim);
  b.rewards = random_matrix(rng, B, c.horizon, 2.0);
  b.gamma = VectorD::Constant(B, 0.95);
  b.task_ids.assign(B, 0);
  b.is_demo.assign(B, 0);
  b.episode_ids.assign(B, 0);
  b.offsets.assign(B, 0);
  return b;
}

// Checks every parameter array of `store` against central differences of
// `loss`, given the analytic gradients already accumulated in the store.
inline void check_store(const std::string& label, ParamStore<double>& store,
                        const std::function<double()>& loss, std::vector<GradCheck>& out) {
  // Loss calls accumulate into the store, so snapshot first.
  std::map<std::string, MatrixD> analytic;
  for (const auto& [name, e] : store.entries) analytic.emplace(name, e.grad);
  for (auto& [name, e] : store.entries)
    out.push_back({label + "/" + name, rel_error(analytic.at(name), numeric_grad(loss, e.values))});
}

inline std::vector<GradCheck> op_gradchecks(std::uint64_t seed) {
  std::vector<GradCheck> out;
  Rng rng(seed);

  {  // dense
    MatrixD x = random_matrix(rng, 5, 4), w = random_matrix(rng, 4, 3), b = random_matrix(rng, 1, 3);
    const MatrixD R = random_matrix(rng, 5, 3);
    auto f = [&] { return dot(dense_forward(x, w, b), R); };
    const auto g = dense_backward(x, w, R);
    out.push_back({"dense/x", rel_error(g.dx, numeric_grad(f, x))});
    out.push_back({"dense/w", rel_error(g.dw, numeric_grad(f, w))});
    out.push_back({"dense/b", rel_error(g.db, numeric_grad(f, b))});
  }
  {  // layernorm
    MatrixD x = random_matrix(rng, 5, 6, 2.0), gain = random_matrix(rng, 1, 6),
            bias = random_matrix(rng, 1, 6);
    const MatrixD R = random_matrix(rng, 5, 6);
    auto f = [&] { return dot(layernorm_forward(x, gain, bias), R); };
    LayerNormCache<double> cache;
    layernorm_forward(x, gain, bias, kLayerNormEps, &cache);
    const auto g = layernorm_backward(cache, gain, R);
    out.push_back({"layernorm/x", rel_error(g.dx, numeric_grad(f, x))});
    out.push_back({"layernorm/gain", rel_error(g.dgain, numeric_grad(f, gain))});
    out.push_back({"layernorm/bias", rel_error(g.dbias, numeric_grad(f, bias))});
  }
  {  // mish, including the clamped region
    MatrixD x = random_matrix(rng, 6, 5, 4.0);
    x(0, 0) = 25.0;
    x(0, 1) = -30.0;
    const MatrixD R = random_matrix(rng, 6, 5);
    auto f = [&] { return dot(mish(x), R); };
    const MatrixD a = mish_backward(x, R);
    out.push_back({"mish", rel_error(a, numeric_grad(f, x))});
  }
  {  // softmax
    MatrixD x = random_matrix(rng, 4, 7, 2.0);
    const MatrixD R = random_matrix(rng, 4, 7);
    auto f = [&] { return dot(softmax_rows(x), R); };
    const MatrixD a = softmax_rows_backward(softmax_rows(x), R);
    out.push_back({"softmax", rel_error(a, numeric_grad(f, x))});
  }
  {  // simplicial with temperature
    MatrixD x = random_matrix(rng, 4, 8, 2.0);
    const MatrixD R = random_matrix(rng, 4, 8);
    auto f = [&] { return dot(simplicial(x, 4, 0.7), R); };
    const MatrixD a = simplicial_backward(simplicial(x, 4, 0.7), R, 4, 0.7);
    out.push_back({"simplicial", rel_error(a, numeric_grad(f, x))});
  }
  const DiscretizerSpec disc(11, -10.0, 10.0);
  {  // cross-entropy against two-hot targets
    MatrixD x = random_matrix(rng, 5, 11, 2.0);
    const MatrixD target = two_hot_rows(VectorD(random_matrix(rng, 5, 1, 20.0)), disc);
    auto f = [&] { return ce_loss_rows<double>(x, target, nullptr).sum(); };
    MatrixD a;
    ce_loss_rows(x, target, &a);
    out.push_back({"cross_entropy", rel_error(a, numeric_grad(f, x))});
  }
  {  // expectation decoding
    MatrixD x = random_matrix(rng, 5, 11, 2.0);
    const VectorD r = VectorD(random_matrix(rng, 5, 1));
    auto f = [&] { return decode_rows(x, disc).dot(r); };
    MatrixD a;
    decode_rows(x, disc, &a);
    a.array().colwise() *= r.array();
    out.push_back({"decode", rel_error(a, numeric_grad(f, x))});
  }
  {  // tanh-Gaussian head with one masked dimension
    MatrixD o = random_matrix(rng, 5, 6);
    MatrixD mask = MatrixD::Ones(1, 3);
    mask(0, 2) = 0.0;
    const MatrixD noise = random_matrix(rng, 5, 3);
    const MatrixD R1 = random_matrix(rng, 5, 3), R3 = random_matrix(rng, 5, 3);
    const VectorD r2 = VectorD(random_matrix(rng, 5, 1));
    auto f = [&] {
      const auto h = gaussian_head_forward(o, mask, noise, -10.0, 2.0);
      return dot(h.action, R1) + h.log_prob.dot(r2) + dot(h.mean_action, R3);
    };
    const auto h = gaussian_head_forward(o, mask, noise, -10.0, 2.0);
    const MatrixD a = gaussian_head_backward(h, mask, R1, r2, R3, -10.0, 2.0);
    out.push_back({"gaussian_head", rel_error(a, numeric_grad(f, o))});
  }
  for (auto fa : {FinalActivation::simplicial, FinalActivation::linear}) {
    MlpSpec spec;
    spec.layer_widths = {5, 16, 16, 8};
    spec.final_activation = fa;
    spec.simplicial_v = 4;
    const std::string label = fa == FinalActivation::simplicial ? "mlp_simplicial" : "mlp_linear";
    Mlp<double> mlp(label, spec);
    ParamStore<double> store;
    mlp.init(store, rng);
    for (auto& [n, e] : store.entries) e.values += random_matrix(rng, e.values.rows(), e.values.cols(), 0.2);
    MatrixD x = random_matrix(rng, 4, 5);
    const MatrixD R = random_matrix(rng, 4, 8);
    auto f = [&] { return dot(mlp.forward(store, x), R); };
    MlpTape<double> tape;
    mlp.forward(store, x, &tape);
    const MatrixD dx = mlp.backward(store, tape, R);
    out.push_back({label + "/x", rel_error(dx, numeric_grad(f, x))});
    check_store(label, store, f, out);
  }
  return out;
}

// Model objective against frozen targets, policy objective with a replayed
// noise stream, and the behavior-cloning objective.
inline std::vector<GradCheck> loss_gradchecks(std::uint64_t seed) {
  std::vector<GradCheck> out;
  WorldModel<double> wm = tiny_model(seed);
  const auto batch = tiny_batch(wm.config, 4, seed + 1);

  {
    Rng rng(seed + 2);
    const auto targets = compute_targets(wm, batch, rng);
    wm.model.zero_grad();
    model_loss(wm, batch, targets);
    check_store("model_loss", wm.model, [&] { return model_loss(wm, batch, targets).total; }, out);
    // The loss calls above accumulated extra gradients; start clean.
    wm.model.zero_grad();
  }
  {
    PolicyLossOptions opt;
    opt.scale = 1.7;
    auto run = [&] {
      Rng rng(seed + 3);
      return policy_loss(wm, batch, rng, opt).total;
    };
    wm.policy.zero_grad();
    wm.model.zero_grad();
    run();
    const double leaked = wm.model.grad_norm();
    out.push_back({"policy_loss/model_grad_norm", leaked});
    check_store("policy_loss", wm.policy, run, out);
    wm.policy.zero_grad();
    wm.model.zero_grad();
  }
  {
    auto run = [&] { return bc_loss(wm, batch); };
    wm.policy.zero_grad();
    wm.model.zero_grad();
    run();
    std::map<std::string, MatrixD> enc;
    for (const auto& [n, e] : wm.model.entries)
      if (n.rfind("enc.", 0) == 0) enc.emplace(n, e.grad);
    const std::map<std::string, MatrixD> pol = [&] {
      std::map<std::string, MatrixD> m;
      for (const auto& [n, e] : wm.policy.entries) m.emplace(n, e.grad);
      return m;
    }();
    for (const auto& [n, g] : enc)
      out.push_back({"bc_loss/" + n, rel_error(g, numeric_grad(run, wm.model.at(n).values))});
    for (const auto& [n, g] : pol)
      out.push_back({"bc_loss/" + n, rel_error(g, numeric_grad(run, wm.policy.at(n).values))});
  }
  return out;
}

}  // namespace newt::testing
