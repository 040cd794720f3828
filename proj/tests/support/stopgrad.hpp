#pragma once

// Stop-gradient isolation probes for the model objective.

#include "gradcheck.hpp"

namespace newt::testing {

struct StopGradProbe {
  double target_grad_abs_max = 0.0;  // over every target entry, after full updates
  double online_rel_error = 0.0;     // analytic encoder grad vs FD with frozen targets
  double target_branch_norm = 0.0;   // FD through recomputed targets minus frozen FD
};

inline double max_abs_grad(const ParamStore<double>& s) {
  double m = 0.0;
  for (const auto& [n, e] : s.entries)
    if (e.grad.size()) m = std::max(m, e.grad.cwiseAbs().maxCoeff());
  return m;
}

inline StopGradProbe stopgrad_probe(std::uint64_t seed) {
  StopGradProbe p;
  WorldModel<double> wm = tiny_model(seed);
  const auto batch = tiny_batch(wm.config, 4, seed + 11);

  // Full update sequences; the target store must never hold gradient.
  Rng rng(seed + 12);
  AdamConfig adam;
  for (int k = 0; k < 3; ++k) {
    model_loss(wm, batch, rng);
    p.target_grad_abs_max = std::max(p.target_grad_abs_max, max_abs_grad(wm.target));
    adam_step(wm.model, adam);
    auto pr = policy_loss(wm, batch, rng);
    p.target_grad_abs_max = std::max(p.target_grad_abs_max, max_abs_grad(wm.target));
    adam_step(wm.policy, adam);
    wm.scale.update(pr.q_values);
    ema_update(wm.target, wm.model, wm.config.target_momentum);
    p.target_grad_abs_max = std::max(p.target_grad_abs_max, max_abs_grad(wm.target));
  }

  // Self-prediction only: the encoder sees h(s_0) online and h(s_{t+1}) as
  // targets. Only the former may carry gradient.
  ModelLossWeights only_sp;
  only_sp.reward = 0.0;
  only_sp.value = 0.0;
  Rng trng(seed + 13);
  const auto frozen = compute_targets(wm, batch, trng);
  wm.model.zero_grad();
  model_loss(wm, batch, frozen, only_sp);
  const std::string name = "enc.0.w";
  const MatrixD analytic = wm.model.at(name).grad;
  MatrixD& w = wm.model.at(name).values;
  const MatrixD fd_frozen =
      numeric_grad([&] { return model_loss(wm, batch, frozen, only_sp).total; }, w);
  const MatrixD fd_full = numeric_grad(
      [&] {
        Rng r(seed + 13);
        return model_loss(wm, batch, compute_targets(wm, batch, r), only_sp).total;
      },
      w);
  wm.model.zero_grad();
  p.online_rel_error = rel_error(analytic, fd_frozen);
  p.target_branch_norm = (fd_full - fd_frozen).norm() / std::max(fd_frozen.norm(), 1e-12);
  return p;
}

}  // namespace newt::testing
