// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
// failure. `--skip-e2e` leaves out the end-to-end run and the open-loop
// check that depends on it.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"
#include "support/quadratic.hpp"
#include "support/replay_probe.hpp"
#include "support/stopgrad.hpp"
#include "support/tiny_run.hpp"

using namespace newt;
using namespace newt::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, bool ok, const std::string& what) {
  std::printf("criterion %2d %s  %s\n", id, ok ? "PASS" : "FAIL", what.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void gradients() {
  const auto t0 = Clock::now();
  std::vector<GradCheck> all = op_gradchecks(7);
  for (const auto& c : loss_gradchecks(3)) all.push_back(c);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string where;
  for (const auto& c : all)
    if (c.rel_error > worst) {
      worst = c.rel_error;
      where = c.name;
    }
  report(1, worst < 1e-4 && secs < 60.0,
         fmt("gradient checks: %zu arrays, max rel error %.2e (%s), %.1f s", all.size(), worst,
             where.c_str(), secs));
}

void discretizer() {
  const DiscretizerSpec spec;
  Rng rng(1);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double y = rng.uniform(-50.0, 50.0);
    const auto w = two_hot(y, spec);
    std::vector<double> logits(w.size());
    for (std::size_t k = 0; k < w.size(); ++k)
      logits[k] = w[k] > 0 ? std::log(w[k]) : -std::numeric_limits<double>::infinity();
    worst = std::max(worst, std::abs(symlog(decode(logits, spec)) - symlog(y)));
  }
  double inv = 0.0;
  for (double y = -1e4; y <= 1e4; y += 0.731)
    inv = std::max(inv, std::abs(symexp(symlog(y)) - y) / std::max(1.0, std::abs(y)));
  report(2, worst <= 0.5 * spec.bin_width() && inv <= 1e-9,
         fmt("two-hot round trip max %.3e (half bin %.3e); symexp(symlog) error %.1e", worst,
             0.5 * spec.bin_width(), inv));
}

void discount() {
  const std::vector<std::pair<int, double>> table{
      {50, 0.95}, {100, 0.95}, {250, 0.98}, {500, 0.99}, {1000, 0.995}};
  double worst = 0.0;
  for (const auto& [T, g] : table) worst = std::max(worst, std::abs(discount_for(T) - g));
  report(3, worst <= 1e-12, fmt("discount table max deviation %.1e", worst));
}

void bias() {
  const BiasSchedule s{2000, 12000};
  bool monotone = true;
  double prev = 2.0;
  for (double x = 0; x <= 14000; x += 1.0) {
    const double b = bias_coef(x, s);
    monotone = monotone && b <= prev;
    prev = b;
  }
  const bool ends = bias_coef(s.start, s) == 1.0 && bias_coef(s.end, s) == 0.0 &&
                    bias_coef(0.5 * (s.start + s.end), s) == 0.5;
  report(4, ends && monotone, fmt("endpoints/midpoint exact: %s, monotone: %s", ends ? "yes" : "no",
                                  monotone ? "yes" : "no"));
}

void split() {
  const auto p = split_probe(1);
  report(5, p.fraction_exact && p.violations == 0,
         fmt("demo share exact: %s; %d segments, %d crossing a boundary",
             p.fraction_exact ? "yes" : "no", p.segments, p.violations));
}

void stopgrad() {
  const auto p = stopgrad_probe(21);
  // The same property on the float agent used for training.
  Agent a = tiny_agent(6);
  MetricsWriter none;
  a.pretrain(none, 3);
  a.config.total_env_steps = 200;
  a.train(none);
  double agent_target = 0.0;
  for (const auto& [n, e] : a.wm.target.entries)
    agent_target = std::max(agent_target, static_cast<double>(e.grad.cwiseAbs().maxCoeff()));
  report(6,
         p.target_grad_abs_max == 0.0 && agent_target == 0.0 && p.online_rel_error < 1e-4 &&
             p.target_branch_norm > 1e-2,
         fmt("target grads max %.1e (double) / %.1e (agent, %lld updates); encoder grad vs "
             "frozen-target FD %.1e; target-branch share excluded %.2f",
             p.target_grad_abs_max, agent_target, static_cast<long long>(a.updates),
             p.online_rel_error, p.target_branch_norm));
}

void planner() {
  const auto r = planner_oracle(20);
  report(7, r.max_error <= 0.05 && r.monotone,
         fmt("quadratic oracle max |a - a_grid| %.4f over 20 seeds; CRN elite monotone: %s",
             r.max_error, r.monotone ? "yes" : "no"));
}

struct E2E {
  std::unique_ptr<Agent> rl;
  bool ran = false;
};

E2E end_to_end(const std::string& dir) {
  E2E out;
  const auto t0 = Clock::now();
  const TrainConfig cfg = TrainConfig::desk();
  std::vector<std::pair<std::vector<EpisodeRecord>, std::string>> demos;
  for (std::size_t k = 0; k < cfg.tasks.size(); ++k)
    demos.emplace_back(collect_demos(cfg.tasks[k], cfg.demos_per_task, cfg.seed + k,
                                     cfg.dims, cfg.demo_min_quality),
                       cfg.tasks[k]);
  auto agent = std::make_unique<Agent>(cfg);
  for (const auto& [eps, name] : demos) agent->load_demos(eps, {name});
  agent->require_demos();
  MetricsWriter mw(dir + "/e2e_metrics.jsonl");
  agent->pretrain(mw, cfg.pretrain_iters);
  const std::string pre_path = dir + "/e2e_pretrain.ckpt";
  agent->save(pre_path);
  const double t_pre = seconds_since(t0);
  agent->train(mw);
  const double t_train = seconds_since(t0);
  agent->save(dir + "/e2e_rl.ckpt");

  EvalOptions eo;
  eo.episodes = 10;
  eo.seed = 777;
  const auto rl_rows = agent->evaluate(cfg.tasks, eo);
  // Pretrain-only and BC are both scored with the policy prior, no planning.
  EvalOptions po = eo;
  po.actor = ActorKind::prior;
  Agent pre = Agent::load(pre_path);
  const auto pre_rows = pre.evaluate(cfg.tasks, po);

  Agent bc(cfg);
  for (const auto& [eps, name] : demos) bc.load_demos(eps, {name});
  MetricsWriter bw(dir + "/e2e_bc_metrics.jsonl");
  bc.bc_train(bw, cfg.pretrain_iters);
  const auto bc_rows = bc.evaluate(cfg.tasks, po);
  const double t_all = seconds_since(t0);

  double reach = 0.0;
  for (const auto& r : rl_rows) {
    const auto k = &r - rl_rows.data();
    std::printf("    %-12s rl %.3f  pretrain %.3f  bc %.3f\n", r.task.c_str(), r.score,
                pre_rows[k].score, bc_rows[k].score);
    if (r.task == "point-reach") reach = r.score;
  }
  const double m_rl = mean_score(rl_rows), m_pre = mean_score(pre_rows), m_bc = mean_score(bc_rows);
  const bool ok = m_rl >= 0.6 && reach >= 0.8 && m_bc <= m_pre && m_pre <= m_rl && t_train <= 1800.0;
  report(8, ok,
         fmt("mean %.3f, point-reach %.3f; BC %.3f <= pretrain %.3f <= RL %.3f; %lld params; "
             "pretrain %.0f s, training total %.0f s (limit 1800), with baselines %.0f s",
             m_rl, reach, m_bc, m_pre, m_rl, static_cast<long long>(agent->wm.parameter_count()),
             t_pre, t_train, t_all));
  out.rl = std::move(agent);
  out.ran = true;
  return out;
}

void open_loop(Agent& agent) {
  double closed = 0.0, open4 = 0.0, open16 = 0.0;
  for (int s = 0; s < 10; ++s) {
    EvalOptions o;
    o.episodes = 5;
    o.seed = 9000 + s;
    closed += agent.evaluate({"point-reach"}, o)[0].score / 10;
    o.window = 4;
    open4 += agent.evaluate({"point-reach"}, o)[0].score / 10;
    o.window = 16;
    open16 += agent.evaluate({"point-reach"}, o)[0].score / 10;
  }
  const double f4 = closed > 0 ? open4 / closed : 0.0, f16 = closed > 0 ? open16 / closed : 0.0;
  report(9, f4 >= f16 && f16 >= 0.5,
         fmt("point-reach closed %.3f; open-loop fraction h4 %.3f, h16 %.3f (need h4 >= h16, h16 >= 0.5)",
             closed, f4, f16));
}

void persistence() {
  const auto p = persistence_probe();
  report(10, p.metrics_identical && p.next_update_identical && p.demo_file_identical,
         fmt("metric stream bitwise: %s; next update after reload bitwise: %s; NEWTDEMO re-read: %s",
             p.metrics_identical ? "yes" : "no", p.next_update_identical ? "yes" : "no",
             p.demo_file_identical ? "yes" : "no"));
}

}  // namespace

int main(int argc, char** argv) {
  bool skip_e2e = false;
  std::string dir = std::filesystem::temp_directory_path().string() + "/newt_acceptance";
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--skip-e2e") == 0) skip_e2e = true;
    if (std::strcmp(argv[i], "--dir") == 0 && i + 1 < argc) dir = argv[++i];
  }
  std::filesystem::create_directories(dir);
  try {
    gradients();
    discretizer();
    discount();
    bias();
    split();
    stopgrad();
    planner();
    if (skip_e2e) {
      std::printf("criterion  8 SKIP  (--skip-e2e)\ncriterion  9 SKIP  (--skip-e2e)\n");
    } else {
      E2E e = end_to_end(dir);
      open_loop(*e.rl);
    }
    persistence();
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
