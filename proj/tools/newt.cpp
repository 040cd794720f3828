// newt: command-line entry point.

#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "newt/trainer.hpp"

using namespace newt;

namespace {

std::string config_text(const std::string& path, const std::string& profile,
                        const std::vector<std::string>& overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    text = ss.str();
  }
  std::string head;
  if (!profile.empty()) head = "profile = " + profile + "\n";
  std::string tail;
  for (const auto& o : overrides) tail += o + "\n";
  return head + text + "\n" + tail;
}

TrainConfig config_from(const std::string& path, const std::string& profile,
                        const std::vector<std::string>& overrides) {
  return parse_config_text(config_text(path, profile, overrides));
}

std::vector<EpisodeRecord> load_demo_files(Agent& agent, const std::vector<std::string>& files) {
  if (files.empty()) throw std::runtime_error("no demo files given (set demo_files or --demos)");
  std::vector<EpisodeRecord> all;
  for (const auto& f : files) {
    const DemoFile d = read_demo_file(f);
    agent.load_demos(d.episodes, d.task_names);
    all.insert(all.end(), d.episodes.begin(), d.episodes.end());
  }
  agent.require_demos();
  return all;
}

void print_rows(const std::vector<TaskEval>& rows) {
  std::printf("%-22s %-10s %8s\n", "task", "mode", "score");
  for (const auto& r : rows) {
    std::printf("%-22s %-10s %8.3f", r.task.c_str(), r.mode.c_str(), r.score);
    if (r.closed_score >= 0)
      std::printf("  (closed %.3f, fraction %.3f)", r.closed_score,
                  r.closed_score > 0 ? r.score / r.closed_score : 0.0);
    std::printf("\n");
  }
  std::printf("%-22s %-10s %8.3f\n", "mean", "", mean_score(rows));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multitask world-model agent on the MicroArcade toy suite"};
  app.require_subcommand(1);

  std::string config_path, profile, out, ckpt, metrics, task, mode = "closed", out_dir;
  std::vector<std::string> sets, demos, tasks;
  int n = 20, episodes = 10, horizon = 0;
  std::uint64_t seed = 1;
  bool scratch = false;
  std::int64_t steps = -1;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "config file (key = value)");
    c->add_option("--profile", profile, "paper or desk defaults")->check(CLI::IsMember({"paper", "desk"}));
    c->add_option("--set", sets, "extra key=value overrides");
    c->add_option("--metrics", metrics, "metrics output (JSON lines)");
  };

  auto* c_tasks = app.add_subcommand("tasks", "list registered tasks");

  auto* c_demo = app.add_subcommand("collect-demos", "roll the scripted expert into a NEWTDEMO file");
  c_demo->add_option("--task", task, "task name")->required();
  c_demo->add_option("--n", n, "accepted episodes")->check(CLI::Range(1, 100000));
  c_demo->add_option("--out", out, "output file")->required();
  c_demo->add_option("--seed", seed, "seed");
  add_common(c_demo);

  auto* c_pre = app.add_subcommand("pretrain", "model-based pretraining on demonstrations");
  add_common(c_pre);
  c_pre->add_option("--demos", demos, "NEWTDEMO files (overrides demo_files)");
  c_pre->add_option("--out", out, "checkpoint path")->required();

  auto* c_train = app.add_subcommand("train", "online multitask RL");
  add_common(c_train);
  c_train->add_option("--resume", ckpt, "checkpoint to continue from (e.g. a pretrain checkpoint)");
  c_train->add_option("--demos", demos, "NEWTDEMO files when not resuming");
  c_train->add_option("--out", out, "checkpoint path")->required();

  auto* c_bc = app.add_subcommand("bc", "behavior cloning baseline");
  add_common(c_bc);
  c_bc->add_option("--demos", demos, "NEWTDEMO files");
  c_bc->add_option("--out", out, "checkpoint path")->required();

  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  c_eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  c_eval->add_option("--tasks", tasks, "tasks (default: the checkpoint's)")->delimiter(',');
  c_eval->add_option("--episodes", episodes, "episodes per task")->check(CLI::PositiveNumber);
  c_eval->add_option("--mode", mode, "closed, open or prior")->check(CLI::IsMember({"closed", "open", "prior"}));
  c_eval->add_option("--horizon", horizon, "open-loop window")->check(CLI::NonNegativeNumber);
  c_eval->add_option("--seed", seed, "evaluation seed");
  c_eval->add_option("--metrics", metrics, "metrics output (JSON lines)");

  auto* c_ft = app.add_subcommand("finetune", "single-task online RL on a new task");
  c_ft->add_option("--ckpt", ckpt, "checkpoint")->required();
  c_ft->add_option("--task", task, "task name")->required();
  c_ft->add_option("--config", config_path, "config file; only steps/eval keys are read");
  c_ft->add_option("--steps", steps, "env steps (default: config total_env_steps)");
  c_ft->add_option("--episodes", episodes, "evaluation episodes");
  c_ft->add_flag("--scratch", scratch, "also train from a fresh initialization for comparison");
  c_ft->add_option("--out", out, "checkpoint path");
  c_ft->add_option("--metrics", metrics, "metrics output (JSON lines)");

  auto* c_plot = app.add_subcommand("plot", "render SVG plots from a metrics file");
  c_plot->add_option("--metrics", metrics, "metrics file")->required();
  c_plot->add_option("--out-dir", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_tasks->parsed()) {
      const PaddedDims dims = TrainConfig::desk().dims;
      std::printf("%-22s %5s %5s %6s %-8s %s\n", "name", "state", "act", "T", "score", "instruction");
      for (const auto& name : task_registry()) {
        const TaskSpec s = task_spec(name, dims);
        std::printf("%-22s %5ld %5ld %6d %-8s %s%s\n", name.c_str(), static_cast<long>(s.state_dim_native),
                    static_cast<long>(s.action_dim_native), s.episode_len,
                    s.score_kind == ScoreKind::success ? "success" : "return",
                    s.held_out ? "[held out] " : "", s.instruction.c_str());
      }
      return 0;
    }
    if (c_demo->parsed()) {
      const TrainConfig cfg = config_from(config_path, profile.empty() ? "desk" : profile, sets);
      DemoCollectionReport rep;
      DemoFile f;
      f.task_names = {task};
      f.episodes = collect_demos(task, n, seed, cfg.dims, cfg.demo_min_quality, {}, &rep);
      write_demo_file(out, f);
      std::printf("%s: accepted %d of %d episodes -> %s\n", task.c_str(), rep.accepted, rep.attempts,
                  out.c_str());
      return 0;
    }
    if (c_pre->parsed() || c_bc->parsed()) {
      TrainConfig cfg = config_from(config_path, profile, sets);
      if (!demos.empty()) cfg.demo_files = demos;
      if (!metrics.empty()) cfg.metrics_file = metrics;
      Agent agent(cfg);
      load_demo_files(agent, cfg.demo_files);
      MetricsWriter mw(cfg.metrics_file);
      if (c_pre->parsed())
        agent.pretrain(mw, cfg.pretrain_iters);
      else
        agent.bc_train(mw, cfg.pretrain_iters);
      agent.save(out);
      std::printf("wrote %s (%ld parameters)\n", out.c_str(), static_cast<long>(agent.wm.parameter_count()));
      return 0;
    }
    if (c_train->parsed()) {
      std::optional<Agent> agent;
      if (!ckpt.empty()) {
        agent.emplace(Agent::load(ckpt));
        // Run-length and logging keys may be changed on resume.
        if (!config_path.empty() || !sets.empty()) {
          // Overrides apply on top of the checkpoint's own configuration.
          const TrainConfig o =
              parse_config_text(agent->config.to_text() + config_text(config_path, "", sets));
          agent->config.total_env_steps = o.total_env_steps;
          agent->config.eval_every = o.eval_every;
          agent->config.eval_episodes = o.eval_episodes;
          agent->config.checkpoint_every = o.checkpoint_every;
          agent->config.log_every = o.log_every;
          agent->config.metrics_file = o.metrics_file;
        }
      } else {
        TrainConfig cfg = config_from(config_path, profile, sets);
        if (!demos.empty()) cfg.demo_files = demos;
        agent.emplace(cfg);
        load_demo_files(*agent, cfg.demo_files);
      }
      if (!metrics.empty()) agent->config.metrics_file = metrics;
      MetricsWriter mw(agent->config.metrics_file, !ckpt.empty());
      agent->train(mw, out);
      agent->save(out);
      std::printf("wrote %s after %ld env steps, %ld updates\n", out.c_str(),
                  static_cast<long>(agent->env_steps), static_cast<long>(agent->updates));
      return 0;
    }
    if (c_eval->parsed()) {
      Agent agent = Agent::load(ckpt);
      if (tasks.empty()) tasks = agent.config.tasks;
      EvalOptions o;
      o.episodes = episodes;
      o.seed = seed;
      std::vector<TaskEval> rows;
      if (mode == "prior") {
        o.actor = ActorKind::prior;
        rows = agent.evaluate(tasks, o);
      } else if (mode == "closed") {
        rows = agent.evaluate(tasks, o);
      } else {
        if (horizon < 1) throw std::invalid_argument("--mode open needs --horizon >= 1");
        const auto closed = agent.evaluate(tasks, o);
        o.window = horizon;
        rows = agent.evaluate(tasks, o);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i].closed_score = closed[i].score;
      }
      print_rows(rows);
      if (!metrics.empty()) {
        MetricsWriter mw(metrics, true);
        for (const auto& r : rows)
          mw.write(nlohmann::json{{"event", "eval"}, {"phase", "eval"}, {"task", r.task},
                                  {"mode", r.mode}, {"score", r.score}}
                       .dump());
      }
      return 0;
    }
    if (c_ft->parsed()) {
      Agent agent = Agent::load(ckpt);
      if (!config_path.empty()) {
        const TrainConfig o = parse_config_text(agent.config.to_text() + config_text(config_path, "", {}));
        agent.config.total_env_steps = o.total_env_steps;
      }
      const std::int64_t s = steps >= 0 ? steps : agent.config.total_env_steps;
      MetricsWriter mw(metrics);
      std::optional<Agent> fresh;
      if (scratch) fresh.emplace(Agent::load(ckpt));
      const FinetuneReport r = finetune(agent, task, s, mw, episodes, false);
      std::printf("%s: zero-shot %.3f, finetuned %.3f\n", task.c_str(), r.zero_shot, r.final_score);
      if (scratch) {
        const FinetuneReport rs = finetune(*fresh, task, s, mw, episodes, true);
        std::printf("%s from scratch: %.3f\n", task.c_str(), rs.final_score);
      }
      if (!out.empty()) agent.save(out);
      return 0;
    }
    if (c_plot->parsed()) {
      for (const auto& p : plot_metrics(metrics, out_dir)) std::printf("wrote %s\n", p.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "newt: %s\n", e.what());
    return 1;
  }
  return 0;
}
