#pragma once

// Orchestration: demonstration collection, pretraining, online multitask RL,
// behavior cloning baseline, evaluation, finetuning, checkpoints and metrics.

#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "newt/planner.hpp"
#include "newt/replay.hpp"
#include "newt/tasks.hpp"
#include "newt/worldmodel.hpp"

namespace newt {

enum class Profile { paper, desk };

struct TrainConfig {
  Profile profile = Profile::paper;
  std::vector<std::string> tasks;
  std::int64_t total_env_steps = 100000;
  double utd = 0.075;
  Index batch = 1024;
  std::int64_t pretrain_iters = 200000;
  BiasSchedule bias{2e6, 12e6};
  std::int64_t eval_every = 0;  // env steps; 0 disables periodic evaluation
  int eval_episodes = 10;
  std::int64_t checkpoint_every = 0;
  std::int64_t log_every = 100;  // updates between loss records
  std::uint64_t seed = 1;
  int demos_per_task = 20;
  double demo_min_quality = 0.75;
  std::vector<std::string> demo_files;
  std::string embeddings_file;
  std::string metrics_file;
  PaddedDims dims;
  WorldModelConfig wm = WorldModelConfig::paper();
  PlannerConfig planner = PlannerConfig::paper();
  AdamConfig adam;
  Index replay_capacity = 10000000;
  double demo_fraction = 0.5;

  static TrainConfig paper();
  static TrainConfig desk();
  static TrainConfig for_profile(Profile p) { return p == Profile::desk ? desk() : paper(); }

  // Applies one dotted key; unknown keys and malformed values throw.
  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
  void validate() const;
};

// key=value lines with optional [section] headers that prefix later keys.
// A `profile` key anywhere selects the defaults before other keys apply.
TrainConfig parse_config_text(const std::string& text);
TrainConfig load_config_file(const std::string& path);

// Line-delimited JSON records, flushed per record.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::string& path, bool append = false);
  bool enabled() const { return static_cast<bool>(os_); }
  void write(const std::string& json_line);

 private:
  std::unique_ptr<std::ofstream> os_;
};

// ---------------------------------------------------------------------------
// Demonstrations

using ExpertFn = std::function<RowVectorF(const TaskSpec&, const std::vector<double>&)>;

struct DemoCollectionReport {
  int attempts = 0;
  int accepted = 0;
  std::vector<double> returns;
};

// Rolls the expert until `n` episodes pass the quality filter. Success-scored
// tasks need success; return-scored tasks need a return of at least
// `min_quality` times the running median of attempted returns. Throws after
// 10 n attempts without reaching n acceptances.
std::vector<EpisodeRecord> collect_demos(const std::string& task, int n, std::uint64_t seed,
                                         const PaddedDims& dims, double min_quality = 0.75,
                                         const ExpertFn& expert = {},
                                         DemoCollectionReport* report = nullptr);

// ---------------------------------------------------------------------------
// Agent

struct UpdateReport {
  ModelLossReport model;
  double bc = 0.0;
  double q = 0.0;
  double entropy = 0.0;
  double grad_norm_model = 0.0;
  double grad_norm_policy = 0.0;
};

struct TaskEval {
  std::string task;
  std::string mode;
  double score = 0.0;
  double closed_score = -1.0;  // filled for open-loop rows when available
  std::vector<double> episode_scores;
};

enum class ActorKind { planner, prior };

struct EvalOptions {
  int episodes = 10;
  Index window = 0;  // 0: closed loop; otherwise open loop with this window
  ActorKind actor = ActorKind::planner;
  std::uint64_t seed = 12345;
};

class Agent {
 public:
  explicit Agent(TrainConfig cfg);

  TrainConfig config;
  EmbeddingProvider embeddings;
  TaskTable table;
  WorldModel<float> wm;
  DualBuffer buffer;
  Rng rng;
  std::int64_t env_steps = 0;
  std::int64_t updates = 0;
  std::int64_t pretrain_steps = 0;
  std::int64_t fallbacks = 0;
  std::int64_t nonfinite_candidates = 0;

  int task_index(const std::string& name) const;
  void load_demos(const std::vector<EpisodeRecord>& episodes, const std::vector<std::string>& names);
  // Throws naming the first configured task without demonstrations.
  void require_demos() const;

  UpdateReport update();          // one RL update on a mixed batch
  UpdateReport pretrain_update();  // one update on a demo-only batch
  double bc_update();              // one behavior cloning update
  std::int64_t updates_owed() const;

  // One planner decision at an observation; `prev` is updated in place.
  RowVectorF act(int task, const RowVectorF& obs, std::optional<PlanState>& prev, Rng& rng,
                 double beta, bool deterministic);
  RowVectorF prior_act(int task, const RowVectorF& obs) const;

  std::vector<TaskEval> evaluate(const std::vector<std::string>& tasks, const EvalOptions& opt);

  // Round-robin collection and updates until `total_env_steps`.
  void train(MetricsWriter& metrics, const std::string& checkpoint_path = {},
             double fixed_beta = -1.0);
  void pretrain(MetricsWriter& metrics, std::int64_t iters);
  void bc_train(MetricsWriter& metrics, std::int64_t iters);

  void save(const std::string& path) const;
  static Agent load(const std::string& path);

 private:
  Matrix<float> encode_obs(int task, const RowVectorF& obs) const;
  void write_eval(MetricsWriter& metrics, const std::string& phase, std::int64_t step,
                  const std::vector<TaskEval>& rows) const;
};

double mean_score(const std::vector<TaskEval>& rows);

// Held-out adaptation: zero-shot evaluation, then single-task online RL with
// online-only batches and no planning bias. `scratch` reinitializes the
// world model first.
struct FinetuneReport {
  double zero_shot = 0.0;
  double final_score = 0.0;
};
FinetuneReport finetune(Agent& agent, const std::string& task, std::int64_t env_steps,
                        MetricsWriter& metrics, int eval_episodes, bool scratch = false);

// Renders one SVG per metric family from a metrics file; returns written paths.
std::vector<std::string> plot_metrics(const std::string& metrics_path, const std::string& out_dir);

}  // namespace newt
