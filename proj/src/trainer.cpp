#include "newt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "newt/binary_io.hpp"

namespace newt {

using json = nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  auto sm = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return sm(sm(sm(a) ^ b) ^ c);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key " + key + ": expected a number, got '" + v + "'");
  }
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d) || std::abs(d) > 9e15)
    throw std::invalid_argument("config key " + key + ": expected an integer, got '" + v + "'");
  return static_cast<std::int64_t>(d);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config key " + key + ": expected a flag, got '" + v + "'");
}

std::string fmt(double d) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

// Each entry reads and writes one config key.
struct KeyDef {
  const char* key;
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define NEWT_INT(K, FIELD)                                                                  \
  KeyDef {                                                                                  \
    K, [](TrainConfig& c, const std::string& k, const std::string& v) {                     \
      c.FIELD = static_cast<decltype(c.FIELD)>(to_int(k, v));                               \
    },                                                                                      \
        [](const TrainConfig& c) { return std::to_string(c.FIELD); }                        \
  }
#define NEWT_REAL(K, FIELD)                                                                 \
  KeyDef {                                                                                  \
    K, [](TrainConfig& c, const std::string& k, const std::string& v) {                     \
      c.FIELD = to_double(k, v);                                                            \
    },                                                                                      \
        [](const TrainConfig& c) { return fmt(c.FIELD); }                                   \
  }
#define NEWT_FLAG(K, FIELD)                                                                 \
  KeyDef {                                                                                  \
    K, [](TrainConfig& c, const std::string& k, const std::string& v) {                     \
      c.FIELD = to_bool(k, v);                                                              \
    },                                                                                      \
        [](const TrainConfig& c) { return std::string(c.FIELD ? "true" : "false"); }        \
  }
#define NEWT_TEXT(K, FIELD)                                                                 \
  KeyDef {                                                                                  \
    K, [](TrainConfig& c, const std::string&, const std::string& v) { c.FIELD = v; },       \
        [](const TrainConfig& c) { return c.FIELD; }                                        \
  }

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> keys = {
      KeyDef{"tasks",
             [](TrainConfig& c, const std::string&, const std::string& v) { c.tasks = split_list(v); },
             [](const TrainConfig& c) { return join(c.tasks); }},
      NEWT_INT("seed", seed),
      NEWT_INT("total_env_steps", total_env_steps),
      NEWT_REAL("utd", utd),
      NEWT_INT("batch", batch),
      NEWT_INT("pretrain_iters", pretrain_iters),
      NEWT_REAL("bias.start", bias.start),
      NEWT_REAL("bias.end", bias.end),
      NEWT_INT("eval_every", eval_every),
      NEWT_INT("eval_episodes", eval_episodes),
      NEWT_INT("checkpoint_every", checkpoint_every),
      NEWT_INT("log_every", log_every),
      NEWT_INT("demos_per_task", demos_per_task),
      NEWT_REAL("demo_min_quality", demo_min_quality),
      KeyDef{"demo_files",
             [](TrainConfig& c, const std::string&, const std::string& v) {
               c.demo_files = split_list(v);
             },
             [](const TrainConfig& c) { return join(c.demo_files); }},
      NEWT_TEXT("embeddings_file", embeddings_file),
      NEWT_TEXT("metrics_file", metrics_file),
      NEWT_INT("dims.state", dims.state_dim),
      NEWT_INT("dims.action", dims.action_dim),
      NEWT_INT("dims.lang", dims.lang_dim),
      NEWT_INT("worldmodel.img_dim", wm.img_dim),
      NEWT_INT("worldmodel.latent_dim", wm.latent_dim),
      NEWT_INT("worldmodel.mlp_dim", wm.mlp_dim),
      NEWT_INT("worldmodel.enc_dim", wm.enc_dim),
      NEWT_INT("worldmodel.encoder_layers", wm.encoder_layers),
      NEWT_INT("worldmodel.q_ensemble", wm.q_ensemble),
      NEWT_INT("worldmodel.q_subset", wm.q_subset),
      NEWT_INT("worldmodel.horizon", wm.horizon),
      NEWT_REAL("worldmodel.lambda", wm.lambda),
      NEWT_REAL("worldmodel.coef_self_pred", wm.coef_self_pred),
      NEWT_REAL("worldmodel.coef_reward", wm.coef_reward),
      NEWT_REAL("worldmodel.coef_value", wm.coef_value),
      NEWT_REAL("worldmodel.coef_bc", wm.coef_bc),
      NEWT_REAL("worldmodel.coef_entropy", wm.coef_entropy),
      NEWT_REAL("worldmodel.log_std_min", wm.log_std_min),
      NEWT_REAL("worldmodel.log_std_max", wm.log_std_max),
      NEWT_INT("worldmodel.simplicial_v", wm.simplicial_v),
      NEWT_REAL("worldmodel.simplicial_tau", wm.simplicial_tau),
      NEWT_INT("worldmodel.num_bins", wm.num_bins),
      NEWT_REAL("worldmodel.vmin", wm.vmin),
      NEWT_REAL("worldmodel.vmax", wm.vmax),
      NEWT_REAL("worldmodel.target_momentum", wm.target_momentum),
      NEWT_REAL("worldmodel.scale_decay", wm.scale_decay),
      NEWT_INT("planner.horizon", planner.horizon),
      NEWT_INT("planner.iterations", planner.iterations),
      NEWT_INT("planner.population", planner.population),
      NEWT_INT("planner.prior_samples", planner.prior_samples),
      NEWT_INT("planner.elites", planner.elites),
      NEWT_REAL("planner.std_min", planner.std_min),
      NEWT_REAL("planner.std_max", planner.std_max),
      NEWT_REAL("planner.temperature", planner.temperature),
      NEWT_FLAG("planner.momentum", planner.momentum),
      NEWT_FLAG("planner.common_random_numbers", planner.common_random_numbers),
      NEWT_FLAG("planner.carry_best", planner.carry_best),
      KeyDef{"planner.selection",
             [](TrainConfig& c, const std::string& k, const std::string& v) {
               if (v == "elite")
                 c.planner.selection = FinalSelection::elite;
               else if (v == "gaussian")
                 c.planner.selection = FinalSelection::gaussian;
               else
                 throw std::invalid_argument("config key " + k + ": expected elite|gaussian");
             },
             [](const TrainConfig& c) {
               return std::string(c.planner.selection == FinalSelection::elite ? "elite"
                                                                               : "gaussian");
             }},
      NEWT_REAL("adam.lr", adam.lr),
      NEWT_REAL("adam.encoder_lr", adam.encoder_lr),
      NEWT_REAL("adam.beta1", adam.beta1),
      NEWT_REAL("adam.beta2", adam.beta2),
      NEWT_REAL("adam.eps", adam.eps),
      NEWT_REAL("adam.clip_norm", adam.clip_norm),
      NEWT_INT("replay.capacity", replay_capacity),
      NEWT_REAL("replay.demo_fraction", demo_fraction),
  };
  return keys;
}

#undef NEWT_INT
#undef NEWT_REAL
#undef NEWT_FLAG
#undef NEWT_TEXT

}  // namespace

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.profile = Profile::paper;
  c.tasks = default_training_tasks();
  c.total_env_steps = 100000000;
  return c;
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.profile = Profile::desk;
  c.tasks = default_training_tasks();
  c.total_env_steps = 100000;
  c.batch = 256;
  c.pretrain_iters = 5000;
  c.bias = {2000, 12000};
  c.eval_episodes = 10;
  c.dims = {16, 4, 64};
  c.wm = WorldModelConfig::desk();
  c.planner = PlannerConfig::desk();
  c.replay_capacity = 500000;
  return c;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "profile") throw std::invalid_argument("profile must be chosen before other keys");
  for (const auto& k : key_table())
    if (key == k.key) {
      k.set(*this, key, value);
      return;
    }
  throw std::invalid_argument("unknown config key: " + key);
}

std::string TrainConfig::to_text() const {
  std::string out = std::string("profile = ") + (profile == Profile::desk ? "desk" : "paper") + "\n";
  for (const auto& k : key_table()) out += std::string(k.key) + " = " + k.get(*this) + "\n";
  return out;
}

void TrainConfig::validate() const {
  if (tasks.empty()) throw std::invalid_argument("config: tasks must not be empty");
  const auto& known = task_registry();
  for (const auto& t : tasks)
    if (std::find(known.begin(), known.end(), t) == known.end())
      throw std::invalid_argument("config: unknown task " + t);
  if (!(utd > 0)) throw std::invalid_argument("config: utd must be > 0");
  if (batch < 1) throw std::invalid_argument("config: batch must be >= 1");
  if (!(demo_fraction >= 0 && demo_fraction <= 1))
    throw std::invalid_argument("config: replay.demo_fraction must lie in [0, 1]");
  if (!(bias.start < bias.end)) throw std::invalid_argument("config: bias.start must be < bias.end");
  if (wm.state_dim != dims.state_dim || wm.action_dim != dims.action_dim ||
      wm.lang_dim != dims.lang_dim)
    throw std::invalid_argument("config: world model widths disagree with padded dims");
  wm.validate();
  planner.validate();
}

TrainConfig parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::string section, line;
  std::stringstream ss(text);
  int lineno = 0;
  Profile profile = Profile::paper;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw std::invalid_argument("config line " + std::to_string(lineno) +
                                                          ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!section.empty()) key = section + "." + key;
    if (key == "profile") {
      if (value == "desk")
        profile = Profile::desk;
      else if (value == "paper")
        profile = Profile::paper;
      else
        throw std::invalid_argument("config: profile must be paper or desk");
      continue;
    }
    kv.emplace_back(key, value);
  }
  TrainConfig c = TrainConfig::for_profile(profile);
  for (const auto& [k, v] : kv) c.set(k, v);
  c.wm.state_dim = c.dims.state_dim;
  c.wm.action_dim = c.dims.action_dim;
  c.wm.lang_dim = c.dims.lang_dim;
  c.validate();
  return c;
}

TrainConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

MetricsWriter::MetricsWriter(const std::string& path, bool append) {
  if (path.empty()) return;
  os_ = std::make_unique<std::ofstream>(path, append ? std::ios::app : std::ios::trunc);
  if (!*os_) throw std::runtime_error("cannot open metrics file " + path);
}

void MetricsWriter::write(const std::string& line) {
  if (!os_) return;
  *os_ << line << '\n';
  os_->flush();
}

// ---------------------------------------------------------------------------

std::vector<EpisodeRecord> collect_demos(const std::string& task, int n, std::uint64_t seed,
                                         const PaddedDims& dims, double min_quality,
                                         const ExpertFn& expert, DemoCollectionReport* report) {
  if (n < 1) throw std::invalid_argument("collect_demos: n must be >= 1");
  auto env = make_task(task, seed, dims);
  const TaskSpec& spec = env->spec();
  const ExpertFn policy = expert ? expert : ExpertFn(scripted_expert);
  DemoCollectionReport rep;
  std::vector<EpisodeRecord> out;
  const int max_attempts = 10 * n;
  while (static_cast<int>(out.size()) < n) {
    if (rep.attempts >= max_attempts) {
      std::ostringstream msg;
      msg << "demo collection for " << task << " aborted: " << rep.accepted << " of "
          << rep.attempts << " episodes accepted (need " << n << ", acceptance below 10%)";
      if (!rep.returns.empty()) {
        auto r = rep.returns;
        std::sort(r.begin(), r.end());
        msg << "; returns min " << r.front() << " median " << r[r.size() / 2] << " max "
            << r.back();
      }
      throw std::runtime_error(msg.str());
    }
    EpisodeRecord ep;
    ep.task_id = 0;
    ep.source = EpisodeSource::demo;
    const int T = spec.episode_len;
    ep.states.resize(T + 1, dims.state_dim);
    ep.actions.resize(T, dims.action_dim);
    ep.rewards.resize(T);
    ep.states.row(0) = env->observation();
    double ret = 0.0;
    bool success = false;
    for (int t = 0; t < T; ++t) {
      RowVectorF a = policy(spec, env->native_state());
      a = a.cwiseMax(-1.0f).cwiseMin(1.0f).cwiseProduct(spec.action_mask);
      const StepResult r = env->step(a);
      ep.actions.row(t) = a;
      ep.rewards(t) = static_cast<float>(r.reward);
      ep.states.row(t + 1) = r.obs;
      ret += r.reward;
      if (r.episode_done) success = r.success;
    }
    ++rep.attempts;
    rep.returns.push_back(ret);
    bool ok;
    if (spec.score_kind == ScoreKind::success) {
      ok = success;
    } else {
      auto r = rep.returns;
      std::sort(r.begin(), r.end());
      const std::size_t m = r.size();
      const double median = m % 2 ? r[m / 2] : 0.5 * (r[m / 2 - 1] + r[m / 2]);
      ok = ret >= min_quality * median;
    }
    if (ok) {
      ++rep.accepted;
      out.push_back(std::move(ep));
    }
  }
  if (report) *report = rep;
  return out;
}

// ---------------------------------------------------------------------------

Agent::Agent(TrainConfig cfg)
    : config(std::move(cfg)),
      embeddings(config.dims.lang_dim),
      buffer(config.replay_capacity, config.demo_fraction),
      rng(mix(config.seed, 0x5eed)) {
  config.wm.state_dim = config.dims.state_dim;
  config.wm.action_dim = config.dims.action_dim;
  config.wm.lang_dim = config.dims.lang_dim;
  config.validate();
  if (!config.embeddings_file.empty()) embeddings.load_overrides(config.embeddings_file);
  for (const auto& name : config.tasks) table.tasks.push_back(task_spec(name, config.dims, &embeddings));
  wm = make_world_model<float>(config.wm, mix(config.seed, 0x11));
}

int Agent::task_index(const std::string& name) const {
  for (std::size_t i = 0; i < table.tasks.size(); ++i)
    if (table.tasks[i].name == name) return static_cast<int>(i);
  return -1;
}

void Agent::load_demos(const std::vector<EpisodeRecord>& episodes,
                       const std::vector<std::string>& names) {
  for (EpisodeRecord ep : episodes) {
    if (ep.task_id < 0 || ep.task_id >= static_cast<int>(names.size()))
      throw std::invalid_argument("demo episode has an invalid task index");
    const int ti = task_index(names[ep.task_id]);
    if (ti < 0) continue;  // demos for tasks outside this run are ignored
    ep.task_id = ti;
    ep.source = EpisodeSource::demo;
    buffer.add_episode(std::move(ep), table);
  }
}

void Agent::require_demos() const {
  std::vector<int> count(table.tasks.size(), 0);
  for (const auto& ep : buffer.demo_snapshot()) ++count.at(ep.task_id);
  for (std::size_t i = 0; i < count.size(); ++i)
    if (count[i] == 0)
      throw std::runtime_error("no demonstrations for task " + table.tasks[i].name +
                               "; run collect-demos for it first");
}

namespace {

UpdateReport joint_update(Agent& a, const SegmentBatch<float>& batch, double q_coef) {
  UpdateReport rep;
  auto& wm = a.wm;
  wm.model.zero_grad();
  wm.policy.zero_grad();
  rep.model = model_loss(wm, batch, a.rng);
  rep.grad_norm_model = adam_step(wm.model, a.config.adam);
  PolicyLossOptions opt;
  opt.q_coef = q_coef;
  auto p = policy_loss(wm, batch, a.rng, opt);
  rep.grad_norm_policy = adam_step(wm.policy, a.config.adam);
  wm.scale.update(p.q_values);
  ema_update(wm.target, wm.model, wm.config.target_momentum);
  rep.bc = p.bc;
  rep.q = p.q;
  rep.entropy = p.entropy;
  return rep;
}

json update_json(const char* event, std::int64_t step, std::int64_t update, const UpdateReport& r) {
  return json{{"event", event},
              {"step", step},
              {"update", update},
              {"losses",
               {{"total", r.model.total + r.bc + r.q + r.entropy},
                {"self_pred", r.model.self_pred},
                {"reward", r.model.reward},
                {"value", r.model.value},
                {"bc", r.bc},
                {"q", r.q},
                {"entropy", r.entropy}}},
              {"grad_norm", {{"model", r.grad_norm_model}, {"policy", r.grad_norm_policy}}}};
}

}  // namespace

UpdateReport Agent::update() {
  const auto batch = buffer.sample_segments(config.batch, config.wm.horizon, rng, table);
  auto rep = joint_update(*this, batch, 1.0);
  ++updates;
  return rep;
}

UpdateReport Agent::pretrain_update() {
  const auto batch = buffer.sample_demo_segments(config.batch, config.wm.horizon, rng, table);
  auto rep = joint_update(*this, batch, 0.0);
  ++pretrain_steps;
  return rep;
}

double Agent::bc_update() {
  const auto batch = buffer.sample_demo_segments(config.batch, config.wm.horizon, rng, table);
  wm.model.zero_grad();
  wm.policy.zero_grad();
  const double loss = bc_loss(wm, batch);
  adam_step(wm.model, config.adam);
  adam_step(wm.policy, config.adam);
  ++pretrain_steps;
  return loss;
}

std::int64_t Agent::updates_owed() const {
  // The small offset keeps products such as 0.075 * 1000 from landing just
  // below an integer.
  const auto due = static_cast<std::int64_t>(
      std::floor(config.utd * static_cast<double>(env_steps) + 1e-9));
  return std::max<std::int64_t>(0, due - updates);
}

Matrix<float> Agent::encode_obs(int task, const RowVectorF& obs) const {
  const TaskSpec& s = table.tasks.at(task);
  return encode(wm, Matrix<float>(obs), Matrix<float>(), Matrix<float>(s.lang_embedding),
                Matrix<float>(s.state_mask));
}

RowVectorF Agent::act(int task, const RowVectorF& obs, std::optional<PlanState>& prev, Rng& r,
                      double beta, bool deterministic) {
  const TaskSpec& s = table.tasks.at(task);
  LatentPlanningModel<float> m(wm, encode_obs(task, obs), Matrix<float>(s.lang_embedding),
                               s.action_mask.cast<double>(), s.gamma);
  PlanOptions o;
  o.beta = beta;
  o.deterministic = deterministic;
  const PlanResult res = plan(m, prev ? &*prev : nullptr, config.planner, r, o);
  prev = res.state;
  fallbacks += res.fallback ? 1 : 0;
  nonfinite_candidates += res.nonfinite;
  return res.actions.row(0).cast<float>();
}

RowVectorF Agent::prior_act(int task, const RowVectorF& obs) const {
  const TaskSpec& s = table.tasks.at(task);
  const auto pi = policy_forward(wm, encode_obs(task, obs), Matrix<float>(s.lang_embedding),
                                 Matrix<float>(s.action_mask), Matrix<float>());
  return pi.mean_action;
}

namespace {

// Drops the first k steps of a plan, filling the tail with the prior.
PlanState shift_plan(PlanState s, Index k, double std_max) {
  const Index H = s.mu.rows();
  for (Index t = 0; t < H; ++t) {
    if (t + k < H) {
      s.mu.row(t) = s.mu.row(t + k);
      s.sigma.row(t) = s.sigma.row(t + k);
    } else {
      s.mu.row(t).setZero();
      s.sigma.row(t).setConstant(std_max);
    }
  }
  return s;
}

}  // namespace

std::vector<TaskEval> Agent::evaluate(const std::vector<std::string>& tasks,
                                      const EvalOptions& opt) {
  if (opt.window < 0) throw std::invalid_argument("evaluate: open-loop horizon must be >= 1");
  const Index window = opt.window == 0 ? 1 : opt.window;
  PlannerConfig pc = config.planner;
  pc.horizon = std::max(window, pc.horizon);
  std::vector<TaskEval> rows;
  for (const auto& name : tasks) {
    int ti = task_index(name);
    if (ti < 0) {
      table.tasks.push_back(task_spec(name, config.dims, &embeddings));
      ti = static_cast<int>(table.tasks.size()) - 1;
    }
    const TaskSpec& spec = table.tasks[ti];
    TaskEval row;
    row.task = name;
    row.mode = opt.actor == ActorKind::prior ? "prior"
               : opt.window == 0             ? "closed"
                                             : "open:" + std::to_string(opt.window);
    for (int e = 0; e < opt.episodes; ++e) {
      auto env = make_task(name, mix(opt.seed, e, 0xe7a1), config.dims, &embeddings);
      Rng prng(mix(opt.seed, e, 0x91a2));
      RowVectorF obs = env->observation();
      std::optional<PlanState> prev;
      std::vector<RowVectorF> queue;
      std::size_t next = 0;
      EpisodeSummary sum;
      for (int t = 0; t < spec.episode_len; ++t) {
        RowVectorF a;
        if (opt.actor == ActorKind::prior) {
          a = prior_act(ti, obs);
        } else {
          if (next >= queue.size()) {
            LatentPlanningModel<float> m(wm, encode_obs(ti, obs), Matrix<float>(spec.lang_embedding),
                                         spec.action_mask.cast<double>(), spec.gamma);
            PlanOptions o;
            o.mode = PlanMode::open;
            o.deterministic = true;
            const PlanResult res = plan(m, prev ? &*prev : nullptr, pc, prng, o);
            fallbacks += res.fallback ? 1 : 0;
            nonfinite_candidates += res.nonfinite;
            queue.clear();
            next = 0;
            for (Index k = 0; k < window; ++k) queue.push_back(res.actions.row(k).cast<float>());
            // plan() shifts by one on warm start; account for the rest.
            prev = shift_plan(res.state, window - 1, pc.std_max);
          }
          a = queue[next++];
        }
        const StepResult r = env->step(a);
        sum.episode_return += r.reward;
        obs = r.obs;
        if (r.episode_done) sum.success = r.success;
      }
      row.episode_scores.push_back(normalized_score(spec, sum));
    }
    double total = 0.0;
    for (double s : row.episode_scores) total += s;
    row.score = row.episode_scores.empty() ? 0.0 : total / static_cast<double>(row.episode_scores.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

double mean_score(const std::vector<TaskEval>& rows) {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.score;
  return s / static_cast<double>(rows.size());
}

void Agent::write_eval(MetricsWriter& metrics, const std::string& phase, std::int64_t step,
                       const std::vector<TaskEval>& rows) const {
  for (const auto& r : rows)
    metrics.write(json{{"event", "eval"},
                       {"phase", phase},
                       {"step", step},
                       {"task", r.task},
                       {"mode", r.mode},
                       {"score", r.score},
                       {"fallback_count", fallbacks}}
                      .dump());
  metrics.write(json{{"event", "eval_mean"},
                     {"phase", phase},
                     {"step", step},
                     {"score", mean_score(rows)},
                     {"fallback_count", fallbacks}}
                    .dump());
}

void Agent::pretrain(MetricsWriter& metrics, std::int64_t iters) {
  for (std::int64_t i = 0; i < iters; ++i) {
    const UpdateReport r = pretrain_update();
    if (config.log_every > 0 && (pretrain_steps % config.log_every == 0 || i + 1 == iters))
      metrics.write(update_json("pretrain", pretrain_steps, pretrain_steps, r).dump());
  }
  if (config.eval_episodes > 0) {
    EvalOptions o;
    o.episodes = config.eval_episodes;
    o.actor = ActorKind::prior;
    o.seed = mix(config.seed, 0xe1);
    write_eval(metrics, "pretrain", pretrain_steps, evaluate(config.tasks, o));
  }
}

void Agent::bc_train(MetricsWriter& metrics, std::int64_t iters) {
  for (std::int64_t i = 0; i < iters; ++i) {
    const double loss = bc_update();
    if (config.log_every > 0 && (pretrain_steps % config.log_every == 0 || i + 1 == iters))
      metrics.write(json{{"event", "bc"},
                         {"step", pretrain_steps},
                         {"update", pretrain_steps},
                         {"losses", {{"bc", loss}}},
                         {"grad_norm",
                          {{"dynamics", wm.model.grad_norm("dyn")},
                           {"reward", wm.model.grad_norm("rew")},
                           {"q", wm.model.grad_norm("q")}}}}
                        .dump());
  }
  if (config.eval_episodes > 0) {
    EvalOptions o;
    o.episodes = config.eval_episodes;
    o.actor = ActorKind::prior;
    o.seed = mix(config.seed, 0xe1);
    write_eval(metrics, "bc", pretrain_steps, evaluate(config.tasks, o));
  }
}

void Agent::train(MetricsWriter& metrics, const std::string& checkpoint_path, double fixed_beta) {
  struct Slot {
    std::unique_ptr<Environment> env;
    RowVectorF obs;
    std::vector<RowVectorF> states, actions;
    std::vector<float> rewards;
    std::optional<PlanState> plan;
    double ret = 0.0;
  };
  const std::int64_t start_steps = env_steps;
  Rng act_rng(mix(config.seed, 0xac7, static_cast<std::uint64_t>(start_steps)));
  std::vector<Slot> slots(table.tasks.size());
  for (std::size_t k = 0; k < slots.size(); ++k) {
    slots[k].env = make_task(table.tasks[k].name, mix(config.seed, k, static_cast<std::uint64_t>(start_steps)),
                             config.dims, &embeddings);
    slots[k].obs = slots[k].env->observation();
    slots[k].states.push_back(slots[k].obs);
  }
  auto last_log = std::chrono::steady_clock::now();
  std::int64_t next_eval = config.eval_every > 0 ? (env_steps / config.eval_every + 1) * config.eval_every : -1;
  std::int64_t next_ckpt =
      config.checkpoint_every > 0 ? (env_steps / config.checkpoint_every + 1) * config.checkpoint_every : -1;

  while (env_steps < config.total_env_steps) {
    for (std::size_t k = 0; k < slots.size() && env_steps < config.total_env_steps; ++k) {
      Slot& s = slots[k];
      const double beta =
          fixed_beta >= 0.0 ? fixed_beta : bias_coef(static_cast<double>(env_steps), config.bias);
      const RowVectorF a = act(static_cast<int>(k), s.obs, s.plan, act_rng, beta, false);
      const StepResult r = s.env->step(a);
      ++env_steps;
      s.actions.push_back(a.cwiseProduct(table.tasks[k].action_mask));
      s.rewards.push_back(static_cast<float>(r.reward));
      s.states.push_back(r.obs);
      s.ret += r.reward;
      s.obs = r.obs;
      if (r.episode_done) {
        EpisodeRecord ep;
        ep.task_id = static_cast<int>(k);
        ep.source = EpisodeSource::online;
        const Index T = static_cast<Index>(s.actions.size());
        ep.states.resize(T + 1, config.dims.state_dim);
        ep.actions.resize(T, config.dims.action_dim);
        ep.rewards.resize(T);
        for (Index t = 0; t <= T; ++t) ep.states.row(t) = s.states[t];
        for (Index t = 0; t < T; ++t) {
          ep.actions.row(t) = s.actions[t];
          ep.rewards(t) = s.rewards[t];
        }
        buffer.add_episode(std::move(ep), table);
        const double score = normalized_score(table.tasks[k], {s.ret, r.success});
        metrics.write(json{{"event", "episode"},
                           {"step", env_steps},
                           {"task", table.tasks[k].name},
                           {"return", s.ret},
                           {"score", score},
                           {"beta", beta},
                           {"fallback_count", fallbacks}}
                          .dump());
        s.obs = r.reset_obs;
        s.states.assign(1, s.obs);
        s.actions.clear();
        s.rewards.clear();
        s.plan.reset();
        s.ret = 0.0;
      }
    }
    // Updates owed by the UTD ratio, once online data can be sampled.
    if (buffer.can_sample(config.wm.horizon)) {
      for (std::int64_t n = updates_owed(); n > 0; --n) {
        UpdateReport r;
        try {
          r = update();
        } catch (const NonFiniteError& e) {
          if (!checkpoint_path.empty()) save(checkpoint_path + ".diverged");
          throw NonFiniteError(std::string("training diverged at env step ") +
                               std::to_string(env_steps) + ": " + e.what());
        }
        if (config.log_every > 0 && updates % config.log_every == 0) {
          json j = update_json("update", env_steps, updates, r);
          j["beta"] = fixed_beta >= 0.0 ? fixed_beta : bias_coef(static_cast<double>(env_steps), config.bias);
          j["fallback_count"] = fallbacks;
          metrics.write(j.dump());
        }
      }
    }
    if (next_eval > 0 && env_steps >= next_eval) {
      EvalOptions o;
      o.episodes = config.eval_episodes;
      o.seed = mix(config.seed, 0xe2);
      write_eval(metrics, "train", env_steps, evaluate(config.tasks, o));
      next_eval += config.eval_every;
    }
    if (next_ckpt > 0 && env_steps >= next_ckpt && !checkpoint_path.empty()) {
      save(checkpoint_path);
      next_ckpt += config.checkpoint_every;
    }
    const auto now = std::chrono::steady_clock::now();
    if (now - last_log > std::chrono::seconds(30)) {
      std::cerr << "env steps " << env_steps << "/" << config.total_env_steps << ", updates "
                << updates << "\n";
      last_log = now;
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: u64 LE header length | JSON header | float32 LE payload.

namespace {

struct PayloadWriter {
  json arrays = json::object();
  std::string payload;

  void add(const std::string& name, const MatrixF& m) {
    arrays[name] = {{"dtype", "f32"},
                    {"shape", {m.rows(), m.cols()}},
                    {"offset", payload.size()}};
    payload.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * 4);
  }
};

MatrixF read_array(const json& arrays, const std::string& payload, const std::string& name) {
  if (!arrays.contains(name)) throw io::FormatError("checkpoint lacks array " + name);
  const auto& a = arrays.at(name);
  if (a.at("dtype") != "f32") throw io::FormatError("checkpoint array " + name + " is not f32");
  const Index r = a.at("shape")[0].get<Index>(), c = a.at("shape")[1].get<Index>();
  const std::size_t off = a.at("offset").get<std::size_t>();
  const std::size_t bytes = static_cast<std::size_t>(r * c) * 4;
  if (off + bytes > payload.size()) throw io::FormatError("checkpoint array " + name + " overruns payload");
  MatrixF m(r, c);
  std::memcpy(m.data(), payload.data() + off, bytes);
  return m;
}

void write_store(PayloadWriter& w, const std::string& prefix, const ParamStore<float>& s,
                 bool moments) {
  for (const auto& [name, e] : s.entries) {
    w.add(prefix + "/" + name + "/values", e.values);
    if (moments) {
      w.add(prefix + "/" + name + "/adam_m", e.adam_m);
      w.add(prefix + "/" + name + "/adam_v", e.adam_v);
    }
  }
}

void read_store(const json& arrays, const std::string& payload, const std::string& prefix,
                ParamStore<float>& s, bool moments) {
  for (auto& [name, e] : s.entries) {
    auto load = [&](const char* what, MatrixF& dst) {
      MatrixF m = read_array(arrays, payload, prefix + "/" + name + "/" + what);
      if (m.rows() != dst.rows() || m.cols() != dst.cols())
        throw io::FormatError("checkpoint shape mismatch for " + prefix + "/" + name);
      dst = std::move(m);
    };
    load("values", e.values);
    if (moments) {
      load("adam_m", e.adam_m);
      load("adam_v", e.adam_v);
    }
    e.grad.setZero();
  }
}

}  // namespace

void Agent::save(const std::string& path) const {
  PayloadWriter w;
  write_store(w, "model", wm.model, true);
  write_store(w, "policy", wm.policy, true);
  write_store(w, "target", wm.target, false);
  json demo_tasks = json::array(), online_tasks = json::array();
  auto put_eps = [&](const std::vector<EpisodeRecord>& eps, const std::string& kind, json& ids) {
    for (std::size_t i = 0; i < eps.size(); ++i) {
      const std::string base = "replay/" + kind + "/" + std::to_string(i);
      w.add(base + "/states", eps[i].states);
      w.add(base + "/actions", eps[i].actions);
      w.add(base + "/rewards", MatrixF(eps[i].rewards.transpose()));
      ids.push_back(eps[i].task_id);
    }
  };
  put_eps(buffer.demo_snapshot(), "demo", demo_tasks);
  put_eps(buffer.online_snapshot(), "online", online_tasks);
  json header{{"format", "newt-checkpoint"},
              {"version", 1},
              {"config", config.to_text()},
              {"counters",
               {{"env_steps", env_steps},
                {"updates", updates},
                {"pretrain_steps", pretrain_steps},
                {"fallbacks", fallbacks},
                {"nonfinite_candidates", nonfinite_candidates},
                {"model_adam_steps", wm.model.step_count},
                {"policy_adam_steps", wm.policy.step_count}}},
              {"scale", {{"p5", wm.scale.p5}, {"p95", wm.scale.p95}}},
              {"rng", rng.serialize()},
              {"replay", {{"demo_tasks", demo_tasks}, {"online_tasks", online_tasks}}},
              {"arrays", w.arrays}};
  const std::string h = header.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path);
    io::write_u64(os, h.size());
    io::write_bytes(os, h);
    io::write_bytes(os, w.payload);
    if (!os) throw std::runtime_error("write failed for checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

Agent Agent::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  const std::uint64_t hlen = io::read_u64(is, "header length");
  if (hlen > (1ULL << 31)) throw io::FormatError("implausible checkpoint header length");
  const json header = json::parse(io::read_bytes(is, hlen, "header"));
  if (header.value("format", "") != "newt-checkpoint") throw io::FormatError(path + " is not a checkpoint");
  std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  Agent a(parse_config_text(header.at("config").get<std::string>()));
  const json& arrays = header.at("arrays");
  read_store(arrays, payload, "model", a.wm.model, true);
  read_store(arrays, payload, "policy", a.wm.policy, true);
  read_store(arrays, payload, "target", a.wm.target, false);
  const json& c = header.at("counters");
  a.env_steps = c.at("env_steps");
  a.updates = c.at("updates");
  a.pretrain_steps = c.at("pretrain_steps");
  a.fallbacks = c.at("fallbacks");
  a.nonfinite_candidates = c.at("nonfinite_candidates");
  a.wm.model.step_count = c.at("model_adam_steps");
  a.wm.policy.step_count = c.at("policy_adam_steps");
  a.wm.scale.p5 = header.at("scale").at("p5");
  a.wm.scale.p95 = header.at("scale").at("p95");
  a.rng.deserialize(header.at("rng").get<std::string>());
  auto get_eps = [&](const std::string& kind, const json& ids, EpisodeSource src) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::string base = "replay/" + kind + "/" + std::to_string(i);
      EpisodeRecord ep;
      ep.task_id = ids[i];
      ep.source = src;
      ep.states = read_array(arrays, payload, base + "/states");
      ep.actions = read_array(arrays, payload, base + "/actions");
      ep.rewards = read_array(arrays, payload, base + "/rewards").transpose();
      a.buffer.add_episode(std::move(ep), a.table);
    }
  };
  get_eps("demo", header.at("replay").at("demo_tasks"), EpisodeSource::demo);
  get_eps("online", header.at("replay").at("online_tasks"), EpisodeSource::online);
  return a;
}

// ---------------------------------------------------------------------------

FinetuneReport finetune(Agent& agent, const std::string& task, std::int64_t env_steps,
                        MetricsWriter& metrics, int eval_episodes, bool scratch) {
  FinetuneReport rep;
  agent.config.tasks = {task};
  agent.table.tasks = {task_spec(task, agent.config.dims, &agent.embeddings)};
  agent.config.demo_fraction = 0.0;
  agent.buffer = DualBuffer(agent.config.replay_capacity, 0.0);
  if (scratch) agent.wm = make_world_model<float>(agent.config.wm, mix(agent.config.seed, 0x11));
  EvalOptions o;
  o.episodes = eval_episodes;
  o.seed = mix(agent.config.seed, 0xf7);
  auto zero = agent.evaluate({task}, o);
  rep.zero_shot = mean_score(zero);
  const std::string phase = scratch ? "scratch" : "finetune";
  for (const auto& r : zero)
    metrics.write(json{{"event", "eval"}, {"phase", phase + "_zero_shot"}, {"step", 0},
                       {"task", r.task}, {"mode", r.mode}, {"score", r.score}}
                      .dump());
  agent.env_steps = 0;
  agent.updates = 0;
  agent.config.total_env_steps = env_steps;
  agent.config.eval_every = 0;
  agent.train(metrics, {}, 0.0);
  auto fin = agent.evaluate({task}, o);
  rep.final_score = mean_score(fin);
  for (const auto& r : fin)
    metrics.write(json{{"event", "eval"}, {"phase", phase}, {"step", agent.env_steps},
                       {"task", r.task}, {"mode", r.mode}, {"score", r.score}}
                      .dump());
  return rep;
}

// ---------------------------------------------------------------------------

namespace {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> pts;
};

std::string svg_chart(const std::string& title, const std::string& xlabel,
                      const std::vector<Series>& series) {
  const double W = 720, Hh = 420, L = 70, R = 170, T = 40, B = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.pts) {
      x0 = std::min(x0, x), x1 = std::max(x1, x);
      y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return Hh - B - (y - y0) / (y1 - y0) * (Hh - T - B); };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << Hh
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << L << "\" y=\"24\" font-size=\"15\">" << title << "</text>\n"
     << "<line x1=\"" << L << "\" y1=\"" << Hh - B << "\" x2=\"" << W - R << "\" y2=\"" << Hh - B
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << Hh - B
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = y0 + (y1 - y0) * i / 4.0, x = x0 + (x1 - x0) * i / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fmt(y).substr(0, 7)
       << "</text>\n<text x=\"" << px(x) << "\" y=\"" << Hh - B + 16 << "\" text-anchor=\"middle\">"
       << static_cast<long long>(std::llround(x)) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << Hh - 12 << "\" text-anchor=\"middle\">" << xlabel
     << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* col = colors[k % 10];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (auto [x, y] : series[k].pts) os << px(x) << "," << py(y) << " ";
    os << "\"/>\n<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (k + 1) << "\" fill=\"" << col
       << "\">" << series[k].label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace

std::vector<std::string> plot_metrics(const std::string& metrics_path, const std::string& out_dir) {
  std::ifstream is(metrics_path);
  if (!is) throw std::runtime_error("cannot open metrics file " + metrics_path);
  std::map<std::string, Series> scores, losses, episodes;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(metrics_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const std::string ev = j.value("event", "");
    if (ev == "eval") {
      const std::string key = j.value("phase", "") + " " + j.value("task", "");
      scores[key].label = key;
      scores[key].pts.emplace_back(j.value("step", 0.0), j.value("score", 0.0));
    } else if (ev == "episode") {
      const std::string key = j.value("task", "");
      episodes[key].label = key;
      episodes[key].pts.emplace_back(j.value("step", 0.0), j.value("score", 0.0));
    } else if (j.contains("losses")) {
      for (auto it = j["losses"].begin(); it != j["losses"].end(); ++it) {
        const std::string key = ev + " " + it.key();
        losses[key].label = key;
        losses[key].pts.emplace_back(j.value("update", 0.0), it.value().get<double>());
      }
    }
  }
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;
  auto emit = [&](const std::string& file, const std::string& title, const std::string& xl,
                  const std::map<std::string, Series>& m) {
    if (m.empty()) return;
    std::vector<Series> v;
    for (const auto& [_, s] : m) v.push_back(s);
    const std::string p = (std::filesystem::path(out_dir) / file).string();
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p);
    os << svg_chart(title, xl, v);
    written.push_back(p);
  };
  emit("eval_scores.svg", "Evaluation score", "env step", scores);
  emit("episode_scores.svg", "Training episode score", "env step", episodes);
  emit("losses.svg", "Losses", "update", losses);
  return written;
}

}  // namespace newt
