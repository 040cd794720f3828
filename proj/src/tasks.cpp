#include "newt/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "newt/binary_io.hpp"

namespace newt {

namespace {

constexpr double kDt = 0.1;
constexpr double kDamping = 0.9;
constexpr double kArena = 1.0;

double clamp1(double v) { return std::clamp(v, -1.0, 1.0); }

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// splitmix64, used to expand the text hash into a normal stream that does not
// depend on the standard library's distribution implementations.
std::uint64_t splitmix(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double unit_open(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

// 2-D point mass with damped velocity; acceleration in [-1, 1]^2.
struct PointMass {
  double px = 0, py = 0, vx = 0, vy = 0;

  void step(double ax, double ay) {
    vx = kDamping * vx + kDt * ax;
    vy = kDamping * vy + kDt * ay;
    px += kDt * vx;
    py += kDt * vy;
    if (std::abs(px) > kArena) {
      px = std::copysign(kArena, px);
      vx = 0;
    }
    if (std::abs(py) > kArena) {
      py = std::copysign(kArena, py);
      vy = 0;
    }
  }
};

double dist(double ax, double ay, double bx, double by) { return std::hypot(ax - bx, ay - by); }

class PointReach : public Environment {
 public:
  PointReach(TaskSpec spec, std::uint64_t seed, double goal_lo, double goal_hi, bool corners)
      : Environment(std::move(spec), seed), goal_lo_(goal_lo), goal_hi_(goal_hi), corners_(corners) {
    reset();
  }
  std::vector<double> native_state() const override {
    return {pm_.px, pm_.py, pm_.vx, pm_.vy, gx_, gy_};
  }
  bool success() const override { return dist(pm_.px, pm_.py, gx_, gy_) < 0.1; }

 protected:
  void reset_native(Rng& rng) override {
    pm_ = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), 0.0, 0.0};
    if (corners_) {
      gx_ = rng.uniform(goal_lo_, goal_hi_) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
      gy_ = rng.uniform(goal_lo_, goal_hi_) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    } else {
      gx_ = rng.uniform(goal_lo_, goal_hi_);
      gy_ = rng.uniform(goal_lo_, goal_hi_);
    }
  }
  double advance(const std::vector<double>& a, Rng&) override {
    pm_.step(a[0], a[1]);
    return std::exp(-3.0 * dist(pm_.px, pm_.py, gx_, gy_));
  }

  PointMass pm_;
  double gx_ = 0, gy_ = 0;
  double goal_lo_, goal_hi_;
  bool corners_;
};

constexpr double kWallHalf = 0.02;
constexpr double kGapHalf = 0.25;

// Point mass with a wall along x = 0 that is open for |y| < kGapHalf.
class PointMaze : public Environment {
 public:
  PointMaze(TaskSpec spec, std::uint64_t seed) : Environment(std::move(spec), seed) { reset(); }
  std::vector<double> native_state() const override {
    return {pm_.px, pm_.py, pm_.vx, pm_.vy, gx_, gy_};
  }
  bool success() const override { return dist(pm_.px, pm_.py, gx_, gy_) < 0.1; }

 protected:
  void reset_native(Rng& rng) override {
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    pm_ = {side * rng.uniform(0.3, 0.8), rng.uniform(-0.8, 0.8), 0.0, 0.0};
    gx_ = -side * rng.uniform(0.3, 0.8);
    gy_ = rng.uniform(-0.8, 0.8);
  }
  double advance(const std::vector<double>& a, Rng&) override {
    const PointMass before = pm_;
    pm_.step(a[0], a[1]);
    const double x0 = before.px, x1 = pm_.px;
    const bool crosses = (x0 >= kWallHalf && x1 < kWallHalf) || (x0 <= -kWallHalf && x1 > -kWallHalf);
    if (crosses) {
      const double side = x0 > 0 ? 1.0 : -1.0;
      const double xw = side * kWallHalf;
      const double f = (x1 == x0) ? 0.0 : (xw - x0) / (x1 - x0);
      const double yc = before.py + f * (pm_.py - before.py);
      if (std::abs(yc) >= kGapHalf) {
        pm_.px = xw;
        pm_.vx = 0.0;
      }
    }
    return std::exp(-3.0 * dist(pm_.px, pm_.py, gx_, gy_));
  }

  PointMass pm_;
  double gx_ = 0, gy_ = 0;
};

constexpr double kChaseRadius = 0.5;
constexpr double kChaseRate = 0.05;

class Chase : public Environment {
 public:
  Chase(TaskSpec spec, std::uint64_t seed) : Environment(std::move(spec), seed) { reset(); }
  std::vector<double> native_state() const override {
    const double gx = kChaseRadius * std::cos(theta_), gy = kChaseRadius * std::sin(theta_);
    // Goal velocity per unit time.
    const double s = dir_ * kChaseRadius * kChaseRate / kDt;
    return {pm_.px, pm_.py, pm_.vx, pm_.vy, gx, gy, -s * std::sin(theta_), s * std::cos(theta_)};
  }
  bool success() const override { return false; }

 protected:
  void reset_native(Rng& rng) override {
    pm_ = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), 0.0, 0.0};
    theta_ = rng.uniform(0.0, 2.0 * std::numbers::pi);
    dir_ = rng.uniform() < 0.5 ? -1.0 : 1.0;
  }
  double advance(const std::vector<double>& a, Rng&) override {
    pm_.step(a[0], a[1]);
    theta_ += dir_ * kChaseRate;
    const double gx = kChaseRadius * std::cos(theta_), gy = kChaseRadius * std::sin(theta_);
    return std::exp(-3.0 * dist(pm_.px, pm_.py, gx, gy));
  }

  PointMass pm_;
  double theta_ = 0, dir_ = 1;
};

constexpr double kPushStep = 0.05;
constexpr double kContact = 0.05;

class Push1d : public Environment {
 public:
  Push1d(TaskSpec spec, std::uint64_t seed) : Environment(std::move(spec), seed) { reset(); }
  std::vector<double> native_state() const override { return {agent_, block_, goal_}; }
  bool success() const override { return std::abs(block_ - goal_) < 0.05; }

 protected:
  void reset_native(Rng& rng) override {
    block_ = rng.uniform(-0.4, 0.4);
    const double d = rng.uniform(0.2, 0.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    goal_ = block_ + d;
    agent_ = block_ - std::copysign(rng.uniform(0.1, 0.3), d);
  }
  double advance(const std::vector<double>& a, Rng&) override {
    const bool left = agent_ < block_;
    agent_ = std::clamp(agent_ + kPushStep * a[0], -kArena, kArena);
    if (left && agent_ > block_ - kContact) block_ = agent_ + kContact;
    if (!left && agent_ < block_ + kContact) block_ = agent_ - kContact;
    if (std::abs(block_) > kArena) {
      block_ = std::copysign(kArena, block_);
      agent_ = block_ + (left ? -kContact : kContact);
    }
    return std::exp(-3.0 * std::abs(block_ - goal_));
  }

  double agent_ = 0, block_ = 0, goal_ = 0;
};

constexpr double kPickup = 0.15;

class Collector : public Environment {
 public:
  Collector(TaskSpec spec, std::uint64_t seed) : Environment(std::move(spec), seed) { reset(); }
  std::vector<double> native_state() const override {
    return {pm_.px, pm_.py, pm_.vx, pm_.vy, cx_, cy_};
  }
  bool success() const override { return false; }

 protected:
  void reset_native(Rng& rng) override {
    pm_ = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), 0.0, 0.0};
    respawn(rng);
  }
  double advance(const std::vector<double>& a, Rng& rng) override {
    pm_.step(a[0], a[1]);
    if (dist(pm_.px, pm_.py, cx_, cy_) < kPickup) {
      respawn(rng);
      return 1.0;
    }
    return 0.0;
  }
  void respawn(Rng& rng) {
    cx_ = rng.uniform(-0.8, 0.8);
    cy_ = rng.uniform(-0.8, 0.8);
  }

  PointMass pm_;
  double cx_ = 0, cy_ = 0;
};

struct TaskInfo {
  std::string instruction;
  Index state_dim;
  Index action_dim;
  int episode_len;
  ScoreKind kind;
  double lo, hi;
  bool held_out;
};

const std::map<std::string, TaskInfo>& task_table() {
  static const std::map<std::string, TaskInfo> table = {
      {"point-reach",
       {"Embodiment: A point mass in a square arena, actuated by 2-D acceleration. "
        "Instruction: Move to the goal location and stay there.",
        6, 2, 100, ScoreKind::success, 0.0, 1.0, false}},
      {"point-maze",
       {"Embodiment: A point mass in a square arena split by a wall with a single gap, actuated "
        "by 2-D acceleration. Instruction: Pass through the gap and reach the goal on the other "
        "side.",
        6, 2, 200, ScoreKind::success, 0.0, 1.0, false}},
      {"chase",
       {"Embodiment: A point mass actuated by 2-D acceleration. Instruction: Catch the target "
        "circling the arena center and stay on top of it.",
        8, 2, 100, ScoreKind::bounded_return, 0.0, 80.0, false}},
      {"push-1d",
       {"Embodiment: A pusher on a rail that moves left or right. Instruction: Push the block "
        "along the rail until it rests on the goal marker.",
        3, 1, 50, ScoreKind::success, 0.0, 1.0, false}},
      {"collector",
       {"Embodiment: A point mass actuated by 2-D acceleration. Instruction: Collect as many "
        "coins as possible; a new coin appears whenever one is picked up.",
        6, 2, 250, ScoreKind::bounded_return, 0.0, 16.0, false}},
      {"point-reach-shifted",
       {"Embodiment: A point mass in a square arena, actuated by 2-D acceleration. "
        "Instruction: Move to the goal near one of the arena corners and stay there.",
        6, 2, 100, ScoreKind::success, 0.0, 1.0, true}},
  };
  return table;
}

}  // namespace

std::string normalize_instruction(const std::string& text) {
  std::string out;
  bool space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

RowVectorF embed_instruction(const std::string& text, Index lang_dim, std::uint64_t seed_salt) {
  const std::string norm = normalize_instruction(text);
  if (norm.empty()) throw std::invalid_argument("embed_instruction: empty text");
  if (lang_dim < 1) throw std::invalid_argument("embed_instruction: lang_dim must be positive");
  std::uint64_t state = fnv1a(norm) ^ (seed_salt * 0x9e3779b97f4a7c15ull);
  Eigen::VectorXd v(lang_dim);
  for (Index i = 0; i < lang_dim; i += 2) {
    const double u1 = unit_open(splitmix(state)), u2 = unit_open(splitmix(state));
    const double r = std::sqrt(-2.0 * std::log(u1));
    v(i) = r * std::cos(2.0 * std::numbers::pi * u2);
    if (i + 1 < lang_dim) v(i + 1) = r * std::sin(2.0 * std::numbers::pi * u2);
  }
  v /= v.norm();
  return v.transpose().cast<float>();
}

RowVectorF EmbeddingProvider::embed(const std::string& text) const {
  auto it = overrides_.find(normalize_instruction(text));
  if (it != overrides_.end()) return it->second;
  return embed_instruction(text, dim_, salt_);
}

void EmbeddingProvider::set_override(const std::string& text, RowVectorF v) {
  if (v.size() != dim_)
    throw DimensionError("embedding override for '" + text + "' has dim " +
                         std::to_string(v.size()) + ", expected " + std::to_string(dim_));
  overrides_[normalize_instruction(text)] = std::move(v);
}

void EmbeddingProvider::load_overrides(const std::string& path) {
  for (auto& [text, v] : read_embeddings_file(path)) set_override(text, std::move(v));
}

void write_embeddings_file(const std::string& path,
                           const std::vector<std::pair<std::string, RowVectorF>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path);
  const std::uint32_t dim = entries.empty() ? 0 : static_cast<std::uint32_t>(entries[0].second.size());
  io::write_u32(os, dim);
  io::write_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [text, v] : entries) {
    if (static_cast<std::uint32_t>(v.size()) != dim) throw DimensionError("embedding dims differ");
    io::write_u32(os, static_cast<std::uint32_t>(text.size()));
    io::write_bytes(os, text);
    io::write_f32s(os, v.data(), static_cast<std::size_t>(v.size()));
  }
}

std::vector<std::pair<std::string, RowVectorF>> read_embeddings_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  const std::uint32_t dim = io::read_u32(is, "embedding dim");
  const std::uint32_t count = io::read_u32(is, "embedding count");
  std::vector<std::pair<std::string, RowVectorF>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = io::read_u32(is, "text length");
    std::string text = io::read_bytes(is, len, "instruction text");
    RowVectorF v(dim);
    io::read_f32s(is, v.data(), dim, "embedding values");
    out.emplace_back(std::move(text), std::move(v));
  }
  return out;
}

double discount_for(int episode_len) {
  if (episode_len < 1) throw std::invalid_argument("discount_for: episode length must be >= 1");
  const double k = static_cast<double>(episode_len) / 5.0;
  return std::clamp((k - 1.0) / k, 0.95, 0.995);
}

StepResult Environment::step(const RowVectorF& action) {
  if (action.size() != spec_.action_mask.size())
    throw DimensionError("step: action width " + std::to_string(action.size()) + ", expected " +
                         std::to_string(spec_.action_mask.size()));
  if (!action.allFinite()) throw std::invalid_argument("step: nonfinite action");
  std::vector<double> a(spec_.action_dim_native);
  for (Index i = 0; i < spec_.action_dim_native; ++i) a[i] = clamp1(action(i));
  StepResult r;
  r.reward = advance(a, rng_);
  ++t_;
  r.info = native_state();
  r.obs = pad(r.info);
  if (t_ >= spec_.episode_len) {
    r.episode_done = true;
    r.success = success();
    reset();
    r.reset_obs = observation();
  }
  return r;
}

RowVectorF Environment::pad(const std::vector<double>& native) const {
  if (static_cast<Index>(native.size()) != spec_.state_dim_native)
    throw DimensionError("pad: native state width mismatch");
  RowVectorF out = RowVectorF::Zero(spec_.state_mask.size());
  for (Index i = 0; i < spec_.state_dim_native; ++i) out(i) = static_cast<float>(native[i]);
  return out;
}

std::vector<double> Environment::unpad(const RowVectorF& padded) const {
  if (padded.size() != spec_.state_mask.size()) throw DimensionError("unpad: width mismatch");
  std::vector<double> out(spec_.state_dim_native);
  for (Index i = 0; i < spec_.state_dim_native; ++i) out[i] = padded(i);
  return out;
}

const std::vector<std::string>& task_registry() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n{"point-reach", "point-maze", "chase", "push-1d", "collector",
                               "point-reach-shifted"};
    return n;
  }();
  return names;
}

std::vector<std::string> default_training_tasks() {
  std::vector<std::string> out;
  for (const auto& n : task_registry())
    if (!task_table().at(n).held_out) out.push_back(n);
  return out;
}

TaskSpec task_spec(const std::string& name, const PaddedDims& dims,
                   const EmbeddingProvider* embeddings) {
  auto it = task_table().find(name);
  if (it == task_table().end()) {
    std::string msg = "unknown task '" + name + "'; registered tasks:";
    for (const auto& n : task_registry()) msg += " " + n;
    throw std::invalid_argument(msg);
  }
  const TaskInfo& info = it->second;
  if (info.state_dim > dims.state_dim || info.action_dim > dims.action_dim)
    throw DimensionError("task " + name + " does not fit the padded dimensions");
  TaskSpec s;
  s.name = name;
  s.instruction = info.instruction;
  s.lang_embedding = embeddings ? embeddings->embed(info.instruction)
                                : embed_instruction(info.instruction, dims.lang_dim);
  if (s.lang_embedding.size() != dims.lang_dim)
    throw DimensionError("language embedding width mismatch for " + name);
  s.state_dim_native = info.state_dim;
  s.action_dim_native = info.action_dim;
  s.episode_len = info.episode_len;
  s.gamma = discount_for(info.episode_len);
  s.score_kind = info.kind;
  s.return_lo = info.lo;
  s.return_hi = info.hi;
  s.state_mask = RowVectorF::Zero(dims.state_dim);
  s.state_mask.head(info.state_dim).setOnes();
  s.action_mask = RowVectorF::Zero(dims.action_dim);
  s.action_mask.head(info.action_dim).setOnes();
  s.held_out = info.held_out;
  return s;
}

std::unique_ptr<Environment> make_task(const std::string& name, std::uint64_t seed,
                                       const PaddedDims& dims,
                                       const EmbeddingProvider* embeddings) {
  TaskSpec spec = task_spec(name, dims, embeddings);
  if (name == "point-reach")
    return std::make_unique<PointReach>(std::move(spec), seed, -0.6, 0.6, false);
  if (name == "point-reach-shifted")
    return std::make_unique<PointReach>(std::move(spec), seed, 0.65, 0.9, true);
  if (name == "point-maze") return std::make_unique<PointMaze>(std::move(spec), seed);
  if (name == "chase") return std::make_unique<Chase>(std::move(spec), seed);
  if (name == "push-1d") return std::make_unique<Push1d>(std::move(spec), seed);
  if (name == "collector") return std::make_unique<Collector>(std::move(spec), seed);
  throw std::logic_error("task table and factory disagree on " + name);
}

namespace {

// PD pursuit of a target point, with a feed-forward target velocity.
std::pair<double, double> pursue(const std::vector<double>& s, double tx, double ty,
                                 double tvx = 0.0, double tvy = 0.0, double kp = 4.0,
                                 double kd = 4.0) {
  return {clamp1(kp * (tx - s[0]) + kd * (tvx - s[2])), clamp1(kp * (ty - s[1]) + kd * (tvy - s[3]))};
}

}  // namespace

RowVectorF scripted_expert(const TaskSpec& task, const std::vector<double>& s) {
  if (static_cast<Index>(s.size()) != task.state_dim_native)
    throw DimensionError("scripted_expert: native state width mismatch");
  RowVectorF a = RowVectorF::Zero(task.action_mask.size());
  const std::string& n = task.name;
  std::pair<double, double> act{0.0, 0.0};
  if (n == "point-reach" || n == "point-reach-shifted") {
    act = pursue(s, s[4], s[5]);
  } else if (n == "point-maze") {
    const double side = s[0] >= 0 ? 1.0 : -1.0, goal_side = s[4] >= 0 ? 1.0 : -1.0;
    if (side == goal_side) {
      act = pursue(s, s[4], s[5]);
    } else if (std::abs(s[1]) > 0.08 && std::abs(s[0]) > 0.12) {
      act = pursue(s, side * 0.2, 0.0);
    } else {
      act = pursue(s, goal_side * 0.25, 0.0);
    }
  } else if (n == "chase") {
    const double lead = 0.3;
    act = pursue(s, s[4] + lead * s[6], s[5] + lead * s[7], s[6], s[7], 6.0, 4.0);
  } else if (n == "push-1d") {
    // The pusher can only push away from itself; once the block is at or past
    // the goal in that direction the pusher holds still.
    const double dir = s[1] > s[0] ? 1.0 : -1.0;
    const double target = s[2] - dir * kContact;
    a(0) = static_cast<float>(clamp1(dir * (target - s[0]) > 0.0 ? (target - s[0]) / kPushStep : 0.0));
    return a;
  } else if (n == "collector") {
    act = pursue(s, s[4], s[5], 0.0, 0.0, 8.0, 1.0);
  } else {
    throw std::invalid_argument("no scripted expert for task " + n);
  }
  a(0) = static_cast<float>(act.first);
  a(1) = static_cast<float>(act.second);
  return a;
}

double normalized_score(const TaskSpec& task, const EpisodeSummary& ep) {
  if (task.score_kind == ScoreKind::success) return ep.success ? 1.0 : 0.0;
  const double span = task.return_hi - task.return_lo;
  return std::clamp((ep.episode_return - task.return_lo) / span, 0.0, 1.0);
}

}  // namespace newt
