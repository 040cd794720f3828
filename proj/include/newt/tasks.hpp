#pragma once

// MicroArcade: five small continuous-control tasks behind a unified, padded
// and masked observation/action interface, plus one held-out variant used
// for finetuning. Native dynamics are closed-form so every trajectory is
// reproducible from its seed.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "newt/common.hpp"

namespace newt {

struct PaddedDims {
  Index state_dim = 128;
  Index action_dim = 16;
  Index lang_dim = 512;
};

enum class ScoreKind { success, bounded_return };

struct TaskSpec {
  std::string name;
  std::string instruction;
  RowVectorF lang_embedding;
  Index state_dim_native = 0;
  Index action_dim_native = 0;
  int episode_len = 0;
  double gamma = 0.99;
  ScoreKind score_kind = ScoreKind::success;
  double return_lo = 0.0;
  double return_hi = 1.0;
  RowVectorF state_mask;   // padded width, 1 on the native prefix
  RowVectorF action_mask;  // padded width, 1 on the native prefix
  bool held_out = false;
};

struct StepResult {
  RowVectorF obs;  // observation after the step (terminal one when done)
  double reward = 0.0;
  bool episode_done = false;
  bool success = false;
  std::vector<double> info;  // native state snapshot after the step
  RowVectorF reset_obs;      // first observation of the next episode when done
};

struct EpisodeSummary {
  double episode_return = 0.0;
  bool success = false;
};

// Deterministic stand-in for a text encoder: hashed, seeded, unit norm.
// Entries loaded from an embeddings file take precedence.
class EmbeddingProvider {
 public:
  explicit EmbeddingProvider(Index dim, std::uint64_t salt = 0) : dim_(dim), salt_(salt) {}

  Index dim() const { return dim_; }
  RowVectorF embed(const std::string& text) const;
  void set_override(const std::string& text, RowVectorF v);
  void load_overrides(const std::string& path);
  std::size_t override_count() const { return overrides_.size(); }

 private:
  Index dim_;
  std::uint64_t salt_;
  std::map<std::string, RowVectorF> overrides_;
};

std::string normalize_instruction(const std::string& text);
RowVectorF embed_instruction(const std::string& text, Index lang_dim, std::uint64_t seed_salt = 0);

// Embeddings file: u32 dim, u32 count, then per entry u32 byte length, the
// UTF-8 text, and dim little-endian float32 values.
void write_embeddings_file(const std::string& path,
                           const std::vector<std::pair<std::string, RowVectorF>>& entries);
std::vector<std::pair<std::string, RowVectorF>> read_embeddings_file(const std::string& path);

double discount_for(int episode_len);

class Environment {
 public:
  virtual ~Environment() = default;

  const TaskSpec& spec() const { return spec_; }
  RowVectorF observation() const { return pad(native_state()); }
  int step_in_episode() const { return t_; }

  // Clamps to [-1, 1] and ignores masked entries; throws on nonfinite input.
  StepResult step(const RowVectorF& action);

  virtual std::vector<double> native_state() const = 0;
  virtual bool success() const = 0;

  RowVectorF pad(const std::vector<double>& native) const;
  std::vector<double> unpad(const RowVectorF& padded) const;

 protected:
  Environment(TaskSpec spec, std::uint64_t seed) : spec_(std::move(spec)), rng_(seed) {}
  void reset() {
    t_ = 0;
    reset_native(rng_);
  }
  virtual void reset_native(Rng& rng) = 0;
  // Advances one control step and returns the reward.
  virtual double advance(const std::vector<double>& action, Rng& rng) = 0;

  TaskSpec spec_;
  Rng rng_;
  int t_ = 0;
};

const std::vector<std::string>& task_registry();
// The five training tasks, in registry order.
std::vector<std::string> default_training_tasks();

// Builds a task instance; unknown names throw with the registry listed.
std::unique_ptr<Environment> make_task(const std::string& name, std::uint64_t seed,
                                       const PaddedDims& dims,
                                       const EmbeddingProvider* embeddings = nullptr);
TaskSpec task_spec(const std::string& name, const PaddedDims& dims,
                   const EmbeddingProvider* embeddings = nullptr);

// Deterministic controller per task; returns a padded action in [-1, 1].
RowVectorF scripted_expert(const TaskSpec& task, const std::vector<double>& native_state);

double normalized_score(const TaskSpec& task, const EpisodeSummary& episode);

}  // namespace newt
