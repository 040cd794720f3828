#pragma once

// Demonstration and online episode storage with within-episode subsequence
// sampling. Demo episodes are kept for the whole run; online episodes are
// evicted oldest-first, whole episodes at a time.

#include <deque>
#include <shared_mutex>
#include <string>
#include <vector>

#include "newt/batch.hpp"
#include "newt/common.hpp"
#include "newt/tasks.hpp"

namespace newt {

enum class EpisodeSource { demo, online };

struct EpisodeRecord {
  int task_id = 0;
  MatrixF states;   // (T+1) x state_dim
  MatrixF actions;  // T x action_dim
  VectorF rewards;  // T
  EpisodeSource source = EpisodeSource::online;

  Index length() const { return actions.rows(); }
  void validate() const;
};

// Per-task metadata needed to assemble batches: language embedding, masks,
// discount. Indexed by EpisodeRecord::task_id.
struct TaskTable {
  std::vector<TaskSpec> tasks;
  Index lang_dim() const { return tasks.empty() ? 0 : tasks[0].lang_embedding.size(); }
};

class DualBuffer {
 public:
  explicit DualBuffer(Index online_capacity = 500000, double demo_fraction = 0.5)
      : capacity_(online_capacity), demo_fraction_(demo_fraction) {}
  DualBuffer(DualBuffer&& other) noexcept;
  DualBuffer& operator=(DualBuffer&& other) noexcept;

  // Masked-out state/action entries are zeroed on the way in.
  void add_episode(EpisodeRecord ep, const TaskTable& table);

  // ceil(batch * demo_fraction) rows from the demo store, the rest from the
  // online store. Every valid (episode, offset) pair of a store is equally
  // likely. `seg_len` counts transitions.
  SegmentBatch<float> sample_segments(Index batch, Index seg_len, Rng& rng,
                                      const TaskTable& table) const;
  SegmentBatch<float> sample_demo_segments(Index batch, Index seg_len, Rng& rng,
                                           const TaskTable& table) const;

  Index demo_episodes() const;
  Index online_episodes() const;
  Index online_transitions() const;
  Index capacity() const { return capacity_; }
  double demo_fraction() const { return demo_fraction_; }
  void set_demo_fraction(double f) { demo_fraction_ = f; }
  Index demo_rows(Index batch) const;

  std::vector<EpisodeRecord> demo_snapshot() const;
  std::vector<EpisodeRecord> online_snapshot() const;
  bool can_sample(Index seg_len) const;

 private:
  struct Stored {
    EpisodeRecord ep;
    std::int64_t id;
  };
  static void draw(const std::deque<Stored>& store, Index n, Index seg_len, Rng& rng,
                   const TaskTable& table, bool demo, Index row0, SegmentBatch<float>& out);
  static SegmentBatch<float> allocate(Index batch, Index seg_len, const TaskTable& table,
                                      const std::deque<Stored>& any);

  mutable std::shared_mutex mutex_;
  std::deque<Stored> demo_;
  std::deque<Stored> online_;
  Index online_transitions_ = 0;
  Index capacity_;
  double demo_fraction_;
  std::int64_t next_id_ = 0;
};

// NEWTDEMO container:
//   "NEWTDEMO" | u32 version | u32 task count | per task: u32 len, name bytes
//   | u32 episode count | per episode: u32 task index, u32 T, u32 state_dim,
//   u32 action_dim, f32 states[(T+1) * state_dim], f32 actions[T * action_dim],
//   f32 rewards[T]. All integers and floats little-endian.
struct DemoFile {
  std::vector<std::string> task_names;
  std::vector<EpisodeRecord> episodes;  // task_id indexes task_names
};

inline constexpr std::uint32_t kDemoFileVersion = 1;

void write_demo_file(const std::string& path, const DemoFile& file);
DemoFile read_demo_file(const std::string& path);

}  // namespace newt
