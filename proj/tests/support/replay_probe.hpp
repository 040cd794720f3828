#pragma once

// Synthetic episodes whose states carry (episode marker, step index), so a
// sampled segment reveals whether it crossed an episode boundary.

#include "newt/replay.hpp"

namespace newt::testing {

inline PaddedDims probe_dims() { return {8, 3, 4}; }

inline TaskTable probe_table() {
  TaskTable t;
  t.tasks.push_back(task_spec("point-reach", probe_dims()));
  t.tasks.push_back(task_spec("push-1d", probe_dims()));
  return t;
}

inline EpisodeRecord marked_episode(int task, Index T, float marker, EpisodeSource src) {
  const PaddedDims d = probe_dims();
  EpisodeRecord ep;
  ep.task_id = task;
  ep.source = src;
  ep.states = MatrixF::Zero(T + 1, d.state_dim);
  ep.actions = MatrixF::Zero(T, d.action_dim);
  ep.rewards = VectorF::Zero(T);
  for (Index t = 0; t <= T; ++t) {
    ep.states(t, 0) = marker;
    ep.states(t, 1) = static_cast<float>(t);
  }
  for (Index t = 0; t < T; ++t) {
    ep.actions(t, 0) = marker;
    ep.rewards(t) = static_cast<float>(t);
  }
  return ep;
}

// Count of segments whose rows do not come from one contiguous stretch of a
// single episode.
inline int boundary_violations(const SegmentBatch<float>& b) {
  int bad = 0;
  for (Index r = 0; r < b.batch_size(); ++r) {
    const float marker = b.states[0](r, 0), t0 = b.states[0](r, 1);
    bool ok = true;
    for (std::size_t t = 0; t < b.states.size(); ++t)
      ok = ok && b.states[t](r, 0) == marker && b.states[t](r, 1) == t0 + static_cast<float>(t);
    for (std::size_t t = 0; t < b.actions.size(); ++t)
      ok = ok && b.actions[t](r, 0) == marker && b.rewards(r, static_cast<Index>(t)) == t0 + static_cast<float>(t);
    bad += ok ? 0 : 1;
  }
  return bad;
}

struct SplitProbe {
  bool fraction_exact = true;  // every batch size, every draw
  int segments = 0;
  int violations = 0;
};

// Demo markers are negative, online markers positive; lengths vary so short
// episodes sit right at the segment length.
inline SplitProbe split_probe(std::uint64_t seed) {
  const TaskTable table = probe_table();
  DualBuffer buf(100000, 0.5);
  Rng lens(seed);
  for (int e = 0; e < 12; ++e)
    buf.add_episode(marked_episode(e % 2, 3 + static_cast<Index>(lens.index(30)), -1.0f - e,
                                   EpisodeSource::demo),
                    table);
  for (int e = 0; e < 30; ++e)
    buf.add_episode(marked_episode(e % 2, 3 + static_cast<Index>(lens.index(60)), 1.0f + e,
                                   EpisodeSource::online),
                    table);
  SplitProbe p;
  Rng rng(seed + 1);
  for (Index B : {1, 2, 7, 64, 255, 256}) {
    const Index want = (B + 1) / 2;
    for (int k = 0; k < 5; ++k) {
      const auto b = buf.sample_segments(B, 3, rng, table);
      Index demo = 0;
      for (Index r = 0; r < B; ++r) {
        const bool flagged = b.is_demo[r] != 0, negative = b.states[0](r, 0) < 0;
        demo += flagged ? 1 : 0;
        if (flagged != negative) p.fraction_exact = false;
      }
      if (demo != want) p.fraction_exact = false;
    }
  }
  while (p.segments < 10000) {
    const auto b = buf.sample_segments(250, 3, rng, table);
    p.segments += 250;
    p.violations += boundary_violations(b);
  }
  return p;
}

}  // namespace newt::testing
