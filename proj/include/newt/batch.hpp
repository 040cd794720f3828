#pragma once

#include <cstdint>
#include <vector>

#include "newt/common.hpp"

namespace newt {

// Batched length-(H+1) subsequences, stored time-major: states[t] is the
// batch x state_dim slice at step t. Masked-out state/action entries are 0.
template <typename S>
struct SegmentBatch {
  std::vector<Matrix<S>> states;   // H+1 entries
  std::vector<Matrix<S>> img;      // empty, or H+1 entries of batch x img_dim
  Matrix<S> lang;                  // batch x lang_dim
  std::vector<Matrix<S>> actions;  // H entries
  Matrix<S> rewards;               // batch x H
  Matrix<S> state_mask;            // batch x state_dim, entries 0/1
  Matrix<S> action_mask;           // batch x action_dim, entries 0/1
  Vector<S> gamma;                 // per-row discount of the row's task
  std::vector<int> task_ids;
  std::vector<std::uint8_t> is_demo;
  std::vector<std::int64_t> episode_ids;
  std::vector<Index> offsets;

  Index batch_size() const { return lang.rows(); }
  Index horizon() const { return static_cast<Index>(actions.size()); }

  template <typename T>
  SegmentBatch<T> cast() const {
    SegmentBatch<T> out;
    for (const auto& m : states) out.states.push_back(m.template cast<T>());
    for (const auto& m : img) out.img.push_back(m.template cast<T>());
    for (const auto& m : actions) out.actions.push_back(m.template cast<T>());
    out.lang = lang.template cast<T>();
    out.rewards = rewards.template cast<T>();
    out.state_mask = state_mask.template cast<T>();
    out.action_mask = action_mask.template cast<T>();
    out.gamma = gamma.template cast<T>();
    out.task_ids = task_ids;
    out.is_demo = is_demo;
    out.episode_ids = episode_ids;
    out.offsets = offsets;
    return out;
  }
};

}  // namespace newt
