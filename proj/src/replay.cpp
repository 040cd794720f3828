#include "newt/replay.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>

#include "newt/binary_io.hpp"

namespace newt {

void EpisodeRecord::validate() const {
  const Index T = actions.rows();
  if (T < 1) throw std::invalid_argument("episode has no transitions");
  if (states.rows() != T + 1)
    throw std::invalid_argument("episode states must have T+1 rows (T=" + std::to_string(T) +
                                ", got " + std::to_string(states.rows()) + ")");
  if (rewards.size() != T)
    throw std::invalid_argument("episode rewards must have T entries");
  if (!rewards.allFinite()) throw std::invalid_argument("episode rewards must be finite");
}

DualBuffer::DualBuffer(DualBuffer&& other) noexcept {
  std::unique_lock lock(other.mutex_);
  demo_ = std::move(other.demo_);
  online_ = std::move(other.online_);
  online_transitions_ = other.online_transitions_;
  capacity_ = other.capacity_;
  demo_fraction_ = other.demo_fraction_;
  next_id_ = other.next_id_;
}

DualBuffer& DualBuffer::operator=(DualBuffer&& other) noexcept {
  if (this == &other) return *this;
  std::scoped_lock lock(mutex_, other.mutex_);
  demo_ = std::move(other.demo_);
  online_ = std::move(other.online_);
  online_transitions_ = other.online_transitions_;
  capacity_ = other.capacity_;
  demo_fraction_ = other.demo_fraction_;
  next_id_ = other.next_id_;
  return *this;
}

void DualBuffer::add_episode(EpisodeRecord ep, const TaskTable& table) {
  ep.validate();
  if (ep.task_id < 0 || ep.task_id >= static_cast<int>(table.tasks.size()))
    throw std::invalid_argument("episode task id out of range");
  const TaskSpec& spec = table.tasks[ep.task_id];
  if (ep.states.cols() != spec.state_mask.size() || ep.actions.cols() != spec.action_mask.size())
    throw DimensionError("episode widths do not match the padded task dims");
  ep.states.array().rowwise() *= spec.state_mask.array();
  ep.actions.array().rowwise() *= spec.action_mask.array();

  std::unique_lock lock(mutex_);
  if (ep.source == EpisodeSource::demo) {
    demo_.push_back({std::move(ep), next_id_++});
    return;
  }
  online_transitions_ += ep.length();
  online_.push_back({std::move(ep), next_id_++});
  while (online_transitions_ > capacity_ && online_.size() > 1) {
    online_transitions_ -= online_.front().ep.length();
    online_.pop_front();
  }
}

Index DualBuffer::demo_rows(Index batch) const {
  return static_cast<Index>(std::ceil(static_cast<double>(batch) * demo_fraction_ - 1e-9));
}

SegmentBatch<float> DualBuffer::allocate(Index batch, Index seg_len, const TaskTable& table,
                                         const std::deque<Stored>& any) {
  SegmentBatch<float> b;
  const Index S = any.front().ep.states.cols(), A = any.front().ep.actions.cols();
  b.states.assign(seg_len + 1, MatrixF(batch, S));
  b.actions.assign(seg_len, MatrixF(batch, A));
  b.lang.resize(batch, table.lang_dim());
  b.rewards.resize(batch, seg_len);
  b.state_mask.resize(batch, S);
  b.action_mask.resize(batch, A);
  b.gamma.resize(batch);
  b.task_ids.assign(batch, 0);
  b.is_demo.assign(batch, 0);
  b.episode_ids.assign(batch, 0);
  b.offsets.assign(batch, 0);
  return b;
}

void DualBuffer::draw(const std::deque<Stored>& store, Index n, Index seg_len, Rng& rng,
                      const TaskTable& table, bool demo, Index row0, SegmentBatch<float>& out) {
  if (n == 0) return;
  // Cumulative count of valid start offsets per episode.
  std::vector<std::uint64_t> cum;
  cum.reserve(store.size());
  std::uint64_t total = 0;
  for (const auto& s : store) {
    const Index len = s.ep.length();
    if (len >= seg_len) total += static_cast<std::uint64_t>(len - seg_len + 1);
    cum.push_back(total);
  }
  if (total == 0)
    throw std::runtime_error(std::string(demo ? "demo" : "online") +
                             " store has no episode long enough to sample; " +
                             (demo ? "load demonstrations first" : "collect warm-up data first"));
  for (Index i = 0; i < n; ++i) {
    const std::uint64_t u = rng.index(total);
    const auto it = std::upper_bound(cum.begin(), cum.end(), u);
    const std::size_t e = static_cast<std::size_t>(it - cum.begin());
    const std::uint64_t before = e == 0 ? 0 : cum[e - 1];
    const Index off = static_cast<Index>(u - before);
    const EpisodeRecord& ep = store[e].ep;
    const TaskSpec& spec = table.tasks.at(ep.task_id);
    const Index r = row0 + i;
    for (Index t = 0; t <= seg_len; ++t) out.states[t].row(r) = ep.states.row(off + t);
    for (Index t = 0; t < seg_len; ++t) {
      out.actions[t].row(r) = ep.actions.row(off + t);
      out.rewards(r, t) = ep.rewards(off + t);
    }
    out.lang.row(r) = spec.lang_embedding;
    out.state_mask.row(r) = spec.state_mask;
    out.action_mask.row(r) = spec.action_mask;
    out.gamma(r) = static_cast<float>(spec.gamma);
    out.task_ids[r] = ep.task_id;
    out.is_demo[r] = demo ? 1 : 0;
    out.episode_ids[r] = store[e].id;
    out.offsets[r] = off;
  }
}

SegmentBatch<float> DualBuffer::sample_segments(Index batch, Index seg_len, Rng& rng,
                                                const TaskTable& table) const {
  std::shared_lock lock(mutex_);
  const Index n_demo = demo_rows(batch);
  if (n_demo > 0 && demo_.empty())
    throw std::runtime_error("demo store is empty; load demonstrations or pretrain first");
  if (batch - n_demo > 0 && online_.empty())
    throw std::runtime_error("online store is empty; collect warm-up data first");
  auto out = allocate(batch, seg_len, table, demo_.empty() ? online_ : demo_);
  draw(demo_, n_demo, seg_len, rng, table, true, 0, out);
  draw(online_, batch - n_demo, seg_len, rng, table, false, n_demo, out);
  return out;
}

SegmentBatch<float> DualBuffer::sample_demo_segments(Index batch, Index seg_len, Rng& rng,
                                                     const TaskTable& table) const {
  std::shared_lock lock(mutex_);
  if (demo_.empty())
    throw std::runtime_error("demo store is empty; load demonstrations first");
  auto out = allocate(batch, seg_len, table, demo_);
  draw(demo_, batch, seg_len, rng, table, true, 0, out);
  return out;
}

bool DualBuffer::can_sample(Index seg_len) const {
  std::shared_lock lock(mutex_);
  auto ok = [&](const std::deque<Stored>& s) {
    return std::any_of(s.begin(), s.end(), [&](const Stored& x) { return x.ep.length() >= seg_len; });
  };
  const bool need_demo = demo_fraction_ > 0.0, need_online = demo_fraction_ < 1.0;
  return (!need_demo || ok(demo_)) && (!need_online || ok(online_));
}

Index DualBuffer::demo_episodes() const {
  std::shared_lock lock(mutex_);
  return static_cast<Index>(demo_.size());
}
Index DualBuffer::online_episodes() const {
  std::shared_lock lock(mutex_);
  return static_cast<Index>(online_.size());
}
Index DualBuffer::online_transitions() const {
  std::shared_lock lock(mutex_);
  return online_transitions_;
}

std::vector<EpisodeRecord> DualBuffer::demo_snapshot() const {
  std::shared_lock lock(mutex_);
  std::vector<EpisodeRecord> out;
  for (const auto& s : demo_) out.push_back(s.ep);
  return out;
}
std::vector<EpisodeRecord> DualBuffer::online_snapshot() const {
  std::shared_lock lock(mutex_);
  std::vector<EpisodeRecord> out;
  for (const auto& s : online_) out.push_back(s.ep);
  return out;
}

// ---------------------------------------------------------------------------

void write_demo_file(const std::string& path, const DemoFile& file) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  io::write_bytes(os, "NEWTDEMO");
  io::write_u32(os, kDemoFileVersion);
  io::write_u32(os, static_cast<std::uint32_t>(file.task_names.size()));
  for (const auto& n : file.task_names) {
    io::write_u32(os, static_cast<std::uint32_t>(n.size()));
    io::write_bytes(os, n);
  }
  io::write_u32(os, static_cast<std::uint32_t>(file.episodes.size()));
  for (const auto& ep : file.episodes) {
    ep.validate();
    if (ep.task_id < 0 || ep.task_id >= static_cast<int>(file.task_names.size()))
      throw std::invalid_argument("demo episode references unknown task index");
    io::write_u32(os, static_cast<std::uint32_t>(ep.task_id));
    io::write_u32(os, static_cast<std::uint32_t>(ep.length()));
    io::write_u32(os, static_cast<std::uint32_t>(ep.states.cols()));
    io::write_u32(os, static_cast<std::uint32_t>(ep.actions.cols()));
    io::write_f32s(os, ep.states.data(), static_cast<std::size_t>(ep.states.size()));
    io::write_f32s(os, ep.actions.data(), static_cast<std::size_t>(ep.actions.size()));
    io::write_f32s(os, ep.rewards.data(), static_cast<std::size_t>(ep.rewards.size()));
  }
  if (!os) throw std::runtime_error("write failed for " + path);
}

DemoFile read_demo_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  if (io::read_bytes(is, 8, "magic") != "NEWTDEMO")
    throw io::FormatError(path + " is not a NEWTDEMO file");
  const std::uint32_t version = io::read_u32(is, "version");
  if (version != kDemoFileVersion)
    throw io::FormatError("unsupported NEWTDEMO version " + std::to_string(version));
  DemoFile f;
  const std::uint32_t ntasks = io::read_u32(is, "task count");
  for (std::uint32_t i = 0; i < ntasks; ++i)
    f.task_names.push_back(io::read_bytes(is, io::read_u32(is, "name length"), "task name"));
  const std::uint32_t neps = io::read_u32(is, "episode count");
  for (std::uint32_t i = 0; i < neps; ++i) {
    EpisodeRecord ep;
    ep.source = EpisodeSource::demo;
    ep.task_id = static_cast<int>(io::read_u32(is, "task index"));
    if (ep.task_id >= static_cast<int>(ntasks)) throw io::FormatError("task index out of range");
    const std::uint32_t T = io::read_u32(is, "T");
    const std::uint32_t sd = io::read_u32(is, "state dim");
    const std::uint32_t ad = io::read_u32(is, "action dim");
    ep.states.resize(T + 1, sd);
    ep.actions.resize(T, ad);
    ep.rewards.resize(T);
    io::read_f32s(is, ep.states.data(), static_cast<std::size_t>(ep.states.size()), "states");
    io::read_f32s(is, ep.actions.data(), static_cast<std::size_t>(ep.actions.size()), "actions");
    io::read_f32s(is, ep.rewards.data(), T, "rewards");
    f.episodes.push_back(std::move(ep));
  }
  return f;
}

}  // namespace newt
