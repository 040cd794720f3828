#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "support/replay_probe.hpp"

using namespace newt;
using namespace newt::testing;

TEST_CASE("demo share is ceil(B/2) and segments stay inside one episode") {
  const auto p = split_probe(1);
  CHECK(p.fraction_exact);
  CHECK(p.segments >= 10000);
  CHECK(p.violations == 0);
}

TEST_CASE("every valid start offset is equally likely") {
  const TaskTable table = probe_table();
  DualBuffer buf(1000, 0.0);
  buf.add_episode(marked_episode(0, 5, 1.0f, EpisodeSource::online), table);  // 3 offsets
  buf.add_episode(marked_episode(0, 9, 2.0f, EpisodeSource::online), table);  // 7 offsets
  buf.add_episode(marked_episode(0, 2, 3.0f, EpisodeSource::online), table);  // too short
  std::map<std::pair<int, int>, int> counts;
  Rng rng(5);
  const int draws = 50000;
  for (int k = 0; k < draws / 500; ++k) {
    const auto b = buf.sample_segments(500, 3, rng, table);
    for (Index r = 0; r < 500; ++r)
      ++counts[{static_cast<int>(b.states[0](r, 0)), static_cast<int>(b.states[0](r, 1))}];
  }
  CHECK(counts.size() == 10);
  double chi2 = 0.0;
  const double expect = draws / 10.0;
  for (const auto& [key, n] : counts) {
    CHECK(key.first != 3);
    chi2 += (n - expect) * (n - expect) / expect;
  }
  // 9 degrees of freedom; 0.999 quantile is about 27.9.
  CHECK(chi2 < 27.9);
}

TEST_CASE("online store evicts oldest whole episodes, demos are kept") {
  const TaskTable table = probe_table();
  DualBuffer buf(25, 0.5);
  buf.add_episode(marked_episode(0, 10, -1.0f, EpisodeSource::demo), table);
  for (int e = 0; e < 4; ++e) buf.add_episode(marked_episode(0, 10, 1.0f + e, EpisodeSource::online), table);
  CHECK(buf.online_transitions() == 20);
  CHECK(buf.online_episodes() == 2);
  const auto kept = buf.online_snapshot();
  CHECK(kept.front().states(0, 0) == 3.0f);
  CHECK(buf.demo_episodes() == 1);
  // A single episode larger than capacity is still stored.
  DualBuffer tiny(5, 0.0);
  tiny.add_episode(marked_episode(0, 10, 1.0f, EpisodeSource::online), table);
  CHECK(tiny.online_episodes() == 1);
}

TEST_CASE("masked entries are zeroed on insertion and masks travel with the batch") {
  const TaskTable table = probe_table();
  DualBuffer buf(1000, 1.0);
  EpisodeRecord ep = marked_episode(1, 6, -1.0f, EpisodeSource::demo);  // push-1d: 3 state, 1 action
  ep.states.col(5).setConstant(9.0f);
  ep.actions.col(2).setConstant(9.0f);
  buf.add_episode(ep, table);
  Rng rng(1);
  const auto b = buf.sample_demo_segments(16, 2, rng, table);
  for (const auto& s : b.states) CHECK(s.col(5).isZero());
  for (const auto& a : b.actions) CHECK(a.col(2).isZero());
  CHECK(b.action_mask(0, 0) == 1.0f);
  CHECK(b.action_mask(0, 1) == 0.0f);
  CHECK(b.gamma(0) == static_cast<float>(table.tasks[1].gamma));
}

TEST_CASE("sampling without data names the missing store") {
  const TaskTable table = probe_table();
  DualBuffer buf(1000, 0.5);
  Rng rng(1);
  CHECK_THROWS_WITH_AS(buf.sample_segments(4, 3, rng, table), doctest::Contains("demo"),
                       std::runtime_error);
  buf.add_episode(marked_episode(0, 10, -1.0f, EpisodeSource::demo), table);
  CHECK_FALSE(buf.can_sample(3));
  CHECK_THROWS_WITH_AS(buf.sample_segments(4, 3, rng, table), doctest::Contains("online"),
                       std::runtime_error);
  buf.add_episode(marked_episode(0, 2, 1.0f, EpisodeSource::online), table);
  CHECK_FALSE(buf.can_sample(3));
}

TEST_CASE("malformed episodes are rejected") {
  const TaskTable table = probe_table();
  DualBuffer buf;
  EpisodeRecord ep = marked_episode(0, 5, 1.0f, EpisodeSource::online);
  ep.states.conservativeResize(5, Eigen::NoChange);
  CHECK_THROWS(buf.add_episode(ep, table));
  EpisodeRecord bad = marked_episode(0, 5, 1.0f, EpisodeSource::online);
  bad.rewards(2) = std::numeric_limits<float>::infinity();
  CHECK_THROWS(buf.add_episode(bad, table));
  EpisodeRecord wide = marked_episode(7, 5, 1.0f, EpisodeSource::online);
  CHECK_THROWS(buf.add_episode(wide, table));
}

TEST_CASE("NEWTDEMO round trip is exact") {
  DemoFile f;
  f.task_names = {"point-reach", "push-1d"};
  Rng rng(3);
  for (int e = 0; e < 4; ++e) {
    EpisodeRecord ep = marked_episode(e % 2, 7 + e, 1.0f, EpisodeSource::demo);
    ep.states = rng.normal_matrix<float>(ep.states.rows(), ep.states.cols());
    ep.actions = rng.normal_matrix<float>(ep.actions.rows(), ep.actions.cols());
    ep.rewards = VectorF(rng.normal_matrix<float>(ep.rewards.size(), 1));
    f.episodes.push_back(ep);
  }
  const auto path = (std::filesystem::temp_directory_path() / "newt_roundtrip.demo").string();
  write_demo_file(path, f);
  const DemoFile g = read_demo_file(path);
  CHECK(g.task_names == f.task_names);
  REQUIRE(g.episodes.size() == f.episodes.size());
  for (std::size_t i = 0; i < f.episodes.size(); ++i) {
    CHECK(g.episodes[i].task_id == f.episodes[i].task_id);
    CHECK(g.episodes[i].states == f.episodes[i].states);
    CHECK(g.episodes[i].actions == f.episodes[i].actions);
    CHECK(g.episodes[i].rewards == f.episodes[i].rewards);
  }
  // Truncation and a wrong magic are reported.
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS(read_demo_file(path));
  {
    std::FILE* fp = std::fopen(path.c_str(), "r+b");
    std::fputs("XEWT", fp);
    std::fclose(fp);
  }
  CHECK_THROWS(read_demo_file(path));
  std::filesystem::remove(path);
}
