#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>

#include "doctest.h"
#include "newt/tasks.hpp"

using namespace newt;

namespace {

const PaddedDims kDims{16, 4, 32};

struct Rollout {
  double mean_score = 0.0;
  double mean_return = 0.0;
};

template <typename Policy>
Rollout roll(const std::string& name, int episodes, Policy&& policy) {
  Rollout out;
  for (int e = 0; e < episodes; ++e) {
    auto env = make_task(name, 100 + e, kDims);
    EpisodeSummary sum;
    for (int t = 0; t < env->spec().episode_len; ++t) {
      const StepResult r = env->step(policy(*env));
      sum.episode_return += r.reward;
      if (r.episode_done) sum.success = r.success;
    }
    out.mean_score += normalized_score(env->spec(), sum) / episodes;
    out.mean_return += sum.episode_return / episodes;
  }
  return out;
}

}  // namespace

TEST_CASE("discount heuristic values") {
  CHECK(std::abs(discount_for(50) - 0.95) <= 1e-12);
  CHECK(std::abs(discount_for(100) - 0.95) <= 1e-12);
  CHECK(std::abs(discount_for(250) - 0.98) <= 1e-12);
  CHECK(std::abs(discount_for(500) - 0.99) <= 1e-12);
  CHECK(std::abs(discount_for(1000) - 0.995) <= 1e-12);
  CHECK(discount_for(100000) == 0.995);
  CHECK_THROWS(discount_for(0));
}

TEST_CASE("specs have prefix masks, unit embeddings and valid discounts") {
  for (const auto& name : task_registry()) {
    const TaskSpec s = task_spec(name, kDims);
    CHECK(s.state_mask.sum() == static_cast<float>(s.state_dim_native));
    CHECK(s.action_mask.sum() == static_cast<float>(s.action_dim_native));
    CHECK(s.state_mask.head(s.state_dim_native).minCoeff() == 1.0f);
    CHECK(s.action_mask.head(s.action_dim_native).minCoeff() == 1.0f);
    CHECK(s.gamma >= 0.95);
    CHECK(s.gamma <= 0.995);
    CHECK(s.lang_embedding.size() == kDims.lang_dim);
    CHECK(s.lang_embedding.norm() == doctest::Approx(1.0f));
  }
  CHECK(default_training_tasks().size() == 5);
  CHECK_THROWS_WITH(task_spec("nope", kDims), doctest::Contains("point-reach"));
}

TEST_CASE("observations keep masked entries at zero and episodes auto-reset") {
  auto env = make_task("push-1d", 3, kDims);
  const int T = env->spec().episode_len;
  RowVectorF a = RowVectorF::Constant(kDims.action_dim, 5.0f);  // clamped, padding ignored
  for (int t = 0; t < T; ++t) {
    const StepResult r = env->step(a);
    CHECK(std::isfinite(r.reward));
    CHECK(r.obs.tail(kDims.state_dim - env->spec().state_dim_native).isZero());
    CHECK(r.episode_done == (t == T - 1));
    if (r.episode_done) CHECK(r.reset_obs.size() == kDims.state_dim);
  }
  CHECK(env->step_in_episode() == 0);
  RowVectorF nan = RowVectorF::Zero(kDims.action_dim);
  nan(0) = std::nanf("");
  CHECK_THROWS(env->step(nan));
  CHECK_THROWS_AS(env->step(RowVectorF::Zero(2)), DimensionError);
}

TEST_CASE("same seed and actions reproduce the trajectory") {
  for (const auto& name : task_registry()) {
    auto a = make_task(name, 42, kDims), b = make_task(name, 42, kDims);
    Rng ra(1), rb(1);
    for (int t = 0; t < 60; ++t) {
      const RowVectorF ua = (ra.normal_matrix<float>(1, kDims.action_dim)).row(0);
      const RowVectorF ub = (rb.normal_matrix<float>(1, kDims.action_dim)).row(0);
      const StepResult x = a->step(ua), y = b->step(ub);
      CHECK(x.obs == y.obs);
      CHECK(x.reward == y.reward);
    }
  }
}

TEST_CASE("scripted experts clearly beat uniform random actions") {
  for (const auto& name : task_registry()) {
    Rng rng(7);
    const Rollout expert = roll(name, 5, [](const Environment& env) {
      return scripted_expert(env.spec(), env.native_state());
    });
    const Rollout random = roll(name, 5, [&](const Environment&) {
      RowVectorF a(kDims.action_dim);
      for (Index i = 0; i < a.size(); ++i) a(i) = static_cast<float>(rng.uniform(-1, 1));
      return a;
    });
    INFO(name);
    CHECK(expert.mean_return > random.mean_return);
    CHECK(expert.mean_score >= random.mean_score);
    CHECK(expert.mean_score >= 0.6);
  }
}

TEST_CASE("normalized scores are clipped to the unit interval") {
  TaskSpec s = task_spec("chase", kDims);
  CHECK(normalized_score(s, {s.return_hi * 10 + 5, false}) == 1.0);
  CHECK(normalized_score(s, {s.return_lo - 100, false}) == 0.0);
  TaskSpec p = task_spec("point-reach", kDims);
  CHECK(normalized_score(p, {-100.0, true}) == 1.0);
  CHECK(normalized_score(p, {100.0, false}) == 0.0);
}

TEST_CASE("instruction embeddings are deterministic and overridable") {
  const RowVectorF a = embed_instruction("  Reach  the\tGOAL ", 32);
  const RowVectorF b = embed_instruction("reach the goal", 32);
  CHECK(a == b);
  CHECK(a != embed_instruction("reach the goal", 32, 1));
  CHECK(a != embed_instruction("push the block", 32));

  const auto path = (std::filesystem::temp_directory_path() / "newt_emb.bin").string();
  RowVectorF v = RowVectorF::Zero(32);
  v(3) = 1.0f;
  write_embeddings_file(path, {{"reach the goal", v}});
  const auto back = read_embeddings_file(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].second == v);
  EmbeddingProvider p(32);
  p.load_overrides(path);
  CHECK(p.embed("Reach the goal") == v);
  std::filesystem::remove(path);
}
