#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "arl/orchestrator.hpp"

using namespace arl;

namespace {

TaskFixture pre_satisfied_fixture() {
  TaskFixture f;
  f.task_id = "goal-met";
  f.kind = "retail";
  f.prompt_tokens = {4};
  f.registry.register_tool({"get_user", "", {{"id", ParamType::integer, true}}, ""});
  f.registry.register_tool({"submit", "", {}, ""});
  RetailWorld w;
  w.tables["users"]["0"] = Json{{"v0", "v1"}};
  w.goal_state = w.tables;
  f.initial_world = w;
  f.reward = "outcome";
  return f;
}

PolicyParams biased_params(Token favored, std::uint32_t F = 1, std::uint32_t V = 8) {
  PolicyParams p = PolicyParams::zeros(F, V);
  for (std::uint32_t b = 0; b < F; ++b) p.weights().at(b, favored) = 30.0;
  return p;
}

std::vector<TaskFixture> retail_tasks() {
  std::vector<TaskFixture> tasks;
  for (int k = 0; k < 5; ++k) {
    tasks.push_back(load_task_file("fixtures/retail_status_" + std::to_string(k) + ".json"));
  }
  return tasks;
}

}  // namespace

TEST_CASE("the task cycle is read modularly") {
  std::vector<std::string> cycle = {"tool", "tool", "tool", "swe"};
  CHECK(next_task(cycle, 7) == "swe");
  CHECK(next_task(cycle, 0) == "tool");
  CHECK(next_task(cycle, 4) == "tool");
  std::size_t tool_count = 0, swe_count = 0;
  for (std::size_t s = 0; s < 4000; ++s) {
    if (next_task(cycle, s) == "swe") {
      ++swe_count;
    } else {
      ++tool_count;
    }
  }
  CHECK(tool_count == 3000);
  CHECK(swe_count == 1000);
}

TEST_CASE("task families split retail from workspace fixtures") {
  CHECK(task_family(pre_satisfied_fixture()) == "tool");
  TaskFixture ws = load_task_file("fixtures/workspace_scale.json");
  CHECK(task_family(ws) == "swe");
}

TEST_CASE("seed derivation is deterministic and tag sensitive") {
  CHECK(derive_seed(1, "a", 2, 3) == derive_seed(1, "a", 2, 3));
  CHECK(derive_seed(1, "a", 2, 3) != derive_seed(1, "b", 2, 3));
  CHECK(derive_seed(1, "a", 2, 3) != derive_seed(2, "a", 2, 3));
  CHECK(derive_seed(1, "a", 2, 3) != derive_seed(1, "a", 3, 2));
}

TEST_CASE("unit context starts with the fixture prompt tokens") {
  TaskFixture f = pre_satisfied_fixture();
  PromptUnit unit{&f, "goal-met", false, 0};
  PolicyParams params = biased_params(vocab::kAnswer);
  std::vector<Token> ctx = unit_context(unit, params);
  REQUIRE(ctx.size() >= f.prompt_tokens.size());
  for (std::size_t i = 0; i < f.prompt_tokens.size(); ++i) CHECK(ctx[i] == f.prompt_tokens[i]);
}

TEST_CASE("an immediately submitting policy completes the pre-satisfied task with reward 1") {
  TaskFixture f = pre_satisfied_fixture();
  PromptUnit unit{&f, "goal-met", false, 0};
  RolloutLimits limits;
  SampleEnvelope env = rollout_one(biased_params(vocab::kAnswer), unit, {1.0, 1.0, 0}, limits, 5);
  CHECK(env.trajectory.termination == Termination::completed);
  CHECK(env.reward == 1.0);
  CHECK_FALSE(env.tokens.masked);
}

TEST_CASE("the step cap truncates, masks, and zeroes the reward") {
  TaskFixture f = pre_satisfied_fixture();
  PromptUnit unit{&f, "goal-met", false, 0};
  RolloutLimits limits;
  limits.max_steps = 1;
  // A policy stuck on end-of-action emits think actions forever.
  SampleEnvelope env =
      rollout_one(biased_params(vocab::kEndOfAction), unit, {1.0, 1.0, 0}, limits, 5);
  CHECK(env.trajectory.termination == Termination::max_steps);
  CHECK(env.reward == 0.0);
  CHECK(env.tokens.masked);
}

TEST_CASE("rollouts are byte-identical under a fixed seed") {
  std::vector<TaskFixture> tasks = retail_tasks();
  PromptUnit unit{&tasks[0], tasks[0].task_id, false, 0};
  PolicyParams params = make_structured_init(64, 8, 4);
  RolloutLimits limits;
  SampleEnvelope a = rollout_one(params, unit, {1.0, 1.0, 9}, limits, 77);
  SampleEnvelope b = rollout_one(params, unit, {1.0, 1.0, 9}, limits, 77);
  CHECK(serialize_trajectory(a.trajectory) == serialize_trajectory(b.trajectory));
  CHECK(a.reward == b.reward);
  CHECK(a.tokens.tokens == b.tokens.tokens);
}

TEST_CASE("snapshot store publishes monotone versions with atomic reads") {
  SnapshotStore store(PolicyParams::zeros(2, 4));
  CHECK(store.version() == 0);
  std::uint64_t v1 = store.publish(biased_params(1, 2, 4));
  CHECK(v1 == 1);
  std::uint64_t seen = 99;
  auto snap = store.read(&seen);
  CHECK(seen == 1);
  CHECK(snap->weights().at(0, 1) == 30.0);
}

TEST_CASE("group assembly fills advantages and flags degeneracy") {
  GrpoConfig cfg;
  cfg.group_size = 2;
  auto env_with_reward = [&](double r) {
    TaskFixture f = pre_satisfied_fixture();
    PromptUnit unit{&f, "goal-met", false, 0};
    RolloutLimits limits;
    SampleEnvelope e = rollout_one(biased_params(vocab::kAnswer), unit, {1.0, 1.0, 0}, limits, 3);
    e.reward = r;
    return e;
  };
  AssembledGroup mixed = assemble_group("g", {env_with_reward(1), env_with_reward(0)}, cfg);
  CHECK_FALSE(mixed.degenerate);
  CHECK(mixed.grpo.advantages[0] == doctest::Approx(1.0));
  CHECK(mixed.grpo.advantages[1] == doctest::Approx(-1.0));

  AssembledGroup flat = assemble_group("g", {env_with_reward(1), env_with_reward(1)}, cfg);
  CHECK(flat.degenerate);
}

TEST_CASE("a truncated trajectory is masked but leaves its group usable") {
  GrpoConfig cfg;
  cfg.group_size = 2;
  TaskFixture f = pre_satisfied_fixture();
  PromptUnit unit{&f, "goal-met", false, 0};
  RolloutLimits ok_limits;
  RolloutLimits tight;
  tight.max_steps = 1;
  SampleEnvelope good = rollout_one(biased_params(vocab::kAnswer), unit, {1.0, 1.0, 0}, ok_limits, 3);
  SampleEnvelope cut =
      rollout_one(biased_params(vocab::kEndOfAction), unit, {1.0, 1.0, 0}, tight, 4);
  AssembledGroup g = assemble_group("g", {good, cut}, cfg);
  CHECK(g.grpo.trajectories[1].masked);
  CHECK_FALSE(g.grpo.trajectories[0].masked);
}

TEST_CASE("interval overlap detection") {
  using K = IntervalEvent::Kind;
  std::vector<IntervalEvent> disjoint = {{K::rollout, 0, 1}, {K::train, 1, 2}};
  CHECK_FALSE(has_rollout_train_overlap(disjoint));
  std::vector<IntervalEvent> overlapping = {{K::rollout, 0, 2}, {K::train, 1, 3}};
  CHECK(has_rollout_train_overlap(overlapping));
}

TEST_CASE("metrics files carry a header and one row per step") {
  std::vector<StepBreakdown> rows(3);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].step = i;
  std::string path = "build/test_metrics.csv";
  write_metrics_csv(path, rows);
  std::ifstream in(path);
  std::string line;
  std::size_t count = 0;
  REQUIRE(std::getline(in, line));
  CHECK(line.rfind("step,", 0) == 0);
  while (std::getline(in, line)) ++count;
  CHECK(count == 3);
  std::remove(path.c_str());
}

TEST_CASE("simulated runs are reproducible for a fixed seed") {
  OrchestratorConfig cfg;
  cfg.task_cycle = {"tool"};
  cfg.grpo.group_size = 4;
  cfg.grpo.update_prompts = 2;
  cfg.grpo.learning_rate = 10;
  cfg.total_updates = 8;
  cfg.seed = 5;
  cfg.latency = LatencyModel{0.0, 1.0};
  cfg.sim_train_seconds = 0.2;
  cfg.mode = RunMode::disaggregated;
  PolicyParams init = make_structured_init(64, 8, 4);
  std::vector<TaskFixture> tasks = retail_tasks();
  TrainingResult a = run_training(cfg, tasks, init);
  TrainingResult b = run_training(cfg, tasks, init);
  CHECK(a.reward_curve == b.reward_curve);
  CHECK(a.final_params == b.final_params);
  CHECK(a.total_time == b.total_time);
}

TEST_CASE("with one worker and vanishing latency both modes walk the same parameters") {
  OrchestratorConfig cfg;
  cfg.task_cycle = {"tool"};
  cfg.rollout_workers = 1;
  cfg.grpo.group_size = 4;
  cfg.grpo.update_prompts = 2;
  cfg.grpo.learning_rate = 10;
  cfg.total_updates = 10;
  cfg.seed = 3;
  cfg.latency = LatencyModel{-30.0, 1e-9};
  cfg.sim_train_seconds = 0.01;
  PolicyParams init = make_structured_init(64, 8, 4);
  std::vector<TaskFixture> tasks = retail_tasks();
  cfg.mode = RunMode::colocated;
  TrainingResult coloc = run_training(cfg, tasks, init);
  cfg.mode = RunMode::disaggregated;
  TrainingResult disagg = run_training(cfg, tasks, init);
  CHECK(coloc.final_params == disagg.final_params);
  CHECK(coloc.reward_curve == disagg.reward_curve);
}

TEST_CASE("simulated disaggregated runs overlap rollouts with training") {
  OrchestratorConfig cfg;
  cfg.task_cycle = {"tool"};
  cfg.grpo.group_size = 4;
  cfg.grpo.update_prompts = 2;
  cfg.total_updates = 12;
  cfg.seed = 2;
  cfg.latency = LatencyModel{0.0, 1.0};
  cfg.sim_train_seconds = 0.25;
  cfg.mode = RunMode::disaggregated;
  PolicyParams init = make_structured_init(64, 8, 4);
  TrainingResult r = run_training(cfg, retail_tasks(), init);
  CHECK(has_rollout_train_overlap(r.events));
  cfg.mode = RunMode::colocated;
  TrainingResult c = run_training(cfg, retail_tasks(), init);
  CHECK_FALSE(has_rollout_train_overlap(c.events));
}

TEST_CASE("the colocated barrier shows up as trainer idle time") {
  OrchestratorConfig cfg;
  cfg.task_cycle = {"tool"};
  cfg.grpo.group_size = 4;
  cfg.grpo.update_prompts = 2;
  cfg.total_updates = 6;
  cfg.seed = 4;
  cfg.latency = LatencyModel{0.0, 1.0};
  cfg.sim_train_seconds = 0.1;
  cfg.mode = RunMode::colocated;
  TrainingResult r = run_training(cfg, retail_tasks(), make_structured_init(64, 8, 4));
  double idle = 0.0;
  for (const auto& row : r.breakdown) idle += row.idle_time;
  CHECK(idle > 0.0);
}

TEST_CASE("real-execution engines run end to end in both modes") {
  OrchestratorConfig cfg;
  cfg.task_cycle = {"tool"};
  cfg.rollout_workers = 2;
  cfg.grpo.group_size = 4;
  cfg.grpo.update_prompts = 2;
  cfg.grpo.learning_rate = 10;
  cfg.total_updates = 3;
  cfg.seed = 8;
  PolicyParams init = make_structured_init(64, 8, 4);
  std::vector<TaskFixture> tasks = retail_tasks();
  cfg.mode = RunMode::colocated;
  TrainingResult coloc = run_training(cfg, tasks, init);
  CHECK(coloc.breakdown.size() == 3);
  cfg.mode = RunMode::disaggregated;
  TrainingResult disagg = run_training(cfg, tasks, init);
  CHECK(disagg.breakdown.size() == 3);
  CHECK(disagg.throughput > 0.0);
}
