#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "arl/rewards.hpp"
#include "test_util.hpp"

using namespace arl;

namespace {

Trajectory valid_call_trajectory() {
  Trajectory t;
  t.prompt_id = "p";
  Step s;
  s.action = ToolCall{"update_user", Json{{"id", 1}, {"field", "name"}, {"value", "b"}}};
  s.observation = Observation{"update_user", ObsStatus::ok, "ok", std::nullopt};
  t.steps = {s};
  return t;
}

ToolCall random_call(std::mt19937_64& rng) {
  ToolCall c;
  c.tool_name = "tool_" + std::to_string(rng() % 3);
  std::size_t n = rng() % 3;
  for (std::size_t i = 0; i < n; ++i) {
    std::string key = "k" + std::to_string(rng() % 3);
    switch (rng() % 3) {
      case 0: c.args[key] = static_cast<std::int64_t>(rng() % 4); break;
      case 1: c.args[key] = static_cast<double>(rng() % 4); break;  // integer-valued real
      default: c.args[key] = "v" + std::to_string(rng() % 3); break;
    }
  }
  return c;
}

}  // namespace

TEST_CASE("outcome reward is the conjunction of format and verdict") {
  ToolRegistry reg = testutil::small_registry();
  Trajectory t = valid_call_trajectory();
  CHECK(outcome_reward(t, true, reg) == 1);
  CHECK(outcome_reward(t, false, reg) == 0);
  Trajectory bad = t;
  std::get<ToolCall>(bad.steps[0].action).tool_name = "unknown";
  CHECK(outcome_reward(bad, true, reg) == 0);
}

TEST_CASE("outcome reward is zero for any non-completed termination") {
  ToolRegistry reg = testutil::small_registry();
  for (Termination term :
       {Termination::max_context, Termination::max_steps, Termination::timeout}) {
    Trajectory t = valid_call_trajectory();
    t.termination = term;
    CHECK(outcome_reward(t, true, reg) == 0);
  }
}

TEST_CASE("exact match ignores key order and unifies integer-valued reals") {
  ToolCall a{"update_user", Json::parse(R"({"field": "name", "id": 1, "value": "x"})")};
  ToolCall b{"update_user", Json::parse(R"({"value": "x", "id": 1.0, "field": "name"})")};
  CHECK(exact_match(a, b));
}

TEST_CASE("exact match distinguishes values, names, and types") {
  ToolCall a{"update_user", Json{{"id", 1}}};
  ToolCall b{"update_user", Json{{"id", 2}}};
  ToolCall c{"get_user", Json{{"id", 1}}};
  ToolCall d{"update_user", Json{{"id", "1"}}};
  CHECK_FALSE(exact_match(a, b));
  CHECK_FALSE(exact_match(a, c));
  CHECK_FALSE(exact_match(a, d));  // strings never coerce to numbers
}

TEST_CASE("exact match is an equivalence relation on random calls") {
  std::mt19937_64 rng(63);
  std::vector<ToolCall> calls;
  for (int i = 0; i < 40; ++i) calls.push_back(random_call(rng));
  for (const auto& x : calls) CHECK(exact_match(x, x));
  for (const auto& x : calls) {
    for (const auto& y : calls) {
      CHECK(exact_match(x, y) == exact_match(y, x));
      if (!exact_match(x, y)) continue;
      for (const auto& z : calls) {
        if (exact_match(y, z)) CHECK(exact_match(x, z));
      }
    }
  }
}

TEST_CASE("turn reward requires a valid call that matches the ground truth") {
  ToolRegistry reg = testutil::small_registry();
  ToolCall truth{"update_user", Json{{"id", 1}, {"field", "name"}, {"value", "b"}}};
  Step good;
  good.action = truth;
  CHECK(turn_reward(good, truth, reg) == 1);

  Step wrong_value;
  wrong_value.action = ToolCall{"update_user", Json{{"id", 1}, {"field", "name"}, {"value", "c"}}};
  CHECK(turn_reward(wrong_value, truth, reg) == 0);

  Step generation;
  generation.action = GenerationAction{{1}, RoleTag::answer};
  CHECK(turn_reward(generation, truth, reg) == 0);

  Step invalid;
  invalid.action = ToolCall{"update_user", Json{{"id", 1}}};  // missing required args
  CHECK(turn_reward(invalid, ToolCall{"update_user", Json{{"id", 1}}}, reg) == 0);
}

TEST_CASE("rewards are always binary") {
  ToolRegistry reg = testutil::small_registry();
  std::mt19937_64 rng(19);
  for (int i = 0; i < 100; ++i) {
    Trajectory t = testutil::random_trajectory(rng);
    int r = outcome_reward(t, rng() % 2 == 0, reg);
    CHECK((r == 0 || r == 1));
  }
}

TEST_CASE("pass-rate filter drops all-failure prompts when lo is positive") {
  PassRateFilter f{0.25, 0.75, false, false, 8};
  CHECK(pass_rate_filter(std::vector<bool>(8, false), f) == FilterVerdict::drop);
}

TEST_CASE("pass-rate filter bound semantics") {
  std::vector<bool> two_of_eight = {true, true, false, false, false, false, false, false};
  PassRateFilter closed{0.25, 0.75, false, false, 8};
  CHECK(pass_rate_filter(two_of_eight, closed) == FilterVerdict::keep);
  PassRateFilter open_lo{0.25, 0.75, true, false, 8};
  CHECK(pass_rate_filter(two_of_eight, open_lo) == FilterVerdict::drop);  // p == lo, strict
  std::vector<bool> all = std::vector<bool>(8, true);
  PassRateFilter open_hi{0.0, 1.0, true, true, 8};
  CHECK(pass_rate_filter(all, open_hi) == FilterVerdict::drop);
  CHECK(pass_rate_filter(two_of_eight, open_hi) == FilterVerdict::keep);
}

TEST_CASE("adding a success never drops a kept prompt below lo") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t n = 1 + rng() % 12;
    std::vector<bool> flags(n);
    for (std::size_t i = 0; i < n; ++i) flags[i] = rng() % 2 == 0;
    PassRateFilter f{(rng() % 5) / 8.0, 1.0, false, false, n + 1};
    if (pass_rate_filter(flags, f) != FilterVerdict::keep) continue;
    std::vector<bool> more = flags;
    more.push_back(true);
    double p = 0.0;
    for (bool b : more) p += b ? 1.0 : 0.0;
    p /= static_cast<double>(more.size());
    CHECK(p >= f.lo);
  }
}
