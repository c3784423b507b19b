#pragma once

// Shared generators for the test suites: randomized trajectories, registries
// and worlds built to satisfy the documented invariants, so round-trip and
// property tests can fuzz broadly without tripping schema checks by
// construction.

#include <random>
#include <string>
#include <vector>

#include "arl/core.hpp"

namespace arl::testutil {

inline std::string random_word(std::mt19937_64& rng) {
  static const char* words[] = {"alpha", "beta", "gamma", "delta", "order",
                                "user",  "x1",   "y2",    "",      "a b c"};
  return words[rng() % 10];
}

inline Json random_arg_value(std::mt19937_64& rng) {
  switch (rng() % 5) {
    case 0: return static_cast<std::int64_t>(rng() % 1000) - 500;
    case 1: return random_word(rng);
    case 2: return (rng() % 2) == 0;
    case 3: return static_cast<double>(rng() % 100) / 4.0;
    default: return Json::array({static_cast<std::int64_t>(rng() % 10), random_word(rng)});
  }
}

inline Step random_step(std::mt19937_64& rng) {
  Step s;
  bool call = (rng() % 2) == 0;
  if (call) {
    ToolCall c;
    c.tool_name = "tool_" + std::to_string(rng() % 4);
    std::size_t n_args = rng() % 3;
    for (std::size_t i = 0; i < n_args; ++i) {
      c.args["arg" + std::to_string(i)] = random_arg_value(rng);
    }
    s.action = std::move(c);
    Observation o;
    o.source_tool = std::get<ToolCall>(s.action).tool_name;
    if (rng() % 4 == 0) {
      o.status = ObsStatus::error;
      o.error_kind = static_cast<ErrorKind>(rng() % 4);
      o.payload = "error detail";
    } else {
      o.payload = random_word(rng);
    }
    s.observation = std::move(o);
  } else {
    GenerationAction g;
    std::size_t n = 1 + rng() % 6;
    for (std::size_t i = 0; i < n; ++i) g.tokens.push_back(static_cast<Token>(rng() % 64));
    g.role_tag = static_cast<RoleTag>(rng() % 3);
    s.action = std::move(g);
  }
  std::size_t n_tok = rng() % 8;
  std::uniform_real_distribution<double> lp(-8.0, 0.0);
  for (std::size_t i = 0; i < n_tok; ++i) {
    s.token_logprobs.push_back(lp(rng));
    s.role_mask.push_back(rng() % 3 == 0 ? TokenRole::environment_feedback
                                         : TokenRole::agent_response);
  }
  return s;
}

inline Trajectory random_trajectory(std::mt19937_64& rng) {
  Trajectory t;
  t.prompt_id = "prompt-" + std::to_string(rng() % 1000);
  t.termination = static_cast<Termination>(rng() % 4);
  std::size_t n_steps = rng() % 6;
  for (std::size_t i = 0; i < n_steps; ++i) t.steps.push_back(random_step(rng));
  t.total_tokens = 0;
  for (const auto& s : t.steps) t.total_tokens += s.token_count();
  return t;
}

inline ToolRegistry small_registry() {
  ToolRegistry reg;
  reg.register_tool({"get_user",
                     "read a user record",
                     {{"id", ParamType::integer, true}},
                     "record text"});
  reg.register_tool({"update_user",
                     "set one field of a user record",
                     {{"id", ParamType::integer, true},
                      {"field", ParamType::string, true},
                      {"value", ParamType::string, true}},
                     "ok"});
  reg.register_tool({"submit", "finish the task", {}, "reward"});
  return reg;
}

}  // namespace arl::testutil
