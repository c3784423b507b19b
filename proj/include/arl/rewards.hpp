#pragma once

#include <optional>

#include "arl/core.hpp"

namespace arl {

struct RewardMode {
  enum class Kind { outcome, turn_level };
  Kind kind = Kind::outcome;
  std::optional<ToolCall> ground_truth_call;  // required for turn_level
};

struct PassRateFilter {
  double lo = 0.0;
  double hi = 1.0;
  bool lo_open = false;
  bool hi_open = false;
  std::size_t samples = 0;
};

// 1 iff the trajectory is format-correct and the environment verdict is a
// success; binary by construction.
int outcome_reward(const Trajectory& t, bool env_verdict, const ToolRegistry& registry);

// Deep equality of tool name and argument maps after canonicalization
// (key-order insensitive; integer-valued reals unify with integers).
bool exact_match(const ToolCall& candidate, const ToolCall& truth);

// 1 iff the action is a tool call valid against the registry and exactly
// matches the ground truth.
int turn_reward(const Step& response, const ToolCall& truth, const ToolRegistry& registry);

enum class FilterVerdict { keep, drop };

// keep iff p = successes/n lies within [lo, hi], with strict comparison on a
// bound marked open.
FilterVerdict pass_rate_filter(const std::vector<bool>& success_flags, const PassRateFilter& f);

}  // namespace arl
