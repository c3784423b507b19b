#include "arl/rewards.hpp"

#include <stdexcept>

namespace arl {

int outcome_reward(const Trajectory& t, bool env_verdict, const ToolRegistry& registry) {
  return (format_correct(t, registry) && env_verdict) ? 1 : 0;
}

bool exact_match(const ToolCall& candidate, const ToolCall& truth) {
  return candidate.tool_name == truth.tool_name &&
         canonicalize(candidate.args) == canonicalize(truth.args);
}

namespace {

// FormatCorrect for a single generated call: registered tool, required args
// present with declared types, no unknown argument names.
bool call_valid(const ToolCall& call, const ToolRegistry& registry) {
  const ToolSpec* spec = registry.find(call.tool_name);
  if (spec == nullptr) return false;
  for (const auto& p : spec->params) {
    auto it = call.args.find(p.name);
    if (it == call.args.end()) {
      if (p.required) return false;
    } else if (!value_matches_type(*it, p.type)) {
      return false;
    }
  }
  for (auto it = call.args.begin(); it != call.args.end(); ++it) {
    bool declared = false;
    for (const auto& p : spec->params) declared |= p.name == it.key();
    if (!declared) return false;
  }
  return true;
}

}  // namespace

int turn_reward(const Step& response, const ToolCall& truth, const ToolRegistry& registry) {
  const auto* call = std::get_if<ToolCall>(&response.action);
  if (call == nullptr) return 0;
  if (!call_valid(*call, registry)) return 0;
  return exact_match(*call, truth) ? 1 : 0;
}

FilterVerdict pass_rate_filter(const std::vector<bool>& success_flags, const PassRateFilter& f) {
  if (success_flags.empty()) throw std::invalid_argument("pass_rate_filter needs n >= 1");
  std::size_t successes = 0;
  for (bool s : success_flags) successes += s ? 1 : 0;
  double p = static_cast<double>(successes) / static_cast<double>(success_flags.size());
  bool above_lo = f.lo_open ? p > f.lo : p >= f.lo;
  bool below_hi = f.hi_open ? p < f.hi : p <= f.hi;
  return (above_lo && below_hi) ? FilterVerdict::keep : FilterVerdict::drop;
}

}  // namespace arl
