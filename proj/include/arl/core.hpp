#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "arl/canonical.hpp"

namespace arl {

using Token = std::uint32_t;

enum class RoleTag { think, answer, summarize };
enum class ObsStatus { ok, error };
enum class ErrorKind { invalid_input, not_found, timeout, internal };
enum class Termination { completed, max_context, max_steps, timeout };
enum class TokenRole { agent_response, environment_feedback };

struct GenerationAction {
  std::vector<Token> tokens;  // non-empty, includes the terminal sentinel
  RoleTag role_tag = RoleTag::think;

  bool operator==(const GenerationAction&) const = default;
};

struct ToolCall {
  std::string tool_name;
  Json args = Json::object();  // argument name -> value, canonical form

  bool operator==(const ToolCall&) const = default;
};

struct Observation {
  std::string source_tool;
  ObsStatus status = ObsStatus::ok;
  std::string payload;
  std::optional<ErrorKind> error_kind;  // present iff status == error

  bool operator==(const Observation&) const = default;
};

struct Step {
  std::variant<GenerationAction, ToolCall> action;
  std::optional<Observation> observation;  // present iff action is ToolCall
  std::vector<double> token_logprobs;      // inference-policy log-probs, nats
  std::vector<TokenRole> role_mask;        // same length as token_logprobs

  bool is_tool_call() const { return std::holds_alternative<ToolCall>(action); }
  std::size_t token_count() const { return token_logprobs.size(); }

  bool operator==(const Step&) const = default;
};

struct Trajectory {
  std::string prompt_id;
  std::vector<Step> steps;
  Termination termination = Termination::completed;
  std::uint64_t total_tokens = 0;

  bool operator==(const Trajectory&) const = default;
};

struct RolloutGroup {
  std::string prompt_id;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

// ---------------------------------------------------------------------------
// Tool registry

enum class ParamType { string, integer, real, boolean, list, map };

struct ParamSpec {
  std::string name;
  ParamType type = ParamType::string;
  bool required = true;
};

struct ToolSpec {
  std::string name;
  std::string description;
  std::vector<ParamSpec> params;  // declared order is the wire order
  std::string returns;
};

class ToolRegistry {
 public:
  // Throws std::invalid_argument on a duplicate name.
  void register_tool(ToolSpec spec);

  const ToolSpec* find(const std::string& name) const;
  const std::vector<ToolSpec>& tools() const { return tools_; }
  std::size_t size() const { return tools_.size(); }

 private:
  std::vector<ToolSpec> tools_;
};

bool value_matches_type(const Json& v, ParamType t);
ParamType param_type_from_string(const std::string& s);
std::string to_string(ParamType t);

// ---------------------------------------------------------------------------
// Serialization

class MalformedRecord : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SchemaViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One self-contained JSON line, round-trippable by parse_trajectory.
std::string serialize_trajectory(const Trajectory& t);

// Throws MalformedRecord on invalid JSON, SchemaViolation on a broken
// invariant (the message names the violated clause).
Trajectory parse_trajectory(const std::string& record);

// ---------------------------------------------------------------------------
// Format correctness (the FormatCorrect predicate of the outcome reward)

enum class FormatIssue {
  not_alternating,
  unknown_tool,
  missing_arg,
  wrong_arg_type,
  unknown_arg,
  not_completed,
};

std::string to_string(FormatIssue r);

struct FormatReport {
  bool correct = false;
  std::vector<FormatIssue> reasons;
};

FormatReport check_format(const Trajectory& t, const ToolRegistry& registry);

inline bool format_correct(const Trajectory& t, const ToolRegistry& registry) {
  return check_format(t, registry).correct;
}

}  // namespace arl
