#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "arl/core.hpp"

namespace arl {

// ---------------------------------------------------------------------------
// Worlds

// Keyed tables of canonical records; goal_state is hidden from the agent.
struct RetailWorld {
  using Table = std::map<std::string, Json>;
  std::map<std::string, Table> tables;
  std::map<std::string, Table> goal_state;

  bool operator==(const RetailWorld&) const = default;
};

struct HiddenTest {
  std::int64_t input = 0;
  std::string expected_output;

  bool operator==(const HiddenTest&) const = default;
};

struct CodeWorkspace {
  std::map<std::string, std::string> files;
  std::string entry_file;
  std::vector<HiddenTest> hidden_tests;
  std::size_t step_budget = 0;

  bool operator==(const CodeWorkspace&) const = default;
};

using World = std::variant<RetailWorld, CodeWorkspace>;

// ---------------------------------------------------------------------------
// Tool execution (pure: the input world is never mutated)

struct ExecuteResult {
  World world;
  Observation observation;
};

// Deterministic rule-based transition. Errors are surfaced only inside the
// Observation and leave the world unchanged.
ExecuteResult execute(const World& world, const ToolCall& call);

ExecuteResult str_replace_edit(const CodeWorkspace& ws, const std::string& path,
                               const std::string& old_str, const std::string& new_str);

// true iff tables deep-equal goal_state after canonicalization.
bool verify_db(const RetailWorld& world);

// Fraction of hidden tests whose evaluated entry-file output equals the
// expected output exactly; evaluator failures count as failures.
double run_tests(const CodeWorkspace& ws);

// The tiny line-expression evaluator behind run_tests: each line is either
// "name = expr" or a bare expression; the last line's value is the output.
// Supported: integer literals, + - * / % and parentheses, the test input as
// "x", and previously bound names. Returns nullopt on any failure.
std::optional<std::int64_t> evaluate_program(const std::string& source, std::int64_t x);

// ---------------------------------------------------------------------------
// Wire protocol

struct SandboxRequest {
  std::uint64_t request_id = 0;
  std::string sandbox_id;
  std::string tool;
  Json args = Json::object();
  bool final = false;

  bool operator==(const SandboxRequest&) const = default;
};

struct RewardPayload {
  bool task_completed = false;
  double pass_rate = 0.0;

  bool operator==(const RewardPayload&) const = default;
};

struct SandboxResponse {
  std::uint64_t request_id = 0;
  ObsStatus status = ObsStatus::ok;
  std::string output;
  std::optional<ErrorKind> error_kind;
  std::optional<RewardPayload> reward_payload;  // present iff the request was final

  bool operator==(const SandboxResponse&) const = default;
};

Json to_json(const SandboxRequest& r);
Json to_json(const SandboxResponse& r);
SandboxRequest request_from_json(const Json& j);
SandboxResponse response_from_json(const Json& j);

class FrameError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr std::size_t kMaxFrameBytes = 16u << 20;

// 4-byte big-endian length prefix + UTF-8 JSON body.
std::string frame_message(const Json& body);

// Decodes one frame starting at *offset; advances *offset past it. Throws
// FrameError on a truncated or oversize frame.
Json unframe_message(const std::string& bytes, std::size_t* offset);

// ---------------------------------------------------------------------------
// Task fixtures

struct TaskFixture {
  std::string task_id;
  std::string kind;  // "retail" or "workspace"
  std::vector<Token> prompt_tokens;
  ToolRegistry registry;
  World initial_world;
  std::vector<std::string> user_messages;  // scripted, fixed per task
  std::string reward;                      // "outcome" or "turn_level"
  std::vector<ToolCall> ground_truth_calls;
};

TaskFixture fixture_from_json(const Json& j);
TaskFixture load_task_file(const std::string& path);

// ---------------------------------------------------------------------------
// Sandbox endpoint
//
// One sandbox owns one world and serves its requests sequentially. Every
// call is pushed through frame/unframe on both sides, standing in for the
// local byte stream a containerized deployment would use.
class Sandbox {
 public:
  Sandbox(std::string sandbox_id, const TaskFixture& fixture);

  // Wire-level entry: framed request bytes in, framed response bytes out.
  std::string serve_frame(const std::string& frame);

  // Client helper: frames req, round-trips through serve_frame, unframes.
  SandboxResponse call(const SandboxRequest& req);

  void reset();
  const World& world() const { return world_; }
  const ToolRegistry& registry() const { return fixture_.registry; }
  const TaskFixture& fixture() const { return fixture_; }

 private:
  SandboxResponse handle(const SandboxRequest& req);

  std::string id_;
  TaskFixture fixture_;
  World world_;
};

// Verdict of a finished trajectory world: database match or full test pass.
RewardPayload final_reward_payload(const World& world);

}  // namespace arl
