#include "arl/sandbox.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "arl/policy.hpp"

namespace arl {

namespace {

Observation obs_ok(const std::string& tool, std::string payload) {
  return Observation{tool, ObsStatus::ok, std::move(payload), std::nullopt};
}

Observation obs_error(const std::string& tool, ErrorKind kind, std::string payload) {
  return Observation{tool, ObsStatus::error, std::move(payload), kind};
}

// ---- retail ----

const Json* find_arg(const ToolCall& call, const std::string& name) {
  auto it = call.args.find(name);
  return it == call.args.end() ? nullptr : &*it;
}

ExecuteResult execute_retail(const RetailWorld& world, const ToolCall& call) {
  const std::string& name = call.tool_name;
  if (name == "submit") return {world, obs_ok(name, "submitted")};
  bool is_get = name.rfind("get_", 0) == 0;
  bool is_update = name.rfind("update_", 0) == 0;
  if (!is_get && !is_update) {
    return {world, obs_error(name, ErrorKind::invalid_input, "unknown tool: " + name)};
  }
  std::string table_name = (is_get ? name.substr(4) : name.substr(7)) + "s";
  auto table_it = world.tables.find(table_name);
  if (table_it == world.tables.end()) {
    return {world, obs_error(name, ErrorKind::not_found, "no such table: " + table_name)};
  }
  const Json* id = find_arg(call, "id");
  if (id == nullptr || !id->is_number()) {
    return {world, obs_error(name, ErrorKind::invalid_input, "missing or non-numeric id")};
  }
  std::string key = canonical_dump(*id);
  auto rec_it = table_it->second.find(key);
  if (rec_it == table_it->second.end()) {
    return {world, obs_error(name, ErrorKind::not_found, "no record with id " + key)};
  }
  if (is_get) return {world, obs_ok(name, canonical_dump(rec_it->second))};

  const Json* field = find_arg(call, "field");
  const Json* value = find_arg(call, "value");
  if (field == nullptr || !field->is_string() || value == nullptr) {
    return {world, obs_error(name, ErrorKind::invalid_input, "update needs field and value")};
  }
  RetailWorld next = world;
  Json& rec = next.tables[table_name][key];
  rec[field->get<std::string>()] = canonicalize(*value);
  return {std::move(next), obs_ok(name, canonical_dump(rec))};
}

// ---- workspace ----

bool path_ok(const std::string& p) {
  return !p.empty() && p.front() != '/' && p.find("..") == std::string::npos;
}

ExecuteResult execute_workspace(const CodeWorkspace& ws, const ToolCall& call) {
  const std::string& name = call.tool_name;
  if (name == "submit") return {ws, obs_ok(name, "submitted")};
  if (name == "str_replace") {
    const Json* path = find_arg(call, "path");
    const Json* old_str = find_arg(call, "old_str");
    const Json* new_str = find_arg(call, "new_str");
    if (path == nullptr || !path->is_string() || old_str == nullptr || !old_str->is_string() ||
        new_str == nullptr || !new_str->is_string()) {
      return {ws, obs_error(name, ErrorKind::invalid_input, "str_replace needs string path/old_str/new_str")};
    }
    return str_replace_edit(ws, path->get<std::string>(), old_str->get<std::string>(),
                            new_str->get<std::string>());
  }
  if (name == "bash") {
    const Json* cmd = find_arg(call, "cmd");
    if (cmd == nullptr || !cmd->is_string()) {
      return {ws, obs_error(name, ErrorKind::invalid_input, "bash needs a string cmd")};
    }
    std::istringstream in(cmd->get<std::string>());
    std::string verb;
    in >> verb;
    if (verb == "list") {
      std::string out;
      for (const auto& [p, _] : ws.files) {
        out += p;
        out += '\n';
      }
      return {ws, obs_ok(name, out)};
    }
    if (verb == "read") {
      std::string path;
      in >> path;
      auto it = ws.files.find(path);
      if (it == ws.files.end()) return {ws, obs_error(name, ErrorKind::not_found, "no such file: " + path)};
      return {ws, obs_ok(name, it->second)};
    }
    if (verb == "search") {
      std::string term;
      in >> term;
      if (term.empty()) return {ws, obs_error(name, ErrorKind::invalid_input, "search needs a term")};
      std::string out;
      for (const auto& [p, text] : ws.files) {
        std::istringstream lines(text);
        std::string line;
        std::size_t ln = 0;
        while (std::getline(lines, line)) {
          ++ln;
          if (line.find(term) != std::string::npos) {
            out += p + ":" + std::to_string(ln) + ":" + line + "\n";
          }
        }
      }
      return {ws, obs_ok(name, out)};
    }
    return {ws, obs_error(name, ErrorKind::invalid_input, "unknown bash verb: " + verb)};
  }
  return {ws, obs_error(name, ErrorKind::invalid_input, "unknown tool: " + name)};
}

}  // namespace

ExecuteResult execute(const World& world, const ToolCall& call) {
  if (const auto* retail = std::get_if<RetailWorld>(&world)) return execute_retail(*retail, call);
  return execute_workspace(std::get<CodeWorkspace>(world), call);
}

ExecuteResult str_replace_edit(const CodeWorkspace& ws, const std::string& path,
                               const std::string& old_str, const std::string& new_str) {
  auto it = ws.files.find(path);
  if (it == ws.files.end()) {
    return {ws, obs_error("str_replace", ErrorKind::not_found, "no such file: " + path)};
  }
  if (old_str.empty()) {
    return {ws, obs_error("str_replace", ErrorKind::invalid_input, "old_str must be non-empty")};
  }
  const std::string& text = it->second;
  std::size_t count = 0;
  std::size_t first = std::string::npos;
  for (std::size_t pos = text.find(old_str); pos != std::string::npos;
       pos = text.find(old_str, pos + 1)) {
    if (count == 0) first = pos;
    ++count;
  }
  if (count == 0) {
    return {ws, obs_error("str_replace", ErrorKind::not_found, "old_str not found")};
  }
  if (count > 1) {
    return {ws, obs_error("str_replace", ErrorKind::invalid_input,
                          "old_str occurs " + std::to_string(count) + " times; must be unique")};
  }
  CodeWorkspace next = ws;
  next.files[path] = text.substr(0, first) + new_str + text.substr(first + old_str.size());
  return {std::move(next), obs_ok("str_replace", "edited " + path)};
}

bool verify_db(const RetailWorld& world) {
  if (world.tables.size() != world.goal_state.size()) return false;
  for (const auto& [name, table] : world.tables) {
    auto git = world.goal_state.find(name);
    if (git == world.goal_state.end() || git->second.size() != table.size()) return false;
    for (const auto& [key, rec] : table) {
      auto rit = git->second.find(key);
      if (rit == git->second.end() || canonicalize(rec) != canonicalize(rit->second)) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Line-expression evaluator

namespace {

class ExprParser {
 public:
  ExprParser(const std::string& s, const std::map<std::string, std::int64_t>& env)
      : s_(s), env_(env) {}

  std::optional<std::int64_t> parse() {
    auto v = expr();
    skip_ws();
    if (!v || pos_ != s_.size()) return std::nullopt;
    return v;
  }

 private:
  std::optional<std::int64_t> expr() {
    auto v = term();
    while (v) {
      skip_ws();
      if (peek() == '+' || peek() == '-') {
        char op = s_[pos_++];
        auto r = term();
        if (!r) return std::nullopt;
        v = op == '+' ? *v + *r : *v - *r;
      } else {
        break;
      }
    }
    return v;
  }

  std::optional<std::int64_t> term() {
    auto v = factor();
    while (v) {
      skip_ws();
      if (peek() == '*' || peek() == '/' || peek() == '%') {
        char op = s_[pos_++];
        auto r = factor();
        if (!r) return std::nullopt;
        if ((op == '/' || op == '%') && *r == 0) return std::nullopt;
        v = op == '*' ? *v * *r : op == '/' ? *v / *r : *v % *r;
      } else {
        break;
      }
    }
    return v;
  }

  std::optional<std::int64_t> factor() {
    skip_ws();
    if (peek() == '-') {
      ++pos_;
      auto v = factor();
      if (!v) return std::nullopt;
      return -*v;
    }
    if (peek() == '(') {
      ++pos_;
      auto v = expr();
      skip_ws();
      if (!v || peek() != ')') return std::nullopt;
      ++pos_;
      return v;
    }
    if (std::isdigit(static_cast<unsigned char>(peek()))) {
      std::int64_t n = 0;
      while (std::isdigit(static_cast<unsigned char>(peek()))) n = n * 10 + (s_[pos_++] - '0');
      return n;
    }
    if (std::isalpha(static_cast<unsigned char>(peek())) || peek() == '_') {
      std::string name;
      while (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_') name += s_[pos_++];
      auto it = env_.find(name);
      if (it == env_.end()) return std::nullopt;
      return it->second;
    }
    return std::nullopt;
  }

  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  const std::string& s_;
  const std::map<std::string, std::int64_t>& env_;
  std::size_t pos_ = 0;
};

bool is_identifier(const std::string& s) {
  if (s.empty() || (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_')) return false;
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c) || c == '_'; });
}

}  // namespace

std::optional<std::int64_t> evaluate_program(const std::string& source, std::int64_t x) {
  std::map<std::string, std::int64_t> env{{"x", x}};
  std::optional<std::int64_t> last;
  std::istringstream in(source);
  std::string line;
  while (std::getline(in, line)) {
    std::string trimmed = line;
    trimmed.erase(0, trimmed.find_first_not_of(" \t\r"));
    trimmed.erase(trimmed.find_last_not_of(" \t\r") + 1);
    if (trimmed.empty()) continue;
    std::string target;
    std::string body = trimmed;
    std::size_t eq = trimmed.find('=');
    if (eq != std::string::npos) {
      std::string lhs = trimmed.substr(0, eq);
      lhs.erase(lhs.find_last_not_of(" \t") + 1);
      if (!is_identifier(lhs)) return std::nullopt;
      target = lhs;
      body = trimmed.substr(eq + 1);
    }
    auto v = ExprParser(body, env).parse();
    if (!v) return std::nullopt;
    if (!target.empty()) env[target] = *v;
    last = v;
  }
  return last;
}

double run_tests(const CodeWorkspace& ws) {
  if (ws.hidden_tests.empty()) return 0.0;
  auto entry = ws.files.find(ws.entry_file);
  std::size_t passed = 0;
  for (const auto& t : ws.hidden_tests) {
    if (entry == ws.files.end()) continue;
    auto v = evaluate_program(entry->second, t.input);
    if (v && std::to_string(*v) == t.expected_output) ++passed;
  }
  return static_cast<double>(passed) / static_cast<double>(ws.hidden_tests.size());
}

// ---------------------------------------------------------------------------
// Wire protocol

Json to_json(const SandboxRequest& r) {
  return Json{{"request_id", r.request_id},
              {"sandbox_id", r.sandbox_id},
              {"tool", r.tool},
              {"args", r.args},
              {"final", r.final}};
}

Json to_json(const SandboxResponse& r) {
  Json j{{"request_id", r.request_id},
         {"status", r.status == ObsStatus::ok ? "ok" : "error"},
         {"output", r.output}};
  if (r.error_kind) {
    switch (*r.error_kind) {
      case ErrorKind::invalid_input: j["error_kind"] = "invalid_input"; break;
      case ErrorKind::not_found: j["error_kind"] = "not_found"; break;
      case ErrorKind::timeout: j["error_kind"] = "timeout"; break;
      case ErrorKind::internal: j["error_kind"] = "internal"; break;
    }
  }
  if (r.reward_payload) {
    j["reward_payload"] = Json{{"task_completed", r.reward_payload->task_completed},
                               {"pass_rate", r.reward_payload->pass_rate}};
  }
  return j;
}

SandboxRequest request_from_json(const Json& j) {
  SandboxRequest r;
  r.request_id = j.at("request_id").get<std::uint64_t>();
  r.sandbox_id = j.at("sandbox_id").get<std::string>();
  r.tool = j.at("tool").get<std::string>();
  r.args = j.at("args");
  r.final = j.at("final").get<bool>();
  return r;
}

SandboxResponse response_from_json(const Json& j) {
  SandboxResponse r;
  r.request_id = j.at("request_id").get<std::uint64_t>();
  std::string st = j.at("status").get<std::string>();
  r.status = st == "ok" ? ObsStatus::ok : ObsStatus::error;
  r.output = j.at("output").get<std::string>();
  if (j.contains("error_kind")) {
    std::string k = j.at("error_kind").get<std::string>();
    if (k == "invalid_input") r.error_kind = ErrorKind::invalid_input;
    else if (k == "not_found") r.error_kind = ErrorKind::not_found;
    else if (k == "timeout") r.error_kind = ErrorKind::timeout;
    else r.error_kind = ErrorKind::internal;
  }
  if (j.contains("reward_payload")) {
    const Json& p = j.at("reward_payload");
    r.reward_payload = RewardPayload{p.at("task_completed").get<bool>(),
                                     p.at("pass_rate").get<double>()};
  }
  return r;
}

std::string frame_message(const Json& body) {
  std::string payload = body.dump();
  if (payload.size() > kMaxFrameBytes) throw FrameError("frame_too_large");
  std::string out;
  out.reserve(payload.size() + 4);
  std::uint32_t n = static_cast<std::uint32_t>(payload.size());
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out += payload;
  return out;
}

Json unframe_message(const std::string& bytes, std::size_t* offset) {
  std::size_t pos = *offset;
  if (pos + 4 > bytes.size()) throw FrameError("malformed_frame: truncated length prefix");
  std::uint32_t n = 0;
  for (int i = 0; i < 4; ++i) n = (n << 8) | static_cast<std::uint8_t>(bytes[pos + i]);
  if (n > kMaxFrameBytes) throw FrameError("frame_too_large");
  if (pos + 4 + n > bytes.size()) throw FrameError("malformed_frame: truncated body");
  Json j = Json::parse(bytes.substr(pos + 4, n), nullptr, false);
  if (j.is_discarded()) throw FrameError("malformed_frame: body is not valid JSON");
  *offset = pos + 4 + n;
  return j;
}

// ---------------------------------------------------------------------------
// Task fixtures

TaskFixture fixture_from_json(const Json& j) {
  TaskFixture f;
  f.task_id = j.at("task_id").get<std::string>();
  f.kind = j.at("kind").get<std::string>();
  if (j.contains("prompt_tokens")) f.prompt_tokens = j.at("prompt_tokens").get<std::vector<Token>>();
  for (const auto& t : j.at("tools")) {
    ToolSpec spec;
    spec.name = t.at("name").get<std::string>();
    if (t.contains("description")) spec.description = t.at("description").get<std::string>();
    if (t.contains("returns")) spec.returns = t.at("returns").get<std::string>();
    if (t.contains("params")) {
      for (const auto& p : t.at("params")) {
        ParamSpec ps;
        ps.name = p.at("name").get<std::string>();
        ps.type = param_type_from_string(p.at("type").get<std::string>());
        ps.required = p.value("required", true);
        spec.params.push_back(std::move(ps));
      }
    }
    f.registry.register_tool(std::move(spec));
  }
  if (f.kind == "retail") {
    RetailWorld w;
    for (auto it = j.at("initial").begin(); it != j.at("initial").end(); ++it) {
      for (auto rit = it.value().begin(); rit != it.value().end(); ++rit) {
        w.tables[it.key()][rit.key()] = canonicalize(rit.value());
      }
    }
    for (auto it = j.at("goal").begin(); it != j.at("goal").end(); ++it) {
      for (auto rit = it.value().begin(); rit != it.value().end(); ++rit) {
        w.goal_state[it.key()][rit.key()] = canonicalize(rit.value());
      }
    }
    f.initial_world = std::move(w);
  } else if (f.kind == "workspace") {
    CodeWorkspace w;
    for (auto it = j.at("files").begin(); it != j.at("files").end(); ++it) {
      const std::string& path = it.key();
      if (path.empty() || path.front() == '/' || path.find("..") != std::string::npos) {
        throw std::invalid_argument("fixture has a non-normalized path: " + path);
      }
      w.files[path] = it.value().get<std::string>();
    }
    w.entry_file = j.at("entry_file").get<std::string>();
    for (const auto& t : j.at("hidden_tests")) {
      w.hidden_tests.push_back(
          {t.at("input").get<std::int64_t>(), t.at("expected_output").get<std::string>()});
    }
    w.step_budget = j.value("step_budget", 16u);
    f.initial_world = std::move(w);
  } else {
    throw std::invalid_argument("unknown fixture kind: " + f.kind);
  }
  if (j.contains("user_messages")) {
    f.user_messages = j.at("user_messages").get<std::vector<std::string>>();
  }
  f.reward = j.value("reward", std::string("outcome"));
  if (j.contains("ground_truth_calls")) {
    for (const auto& c : j.at("ground_truth_calls")) {
      ToolCall call;
      call.tool_name = c.at("tool_name").get<std::string>();
      call.args = canonicalize(c.at("args"));
      f.ground_truth_calls.push_back(std::move(call));
    }
  }
  return f;
}

TaskFixture load_task_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open fixture: " + path);
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("fixture is not valid JSON: " + path);
  return fixture_from_json(j);
}

// ---------------------------------------------------------------------------
// Sandbox endpoint

Sandbox::Sandbox(std::string sandbox_id, const TaskFixture& fixture)
    : id_(std::move(sandbox_id)), fixture_(fixture), world_(fixture.initial_world) {}

void Sandbox::reset() { world_ = fixture_.initial_world; }

RewardPayload final_reward_payload(const World& world) {
  if (const auto* retail = std::get_if<RetailWorld>(&world)) {
    bool ok = verify_db(*retail);
    return {ok, ok ? 1.0 : 0.0};
  }
  double rate = run_tests(std::get<CodeWorkspace>(world));
  return {rate == 1.0, rate};
}

SandboxResponse Sandbox::handle(const SandboxRequest& req) {
  ToolCall call;
  call.tool_name = req.tool;
  call.args = req.args;
  ExecuteResult res = execute(world_, call);
  world_ = std::move(res.world);
  SandboxResponse resp;
  resp.request_id = req.request_id;
  resp.status = res.observation.status;
  resp.output = res.observation.payload;
  resp.error_kind = res.observation.error_kind;
  if (req.final) resp.reward_payload = final_reward_payload(world_);
  return resp;
}

std::string Sandbox::serve_frame(const std::string& frame) {
  std::size_t off = 0;
  SandboxRequest req = request_from_json(unframe_message(frame, &off));
  return frame_message(to_json(handle(req)));
}

SandboxResponse Sandbox::call(const SandboxRequest& req) {
  std::string reply = serve_frame(frame_message(to_json(req)));
  std::size_t off = 0;
  return response_from_json(unframe_message(reply, &off));
}

}  // namespace arl
