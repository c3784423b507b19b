#include "arl/core.hpp"

#include <algorithm>
#include <set>

namespace arl {

namespace {

const char* termination_name(Termination t) {
  switch (t) {
    case Termination::completed: return "completed";
    case Termination::max_context: return "max_context";
    case Termination::max_steps: return "max_steps";
    case Termination::timeout: return "timeout";
  }
  return "?";
}

Termination termination_from(const std::string& s) {
  if (s == "completed") return Termination::completed;
  if (s == "max_context") return Termination::max_context;
  if (s == "max_steps") return Termination::max_steps;
  if (s == "timeout") return Termination::timeout;
  throw SchemaViolation("unknown termination: " + s);
}

const char* role_tag_name(RoleTag r) {
  switch (r) {
    case RoleTag::think: return "think";
    case RoleTag::answer: return "answer";
    case RoleTag::summarize: return "summarize";
  }
  return "?";
}

RoleTag role_tag_from(const std::string& s) {
  if (s == "think") return RoleTag::think;
  if (s == "answer") return RoleTag::answer;
  if (s == "summarize") return RoleTag::summarize;
  throw SchemaViolation("unknown role_tag: " + s);
}

const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_input: return "invalid_input";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::timeout: return "timeout";
    case ErrorKind::internal: return "internal";
  }
  return "?";
}

ErrorKind error_kind_from(const std::string& s) {
  if (s == "invalid_input") return ErrorKind::invalid_input;
  if (s == "not_found") return ErrorKind::not_found;
  if (s == "timeout") return ErrorKind::timeout;
  if (s == "internal") return ErrorKind::internal;
  throw SchemaViolation("unknown error_kind: " + s);
}

Json step_to_json(const Step& s) {
  Json j;
  if (const auto* gen = std::get_if<GenerationAction>(&s.action)) {
    j["action"] = {{"type", "generation"},
                   {"tokens", gen->tokens},
                   {"role_tag", role_tag_name(gen->role_tag)}};
  } else {
    const auto& call = std::get<ToolCall>(s.action);
    j["action"] = {{"type", "tool_call"},
                   {"tool_name", call.tool_name},
                   {"args", call.args}};
  }
  if (s.observation) {
    Json o;
    o["source_tool"] = s.observation->source_tool;
    o["status"] = s.observation->status == ObsStatus::ok ? "ok" : "error";
    o["payload"] = s.observation->payload;
    if (s.observation->error_kind) o["error_kind"] = error_kind_name(*s.observation->error_kind);
    j["observation"] = o;
  }
  j["token_logprobs"] = s.token_logprobs;
  Json mask = Json::array();
  for (TokenRole r : s.role_mask) {
    mask.push_back(r == TokenRole::agent_response ? "agent_response" : "environment_feedback");
  }
  j["role_mask"] = mask;
  return j;
}

Step step_from_json(const Json& j) {
  Step s;
  const Json& a = j.at("action");
  std::string type = a.at("type").get<std::string>();
  if (type == "generation") {
    GenerationAction gen;
    gen.tokens = a.at("tokens").get<std::vector<Token>>();
    gen.role_tag = role_tag_from(a.at("role_tag").get<std::string>());
    if (gen.tokens.empty()) throw SchemaViolation("generation action with empty token sequence");
    s.action = std::move(gen);
  } else if (type == "tool_call") {
    ToolCall call;
    call.tool_name = a.at("tool_name").get<std::string>();
    call.args = a.at("args");
    if (call.tool_name.empty()) throw SchemaViolation("tool call with empty tool_name");
    if (!call.args.is_object()) throw SchemaViolation("tool call args must be a map");
    s.action = std::move(call);
  } else {
    throw SchemaViolation("unknown action type: " + type);
  }
  if (j.contains("observation")) {
    const Json& o = j.at("observation");
    Observation obs;
    obs.source_tool = o.at("source_tool").get<std::string>();
    std::string st = o.at("status").get<std::string>();
    if (st == "ok") {
      obs.status = ObsStatus::ok;
    } else if (st == "error") {
      obs.status = ObsStatus::error;
    } else {
      throw SchemaViolation("unknown observation status: " + st);
    }
    obs.payload = o.at("payload").get<std::string>();
    if (o.contains("error_kind")) obs.error_kind = error_kind_from(o.at("error_kind").get<std::string>());
    if ((obs.status == ObsStatus::error) != obs.error_kind.has_value()) {
      throw SchemaViolation("error_kind present iff status is error");
    }
    s.observation = std::move(obs);
  }
  s.token_logprobs = j.at("token_logprobs").get<std::vector<double>>();
  for (const auto& m : j.at("role_mask")) {
    std::string r = m.get<std::string>();
    if (r == "agent_response") {
      s.role_mask.push_back(TokenRole::agent_response);
    } else if (r == "environment_feedback") {
      s.role_mask.push_back(TokenRole::environment_feedback);
    } else {
      throw SchemaViolation("unknown role_mask tag: " + r);
    }
  }
  if (s.role_mask.size() != s.token_logprobs.size()) {
    throw SchemaViolation("role_mask length differs from token_logprobs length");
  }
  if (s.observation.has_value() != s.is_tool_call()) {
    throw SchemaViolation("observation present iff action is a tool call");
  }
  return s;
}

}  // namespace

void ToolRegistry::register_tool(ToolSpec spec) {
  if (find(spec.name) != nullptr) throw std::invalid_argument("duplicate_tool: " + spec.name);
  std::set<std::string> seen;
  for (const auto& p : spec.params) {
    if (!seen.insert(p.name).second) {
      throw std::invalid_argument("duplicate param name in tool " + spec.name + ": " + p.name);
    }
  }
  tools_.push_back(std::move(spec));
}

const ToolSpec* ToolRegistry::find(const std::string& name) const {
  for (const auto& t : tools_) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

bool value_matches_type(const Json& v, ParamType t) {
  switch (t) {
    case ParamType::string: return v.is_string();
    case ParamType::integer: {
      if (v.is_number_integer() || v.is_number_unsigned()) return true;
      // Canonicalization unifies integer-valued reals with integers.
      return v.is_number_float() && canonicalize(v).is_number_integer();
    }
    case ParamType::real: return v.is_number();
    case ParamType::boolean: return v.is_boolean();
    case ParamType::list: return v.is_array();
    case ParamType::map: return v.is_object();
  }
  return false;
}

ParamType param_type_from_string(const std::string& s) {
  if (s == "string") return ParamType::string;
  if (s == "int") return ParamType::integer;
  if (s == "real") return ParamType::real;
  if (s == "bool") return ParamType::boolean;
  if (s == "list") return ParamType::list;
  if (s == "map") return ParamType::map;
  throw std::invalid_argument("unknown param type: " + s);
}

std::string to_string(ParamType t) {
  switch (t) {
    case ParamType::string: return "string";
    case ParamType::integer: return "int";
    case ParamType::real: return "real";
    case ParamType::boolean: return "bool";
    case ParamType::list: return "list";
    case ParamType::map: return "map";
  }
  return "?";
}

std::string serialize_trajectory(const Trajectory& t) {
  Json j;
  j["prompt_id"] = t.prompt_id;
  j["termination"] = termination_name(t.termination);
  j["total_tokens"] = t.total_tokens;
  Json steps = Json::array();
  for (const auto& s : t.steps) steps.push_back(step_to_json(s));
  j["steps"] = steps;
  return j.dump();
}

Trajectory parse_trajectory(const std::string& record) {
  Json j = Json::parse(record, nullptr, false);
  if (j.is_discarded()) throw MalformedRecord("malformed_record: not valid JSON");
  try {
    Trajectory t;
    t.prompt_id = j.at("prompt_id").get<std::string>();
    t.termination = termination_from(j.at("termination").get<std::string>());
    t.total_tokens = j.at("total_tokens").get<std::uint64_t>();
    for (const auto& s : j.at("steps")) t.steps.push_back(step_from_json(s));
    std::uint64_t sum = 0;
    for (const auto& s : t.steps) sum += s.token_count();
    if (sum != t.total_tokens) {
      throw SchemaViolation("total_tokens does not match sum of step token counts");
    }
    return t;
  } catch (const Json::exception& e) {
    throw SchemaViolation(std::string("schema_violation: ") + e.what());
  }
}

std::string to_string(FormatIssue r) {
  switch (r) {
    case FormatIssue::not_alternating: return "not_alternating";
    case FormatIssue::unknown_tool: return "unknown_tool";
    case FormatIssue::missing_arg: return "missing_arg";
    case FormatIssue::wrong_arg_type: return "wrong_arg_type";
    case FormatIssue::unknown_arg: return "unknown_arg";
    case FormatIssue::not_completed: return "not_completed";
  }
  return "?";
}

FormatReport check_format(const Trajectory& t, const ToolRegistry& registry) {
  FormatReport rep;
  auto add = [&rep](FormatIssue r) {
    if (std::find(rep.reasons.begin(), rep.reasons.end(), r) == rep.reasons.end()) {
      rep.reasons.push_back(r);
    }
  };
  for (const auto& s : t.steps) {
    if (s.observation.has_value() != s.is_tool_call()) add(FormatIssue::not_alternating);
    if (!s.is_tool_call()) continue;
    const auto& call = std::get<ToolCall>(s.action);
    const ToolSpec* spec = registry.find(call.tool_name);
    if (spec == nullptr) {
      add(FormatIssue::unknown_tool);
      continue;
    }
    for (const auto& p : spec->params) {
      auto it = call.args.find(p.name);
      if (it == call.args.end()) {
        if (p.required) add(FormatIssue::missing_arg);
      } else if (!value_matches_type(*it, p.type)) {
        add(FormatIssue::wrong_arg_type);
      }
    }
    for (auto it = call.args.begin(); it != call.args.end(); ++it) {
      bool declared = std::any_of(spec->params.begin(), spec->params.end(),
                                  [&](const ParamSpec& p) { return p.name == it.key(); });
      if (!declared) add(FormatIssue::unknown_arg);
    }
  }
  if (t.termination != Termination::completed) add(FormatIssue::not_completed);
  rep.correct = rep.reasons.empty();
  return rep;
}

}  // namespace arl
