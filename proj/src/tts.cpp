#include "arl/tts.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <httplib.h>

namespace arl {

namespace {

bool passes(TokenRole role, RoleFilter filter) {
  switch (filter) {
    case RoleFilter::agent_response:
      return role == TokenRole::agent_response;
    case RoleFilter::environment_feedback:
      return role == TokenRole::environment_feedback;
    case RoleFilter::all:
      return true;
  }
  return false;
}

std::vector<std::size_t> filtered_indices(const Candidate& c, RoleFilter filter) {
  if (c.role_mask.size() != c.token_logprobs.size()) {
    throw std::runtime_error("candidate role mask length mismatch");
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < c.role_mask.size(); ++i) {
    if (passes(c.role_mask[i], filter)) idx.push_back(i);
  }
  if (idx.empty()) throw std::runtime_error("empty_selection");
  return idx;
}

// Highest score wins; exact score ties resolve to the lowest index.
template <typename Score>
std::size_t argmax_by(std::size_t n, Score&& score) {
  std::size_t best = 0;
  double best_score = score(0);
  for (std::size_t i = 1; i < n; ++i) {
    double s = score(i);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

}  // namespace

double avg_logprob(const Candidate& c, RoleFilter filter) {
  auto idx = filtered_indices(c, filter);
  double sum = 0.0;
  for (std::size_t i : idx) sum += c.token_logprobs[i];
  return sum / static_cast<double>(idx.size());
}

double trace_confidence(const Candidate& c, std::size_t k, RoleFilter filter) {
  if (k == 0) throw std::invalid_argument("trace_confidence: k must be positive");
  if (c.topk_probs.size() != c.token_logprobs.size()) {
    throw std::runtime_error("candidate topk rows do not cover every token");
  }
  auto idx = filtered_indices(c, filter);
  double sum = 0.0;
  for (std::size_t i : idx) {
    const auto& row = c.topk_probs[i];
    if (row.size() < k) throw std::runtime_error("topk_too_short");
    double ci = 0.0;
    for (std::size_t j = 0; j < k; ++j) ci += std::log(row[j]);
    sum += -ci / static_cast<double>(k);
  }
  return sum / static_cast<double>(idx.size());
}

std::size_t majority_vote(const CandidatePool& pool) {
  if (pool.candidates.empty()) throw std::invalid_argument("empty pool");
  std::size_t n = pool.candidates.size();
  std::vector<std::size_t> counts(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (pool.candidates[j].canonical_outcome == pool.candidates[i].canonical_outcome) ++counts[i];
    }
  }
  std::size_t max_count = *std::max_element(counts.begin(), counts.end());
  std::size_t best = n;  // sentinel
  double best_lp = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (counts[i] != max_count) continue;
    double lp = avg_logprob(pool.candidates[i], RoleFilter::all);
    if (best == n || lp > best_lp) {
      best = i;
      best_lp = lp;
    }
  }
  return best;
}

std::size_t select_by_avg_logprob(const CandidatePool& pool, RoleFilter filter) {
  if (pool.candidates.empty()) throw std::invalid_argument("empty pool");
  return argmax_by(pool.candidates.size(),
                   [&](std::size_t i) { return avg_logprob(pool.candidates[i], filter); });
}

std::size_t select_by_confidence(const CandidatePool& pool, std::size_t k, RoleFilter filter,
                                 bool invert) {
  if (pool.candidates.empty()) throw std::invalid_argument("empty pool");
  double sign = invert ? -1.0 : 1.0;
  return argmax_by(pool.candidates.size(), [&](std::size_t i) {
    return sign * trace_confidence(pool.candidates[i], k, filter);
  });
}

std::size_t knockout_select(const CandidatePool& pool, const Judge& judge,
                            std::size_t group_size) {
  if (pool.candidates.empty()) throw std::invalid_argument("empty pool");
  if (group_size < 2) throw std::invalid_argument("knockout: group_size must be >= 2");
  std::vector<std::size_t> alive(pool.candidates.size());
  for (std::size_t i = 0; i < alive.size(); ++i) alive[i] = i;

  std::size_t round = 0;
  while (alive.size() > 1) {
    std::vector<std::size_t> winners;
    for (std::size_t g = 0; g * group_size < alive.size(); ++g) {
      std::size_t lo = g * group_size;
      std::size_t hi = std::min(lo + group_size, alive.size());
      if (hi - lo == 1) {
        winners.push_back(alive[lo]);  // singletons advance unjudged
        continue;
      }
      std::vector<const Candidate*> group;
      for (std::size_t i = lo; i < hi; ++i) group.push_back(&pool.candidates[alive[i]]);
      std::size_t w;
      try {
        w = judge(group);
      } catch (const std::exception& e) {
        throw std::runtime_error("judge_failure at round " + std::to_string(round) + " group " +
                                 std::to_string(g) + ": " + e.what());
      }
      if (w >= group.size()) {
        throw std::runtime_error("judge_failure at round " + std::to_string(round) + " group " +
                                 std::to_string(g) + ": winner index out of range");
      }
      winners.push_back(alive[lo + w]);
    }
    alive = std::move(winners);
    ++round;
  }
  return alive.front();
}

std::size_t oracle_judge(const std::vector<const Candidate*>& group) {
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (group[i]->correct.value_or(false)) return i;
  }
  return 0;
}

double pass_at_n(const std::vector<CandidatePool>& pools, std::size_t n) {
  if (pools.empty() || n == 0) throw std::invalid_argument("pass_at_n: need pools and n >= 1");
  double hits = 0.0;
  for (const auto& pool : pools) {
    if (pool.candidates.size() < n) throw std::runtime_error("insufficient_candidates");
    bool hit = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!pool.candidates[i].correct.has_value()) {
        throw std::runtime_error("insufficient_candidates: missing correctness label");
      }
      if (*pool.candidates[i].correct) hit = true;
    }
    if (hit) hits += 1.0;
  }
  return hits / static_cast<double>(pools.size());
}

// ---------------------------------------------------------------------------
// Remote judge

std::size_t judge_client(const JudgeEndpoint& endpoint, const std::string& prompt,
                         const std::vector<std::string>& rendered_candidates) {
  httplib::Client client(endpoint.host, endpoint.port);
  auto secs = static_cast<time_t>(endpoint.timeout_s);
  auto usecs = static_cast<time_t>((endpoint.timeout_s - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);

  Json body = {{"prompt", prompt}, {"candidates", rendered_candidates}};
  auto res = client.Post(endpoint.path, body.dump(), "application/json");
  if (!res || res->status != 200) throw std::runtime_error("endpoint_unreachable");

  Json reply = Json::parse(res->body, nullptr, false);
  if (reply.is_discarded() || !reply.is_object() || !reply.contains("winner") ||
      !reply["winner"].is_number_integer()) {
    throw std::runtime_error("malformed_reply");
  }
  auto winner = reply["winner"].get<std::int64_t>();
  if (winner < 0 || static_cast<std::size_t>(winner) >= rendered_candidates.size()) {
    throw std::runtime_error("index_out_of_range");
  }
  return static_cast<std::size_t>(winner);
}

std::string render_candidate(const Candidate& c) {
  std::ostringstream out;
  out << "outcome: " << c.canonical_outcome << "\n" << serialize_trajectory(c.trajectory);
  return out.str();
}

Judge remote_judge(const JudgeEndpoint& endpoint, const std::string& prompt) {
  return [endpoint, prompt](const std::vector<const Candidate*>& group) {
    std::vector<std::string> rendered;
    for (const Candidate* c : group) rendered.push_back(render_candidate(*c));
    return judge_client(endpoint, prompt, rendered);
  };
}

// ---------------------------------------------------------------------------
// Outcome digests

std::string canonical_outcome(const Trajectory& t, const TaskFixture& fixture) {
  bool any_call = false;
  for (const auto& s : t.steps) {
    if (std::holds_alternative<ToolCall>(s.action)) any_call = true;
  }
  if (!any_call) {
    // Plain generation: the token stream of the last answer-tagged action.
    std::ostringstream out;
    for (auto it = t.steps.rbegin(); it != t.steps.rend(); ++it) {
      const auto* gen = std::get_if<GenerationAction>(&it->action);
      if (gen == nullptr || gen->role_tag != RoleTag::answer) continue;
      out << "answer:";
      for (Token tok : gen->tokens) out << ' ' << tok;
      return out.str();
    }
    return "answer:";
  }

  World world = fixture.initial_world;
  for (const auto& s : t.steps) {
    const auto* call = std::get_if<ToolCall>(&s.action);
    if (call == nullptr) continue;
    world = execute(world, *call).world;
  }
  if (const auto* retail = std::get_if<RetailWorld>(&world)) {
    Json tables = Json::object();
    for (const auto& [name, table] : retail->tables) {
      Json rows = Json::object();
      for (const auto& [key, rec] : table) rows[key] = rec;
      tables[name] = rows;
    }
    return "world:" + canonical_dump(canonicalize(tables));
  }
  const auto& ws = std::get<CodeWorkspace>(world);
  auto it = ws.files.find(ws.entry_file);
  return "file:" + (it != ws.files.end() ? it->second : std::string());
}

// ---------------------------------------------------------------------------
// Pool files

Json candidate_to_json(const Candidate& c) {
  Json j;
  j["trajectory"] = Json::parse(serialize_trajectory(c.trajectory));
  j["canonical_outcome"] = c.canonical_outcome;
  if (c.correct.has_value()) j["correct"] = *c.correct;
  j["token_logprobs"] = c.token_logprobs;
  Json roles = Json::array();
  for (TokenRole r : c.role_mask) {
    roles.push_back(r == TokenRole::agent_response ? "agent_response" : "environment_feedback");
  }
  j["role_mask"] = roles;
  j["topk_probs"] = c.topk_probs;
  return j;
}

Candidate candidate_from_json(const Json& j) {
  Candidate c;
  c.trajectory = parse_trajectory(j.at("trajectory").dump());
  c.canonical_outcome = j.at("canonical_outcome").get<std::string>();
  if (j.contains("correct")) c.correct = j.at("correct").get<bool>();
  c.token_logprobs = j.at("token_logprobs").get<std::vector<double>>();
  for (const auto& r : j.at("role_mask")) {
    std::string s = r.get<std::string>();
    if (s == "agent_response") {
      c.role_mask.push_back(TokenRole::agent_response);
    } else if (s == "environment_feedback") {
      c.role_mask.push_back(TokenRole::environment_feedback);
    } else {
      throw MalformedRecord("unknown token role: " + s);
    }
  }
  c.topk_probs = j.at("topk_probs").get<std::vector<std::vector<double>>>();
  return c;
}

void save_pool(const CandidatePool& pool, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write pool: " + path);
    Json header = {{"prompt_id", pool.prompt_id}, {"k", pool.k}};
    out << header.dump() << '\n';
    for (const auto& c : pool.candidates) out << candidate_to_json(c).dump() << '\n';
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot rename pool into place: " + path);
  }
}

CandidatePool load_pool(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read pool: " + path);
  std::string line;
  if (!std::getline(in, line)) throw MalformedRecord("empty pool file: " + path);
  Json header = Json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.is_object()) {
    throw MalformedRecord("bad pool header: " + path);
  }
  CandidatePool pool;
  pool.prompt_id = header.at("prompt_id").get<std::string>();
  pool.k = header.at("k").get<std::size_t>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded()) throw MalformedRecord("bad candidate line in " + path);
    pool.candidates.push_back(candidate_from_json(j));
  }
  if (pool.candidates.empty()) throw MalformedRecord("pool has no candidates: " + path);
  return pool;
}

}  // namespace arl
