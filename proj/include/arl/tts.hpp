#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "arl/sandbox.hpp"

namespace arl {

// Test-time scaling: N candidate trajectories per prompt, one selected by
// majority vote, average log-probability, trace confidence, or a knockout
// tournament with a pluggable judge.

struct Candidate {
  Trajectory trajectory;
  // Equality key for voting: final-world digest (retail), final entry-file
  // text (workspace), or the final answer segment for plain generation.
  std::string canonical_outcome;
  std::optional<bool> correct;  // oracle label, evaluation only
  std::vector<double> token_logprobs;
  std::vector<TokenRole> role_mask;
  std::vector<std::vector<double>> topk_probs;  // rows sorted descending
};

struct CandidatePool {
  std::string prompt_id;
  std::vector<Candidate> candidates;
  std::size_t k = 100;  // top-token count for confidence, capped at V
};

enum class RoleFilter { agent_response, environment_feedback, all };

// Mean log-probability over tokens passing the filter.
// Throws std::runtime_error("empty_selection") if none do.
double avg_logprob(const Candidate& c, RoleFilter filter);

// C_i = -(1/k) sum_{j<k} log(topk[i][j]); returns the mean C_i over
// filtered tokens. Throws empty_selection / "topk_too_short".
double trace_confidence(const Candidate& c, std::size_t k, RoleFilter filter);

// Index of a candidate with the modal canonical_outcome; ties broken by
// highest avg_logprob over all tokens, then lowest index.
std::size_t majority_vote(const CandidatePool& pool);

// Highest avg_logprob under the filter wins; ties to the lowest index.
std::size_t select_by_avg_logprob(const CandidatePool& pool, RoleFilter filter);

// Highest C_avg wins, as the source formulation states, although C_avg
// grows with top-k improbability; invert=true selects the lowest instead.
std::size_t select_by_confidence(const CandidatePool& pool, std::size_t k, RoleFilter filter,
                                 bool invert = false);

// Winner index WITHIN the given group (pointers into the pool).
using Judge = std::function<std::size_t(const std::vector<const Candidate*>&)>;

// Groups of group_size per round (last group may be smaller; singletons
// advance unjudged), judged in ascending-index order until one remains.
// Judge exceptions are rethrown as "judge_failure" with round/group context.
std::size_t knockout_select(const CandidatePool& pool, const Judge& judge, std::size_t group_size);

// Evaluation judge: prefers a candidate labeled correct, else lowest index.
std::size_t oracle_judge(const std::vector<const Candidate*>& group);

// Fraction of pools whose first n candidates contain a correct one.
// Throws std::runtime_error("insufficient_candidates") when a pool has
// fewer than n candidates or lacks labels.
double pass_at_n(const std::vector<CandidatePool>& pools, std::size_t n);

// ---------------------------------------------------------------------------
// Remote judge: POST {prompt, candidates:[...]} -> {winner: index}.

struct JudgeEndpoint {
  std::string host = "127.0.0.1";
  int port = 0;
  std::string path = "/judge";
  double timeout_s = 5.0;
};

// Throws std::runtime_error("endpoint_unreachable" / "malformed_reply" /
// "index_out_of_range").
std::size_t judge_client(const JudgeEndpoint& endpoint, const std::string& prompt,
                         const std::vector<std::string>& rendered_candidates);

// Compact textual form of a candidate for the judge payload.
std::string render_candidate(const Candidate& c);

// Adapts a remote endpoint to the Judge signature.
Judge remote_judge(const JudgeEndpoint& endpoint, const std::string& prompt);

// ---------------------------------------------------------------------------
// Outcome digests and pool files

// Replays the trajectory's tool calls against the fixture's initial world:
// retail tasks digest the final world, workspaces return the final entry
// file text; trajectories without tool calls fall back to the token stream
// of their final answer action.
std::string canonical_outcome(const Trajectory& t, const TaskFixture& fixture);

Json candidate_to_json(const Candidate& c);
Candidate candidate_from_json(const Json& j);

// JSONL: a header line {prompt_id, k} followed by one candidate per line.
void save_pool(const CandidatePool& pool, const std::string& path);
CandidatePool load_pool(const std::string& path);

}  // namespace arl
