#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "arl/core.hpp"

namespace arl {

// ---------------------------------------------------------------------------
// Vocabulary layout
//
// Every action is a token sequence over one synthetic vocabulary. A handful
// of low ids are sentinels; everything at or above kFirstContent is content.
// A tool call is serialized as
//   [kBeginCall, name token, one token per declared argument, kEndCall]
// so scoring a call is an ordinary sequence log-probability.
namespace vocab {
constexpr Token kEndOfAction = 0;  // ends a think/summarize generation action
constexpr Token kAnswer = 1;       // submit sentinel: ends action and trajectory
constexpr Token kBeginCall = 2;
constexpr Token kEndCall = 3;
constexpr Token kFirstContent = 4;

inline Token tool_name_token(std::size_t tool_index) {
  return kFirstContent + static_cast<Token>(tool_index);
}
inline std::size_t content_range(Token V) { return V - kFirstContent; }
}  // namespace vocab

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Matrix&) const = default;
};

// Named flat parameter matrices; the unit of checkpointing and merging.
// "W" (F x V) is required: row f holds the logits for feature bucket f.
struct PolicyParams {
  std::map<std::string, Matrix> matrices;
  std::uint32_t feature_buckets = 64;  // F
  std::uint32_t vocab_size = 128;      // V
  std::uint32_t context_window = 4;    // h

  static PolicyParams zeros(std::uint32_t F, std::uint32_t V, std::uint32_t h = 4);

  const Matrix& weights() const { return matrices.at("W"); }
  Matrix& weights() { return matrices.at("W"); }
  void validate() const;  // shapes match metadata, all entries finite
  bool operator==(const PolicyParams&) const = default;
};

struct SamplingConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  std::uint64_t seed = 0;
};

// The training distribution is always the full temperature-1 softmax; the
// inference side may truncate and reshape it.
inline SamplingConfig training_config() { return {1.0, 1.0, 0}; }

// ---------------------------------------------------------------------------
// Distributions and scoring

// Feature bucket of a history: FNV-1a over the last min(h,|history|) token
// ids (4 little-endian bytes each), mod F. Empty history maps to bucket 0.
std::uint32_t feature_bucket(std::span<const Token> history, std::uint32_t h, std::uint32_t F);

// Dense sparse-indicator form of the bucket (length F, one 1.0 entry).
std::vector<double> context_features(std::span<const Token> history, std::uint32_t h, std::uint32_t F);

// softmax(W^T phi / temperature), with nucleus truncation when top_p < 1
// (smallest probability-sorted prefix with cumulative mass >= top_p kept and
// renormalized; ties broken by token id ascending).
std::vector<double> token_distribution(const PolicyParams& params,
                                       std::span<const Token> history,
                                       const SamplingConfig& config);

// Sum of log P(token_i | history . tokens_<i)); -inf if any token falls
// outside the truncated distribution.
double sequence_logprob(const PolicyParams& params, std::span<const Token> history,
                        std::span<const Token> tokens, const SamplingConfig& config);

// Entropy in nats of the untruncated training distribution.
double entropy(const PolicyParams& params, std::span<const Token> history);

// Analytic d/dW of sequence_logprob under the training distribution:
// sum_i (onehot(token_i) - softmax_i) outer phi_i.
Matrix grad_log_prob(const PolicyParams& params, std::span<const Token> history,
                     std::span<const Token> tokens);

// ---------------------------------------------------------------------------
// Sampling

class DecodeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepSample {
  std::variant<GenerationAction, ToolCall> action;
  std::vector<Token> tokens;              // serialized action token stream
  std::vector<double> logprobs;           // inference log-prob of each token
  std::vector<std::vector<double>> topk;  // per-token top-k next-token probs, may be empty
};

// Autoregressively samples one action. A kBeginCall emission switches to
// constrained decoding over the registry schema (name, then each declared
// argument, then a forced kEndCall); constrained positions renormalize the
// temperature softmax over the allowed token set. topk_k > 0 records the k
// largest next-token probabilities at every emitted position.
StepSample sample_step(const PolicyParams& params, std::span<const Token> history,
                       const SamplingConfig& config, const ToolRegistry& registry,
                       std::mt19937_64& rng, std::size_t max_tokens,
                       std::size_t topk_k = 0);

// Convenience overload seeding a fresh RNG from config.seed.
StepSample sample_step(const PolicyParams& params, std::span<const Token> history,
                       const SamplingConfig& config, const ToolRegistry& registry,
                       std::size_t max_tokens, std::size_t topk_k = 0);

// ---------------------------------------------------------------------------
// Token <-> value codecs

// Value carried by a single content token for a declared parameter type.
Json decode_arg_value(Token t, ParamType type, Token V);

// Inverse of decode_arg_value when the value is representable; otherwise a
// stable hash into the content range (used only for scoring fixed calls).
Token encode_arg_value(const Json& v, ParamType type, Token V);

std::vector<Token> encode_tool_call(const ToolCall& call, const ToolRegistry& registry, Token V);

// Deterministic hashing tokenizer for observation payloads (teacher-forced
// environment feedback); one token per whitespace word, capped.
std::vector<Token> tokenize_text(const std::string& text, Token V, std::size_t max_tokens = 8);

// ---------------------------------------------------------------------------
// Checkpoints
//
// File layout: magic "AFPK", version u16, then per matrix: name length u16,
// UTF-8 name, rows u32, cols u32, row-major IEEE-754 binary64 values. All
// integers little-endian. Round-trips bitwise.

void save_checkpoint(const PolicyParams& params, const std::string& path);
PolicyParams load_checkpoint(const std::string& path, std::uint32_t context_window = 4);

// An "SFT-style" initialization: every feature bucket shares a logit bias
// toward the structural sentinels so rollouts produce parseable calls from
// step one; what to call and with which arguments is left for RL to learn.
PolicyParams make_structured_init(std::uint32_t F, std::uint32_t V, std::uint32_t h,
                                  double begin_call_logit = 2.0, double answer_logit = 1.0,
                                  double end_of_action_logit = 0.5);

}  // namespace arl
