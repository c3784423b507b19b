#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arl/policy.hpp"

namespace arl {

struct GrpoConfig {
  double eps_low = 0.2;
  double eps_high = 0.28;
  double tis_cap = 2.0;  // C
  double learning_rate = 0.1;
  double std_guard = 1e-8;
  std::size_t group_size = 8;      // G
  std::size_t batch_prompts = 8;   // N
  std::size_t update_prompts = 4;  // M, must be < N
  // Whether masked trajectories still enter the group mean/std (default yes).
  bool masked_in_stats = true;
  // Combine the M group objectives by mean (default) or sum.
  bool mean_over_groups = true;
};

struct TokenRecord {
  double logp_train_old = 0.0;
  double logp_infer_old = 0.0;
  double logp_train_current = 0.0;
  bool masked = false;
  double advantage = 0.0;
};

// One trajectory flattened to a token stream: context tokens (the prompt)
// followed by the generated stream; records[i] describes tokens[i], whose
// conditioning history is prompt . tokens[0..i).
struct GrpoTrajectory {
  std::vector<Token> prompt;
  std::vector<Token> tokens;
  std::vector<TokenRecord> records;
  bool masked = false;  // truncated rollout: excluded from the loss entirely
};

struct GrpoGroup {
  std::string prompt_id;
  std::vector<GrpoTrajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

// (R_i - mean) / population std; all zeros when std < std_guard.
// Throws std::invalid_argument when the group has fewer than 2 rewards.
std::vector<double> compute_advantages(const std::vector<double>& rewards, double std_guard);

// min(exp(logp_train_old - logp_infer_old), C)
double tis_weight(const TokenRecord& rec, double cap);

// min(r * A, clip(r, 1-eps_low, 1+eps_high) * A) with
// r = exp(logp_train_current - logp_train_old).
double clipped_term(const TokenRecord& rec, double eps_low, double eps_high);

// Fills advantages from rewards and copies them onto every unmasked token.
void fill_advantages(GrpoGroup& group, const GrpoConfig& cfg);

// Token-normalized Eq-style objective: per group,
// (1 / #unmasked tokens) * sum tis * clipped over unmasked tokens of
// unmasked trajectories, then combined over groups. No KL term.
// Throws std::runtime_error("empty_update") when every trajectory is masked.
double objective(const std::vector<GrpoGroup>& groups, const GrpoConfig& cfg);

// Recomputes logp_train_current for every token from params (full
// temperature-1 softmax); logp_*_old fields are left untouched.
void refresh_current_logprobs(std::vector<GrpoGroup>& groups, const PolicyParams& params);

// Exact gradient of objective w.r.t. W. Tokens whose binding branch is the
// clip constant contribute zero; tis weights and old log-probs are constants.
Matrix gradient(const std::vector<GrpoGroup>& groups, const GrpoConfig& cfg,
                const PolicyParams& params);

// params + learning_rate * gradient (ascent). Throws on shape mismatch.
PolicyParams apply_update(const PolicyParams& params, const Matrix& grad, double learning_rate);

double frobenius_norm(const Matrix& m);

}  // namespace arl
