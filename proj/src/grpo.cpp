#include "arl/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace arl {

std::vector<double> compute_advantages(const std::vector<double>& rewards, double std_guard) {
  if (rewards.size() < 2) throw std::invalid_argument("group_too_small: need G >= 2");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(rewards.size());  // population variance
  double sd = std::sqrt(var);
  std::vector<double> adv(rewards.size(), 0.0);
  if (sd < std_guard) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

double tis_weight(const TokenRecord& rec, double cap) {
  return std::min(std::exp(rec.logp_train_old - rec.logp_infer_old), cap);
}

double clipped_term(const TokenRecord& rec, double eps_low, double eps_high) {
  double r = std::exp(rec.logp_train_current - rec.logp_train_old);
  double clipped = std::clamp(r, 1.0 - eps_low, 1.0 + eps_high);
  return std::min(r * rec.advantage, clipped * rec.advantage);
}

void fill_advantages(GrpoGroup& group, const GrpoConfig& cfg) {
  group.advantages = compute_advantages(group.rewards, cfg.std_guard);
  for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
    for (auto& rec : group.trajectories[i].records) rec.advantage = group.advantages[i];
  }
}

namespace {

// Number of loss-bearing tokens of one group (unmasked tokens of unmasked
// trajectories); 0 means the group carries no signal this update.
std::size_t unmasked_token_count(const GrpoGroup& g) {
  std::size_t n = 0;
  for (const auto& t : g.trajectories) {
    if (t.masked) continue;
    for (const auto& rec : t.records) {
      if (!rec.masked) ++n;
    }
  }
  return n;
}

}  // namespace

double objective(const std::vector<GrpoGroup>& groups, const GrpoConfig& cfg) {
  double total = 0.0;
  std::size_t active_groups = 0;
  bool any_unmasked_traj = false;
  for (const auto& g : groups) {
    for (const auto& t : g.trajectories) any_unmasked_traj |= !t.masked;
    std::size_t n = unmasked_token_count(g);
    if (n == 0) continue;
    ++active_groups;
    double acc = 0.0;
    for (const auto& t : g.trajectories) {
      if (t.masked) continue;
      for (const auto& rec : t.records) {
        if (rec.masked) continue;
        acc += tis_weight(rec, cfg.tis_cap) * clipped_term(rec, cfg.eps_low, cfg.eps_high);
      }
    }
    total += acc / static_cast<double>(n);
  }
  if (!any_unmasked_traj) throw std::runtime_error("empty_update: all trajectories masked");
  if (cfg.mean_over_groups && active_groups > 0) total /= static_cast<double>(active_groups);
  return total;
}

void refresh_current_logprobs(std::vector<GrpoGroup>& groups, const PolicyParams& params) {
  SamplingConfig train = training_config();
  for (auto& g : groups) {
    for (auto& t : g.trajectories) {
      std::vector<Token> ctx = t.prompt;
      for (std::size_t i = 0; i < t.tokens.size(); ++i) {
        std::vector<double> p = token_distribution(params, ctx, train);
        t.records[i].logp_train_current = std::log(p[t.tokens[i]]);
        ctx.push_back(t.tokens[i]);
      }
    }
  }
}

Matrix gradient(const std::vector<GrpoGroup>& groups, const GrpoConfig& cfg,
                const PolicyParams& params) {
  Matrix grad(params.feature_buckets, params.vocab_size);
  SamplingConfig train = training_config();
  std::size_t active_groups = 0;
  std::vector<double> group_scale(groups.size(), 0.0);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    std::size_t n = unmasked_token_count(groups[gi]);
    if (n == 0) continue;
    ++active_groups;
    group_scale[gi] = 1.0 / static_cast<double>(n);
  }
  if (active_groups == 0) throw std::runtime_error("empty_update: all trajectories masked");
  double combine = cfg.mean_over_groups ? 1.0 / static_cast<double>(active_groups) : 1.0;

  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (group_scale[gi] == 0.0) continue;
    for (const auto& t : groups[gi].trajectories) {
      if (t.masked) continue;
      std::vector<Token> ctx = t.prompt;
      for (std::size_t i = 0; i < t.tokens.size(); ++i) {
        const TokenRecord& rec = t.records[i];
        Token tok = t.tokens[i];
        if (!rec.masked) {
          std::uint32_t bucket = feature_bucket(ctx, params.context_window, params.feature_buckets);
          std::vector<double> p = token_distribution(params, ctx, train);
          double logp_current = std::log(p[tok]);
          double r = std::exp(logp_current - rec.logp_train_old);
          double clipped = std::clamp(r, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
          double unclipped_val = r * rec.advantage;
          double clipped_val = clipped * rec.advantage;
          // When the clip constant binds, the token is locally constant.
          if (unclipped_val <= clipped_val) {
            double coeff =
                combine * group_scale[gi] * tis_weight(rec, cfg.tis_cap) * r * rec.advantage;
            for (std::size_t v = 0; v < p.size(); ++v) grad.at(bucket, v) -= coeff * p[v];
            grad.at(bucket, tok) += coeff;
          }
        }
        ctx.push_back(tok);
      }
    }
  }
  return grad;
}

PolicyParams apply_update(const PolicyParams& params, const Matrix& grad, double learning_rate) {
  PolicyParams out = params;
  Matrix& W = out.weights();
  if (!W.same_shape(grad)) throw std::invalid_argument("shape_mismatch in apply_update");
  for (std::size_t i = 0; i < W.data.size(); ++i) W.data[i] += learning_rate * grad.data[i];
  return out;
}

double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double x : m.data) s += x * x;
  return std::sqrt(s);
}

}  // namespace arl
