#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "arl/grpo.hpp"
#include "arl/rewards.hpp"
#include "arl/sandbox.hpp"

namespace arl {

struct LatencyModel {
  double mu = 0.0;
  double sigma = 1.0;
};

enum class RunMode { disaggregated, colocated };

struct OrchestratorConfig {
  RunMode mode = RunMode::colocated;
  std::size_t rollout_workers = 4;  // N_r
  std::size_t train_workers = 1;    // N_l
  GrpoConfig grpo;
  SamplingConfig sampling;
  double oversample_factor = 1.5;
  std::size_t max_steps_per_traj = 6;
  std::size_t max_context_tokens = 256;
  std::size_t per_step_token_cap = 16;
  double per_traj_timeout_s = 30.0;
  std::vector<std::string> task_cycle = {"tool", "tool", "tool", "swe"};
  std::optional<LatencyModel> latency;  // simulation-only runs
  std::size_t staleness_bound = 1;
  std::uint64_t seed = 0;
  std::size_t total_updates = 100;
  double sim_train_seconds = 1.0;  // virtual trainer service time per update
  std::size_t topk_record = 0;
};

struct StepBreakdown {
  std::size_t step = 0;
  double rollout_time = 0.0;
  double reward_time = 0.0;
  double train_time = 0.0;
  double idle_time = 0.0;
  double throughput = 0.0;  // updates per second so far
  double objective = 0.0;
  double mean_reward = 0.0;
  double mean_entropy = 0.0;
  double masked_fraction = 0.0;
  double grad_norm = 0.0;
};

struct SampleEnvelope {
  std::string prompt_id;
  Trajectory trajectory;
  double reward = 0.0;
  double enqueue_timestamp = 0.0;
  std::uint64_t snapshot_version = 0;
  GrpoTrajectory tokens;
  std::vector<std::vector<double>> topk;  // aligned with tokens.tokens
};

// One schedulable prompt: either a whole-trajectory task or one step-wise
// item (generate the gt_index-th assistant turn given the preceding calls).
struct PromptUnit {
  const TaskFixture* fixture = nullptr;
  std::string id;
  bool turn_level = false;
  std::size_t gt_index = 0;
};

struct RolloutLimits {
  std::size_t max_steps = 6;
  std::size_t max_context_tokens = 256;
  std::size_t per_step_token_cap = 16;
  double timeout_s = 30.0;
};

// Task family used by the step schedule: retail fixtures train tool use,
// workspaces train SWE-style editing.
std::string task_family(const TaskFixture& f);

// cycle[step mod |cycle|]
const std::string& next_task(const std::vector<std::string>& cycle, std::size_t step_index);

// Initial context of a prompt unit under a given vocabulary.
std::vector<Token> unit_context(const PromptUnit& unit, const PolicyParams& params);

// Runs the ReAct loop against a fresh sandbox for the unit's fixture. The
// reward is attached before the envelope is returned; the final sandbox
// interaction carries final=true and yields the reward payload.
SampleEnvelope rollout_one(const PolicyParams& params, const PromptUnit& unit,
                           const SamplingConfig& sampling, const RolloutLimits& limits,
                           std::uint64_t traj_seed, std::size_t topk_record = 0);

// ---------------------------------------------------------------------------
// Snapshot publication: single-writer atomic swap, readable by any worker.

class SnapshotStore {
 public:
  explicit SnapshotStore(PolicyParams initial);

  std::uint64_t publish(PolicyParams params);  // returns the new version tag
  std::shared_ptr<const PolicyParams> read(std::uint64_t* version = nullptr) const;
  std::uint64_t version() const;

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const PolicyParams> current_;
  std::uint64_t version_ = 0;
};

// ---------------------------------------------------------------------------
// Group assembly

struct AssembledGroup {
  std::string group_id;
  std::vector<SampleEnvelope> envelopes;
  GrpoGroup grpo;       // advantages filled
  bool degenerate = false;  // zero advantage vector: dropped from the update
  double ready_time = 0.0;
};

// Builds a GrpoGroup from G envelopes of one prompt: masks truncated
// trajectories, fills advantages, flags degenerate groups.
AssembledGroup assemble_group(std::string group_id, std::vector<SampleEnvelope> envs,
                              const GrpoConfig& cfg);

// ---------------------------------------------------------------------------
// Training runs

struct IntervalEvent {
  enum class Kind { rollout, train };
  Kind kind;
  double start = 0.0;
  double end = 0.0;
};

struct TrainingResult {
  PolicyParams final_params;
  std::vector<StepBreakdown> breakdown;
  std::vector<double> reward_curve;   // mean consumed reward per update
  std::vector<double> entropy_curve;
  std::vector<IntervalEvent> events;  // rollout/train intervals (virtual or wall time)
  double total_time = 0.0;
  double throughput = 0.0;  // updates per (virtual or wall) second
};

using UpdateObserver =
    std::function<void(std::size_t step, const PolicyParams& params, const StepBreakdown&)>;

// Disaggregated mode overlaps training with ongoing rollouts (threaded when
// no latency model is set, discrete-event otherwise); colocated mode runs a
// strict generate-then-train alternation with a batch-level barrier. Both
// are reproducible under a fixed seed when latencies are simulated.
TrainingResult run_training(const OrchestratorConfig& cfg, const std::vector<TaskFixture>& tasks,
                            const PolicyParams& initial_params,
                            const UpdateObserver& observer = nullptr);

bool has_rollout_train_overlap(const std::vector<IntervalEvent>& events);

void write_metrics_csv(const std::string& path, const std::vector<StepBreakdown>& rows);

// Counter-style seed derivation: identical inputs give identical streams
// regardless of thread scheduling.
std::uint64_t derive_seed(std::uint64_t base, const std::string& tag, std::uint64_t a,
                          std::uint64_t b);

}  // namespace arl
