#include "arl/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <queue>
#include <thread>

namespace arl {

std::uint64_t derive_seed(std::uint64_t base, const std::string& tag, std::uint64_t a,
                          std::uint64_t b) {
  std::string buf = tag;
  for (std::uint64_t v : {base, a, b}) {
    for (int shift = 0; shift < 64; shift += 8) buf.push_back(static_cast<char>((v >> shift) & 0xff));
  }
  return fnv1a64({reinterpret_cast<const std::uint8_t*>(buf.data()), buf.size()});
}

std::string task_family(const TaskFixture& f) { return f.kind == "workspace" ? "swe" : "tool"; }

const std::string& next_task(const std::vector<std::string>& cycle, std::size_t step_index) {
  if (cycle.empty()) throw std::invalid_argument("empty task cycle");
  return cycle[step_index % cycle.size()];
}

std::vector<Token> unit_context(const PromptUnit& unit, const PolicyParams& params) {
  const TaskFixture& f = *unit.fixture;
  std::vector<Token> ctx = f.prompt_tokens;
  for (const auto& msg : f.user_messages) {
    auto toks = tokenize_text(msg, params.vocab_size);
    ctx.insert(ctx.end(), toks.begin(), toks.end());
  }
  if (unit.turn_level) {
    for (std::size_t i = 0; i < unit.gt_index && i < f.ground_truth_calls.size(); ++i) {
      auto toks = encode_tool_call(f.ground_truth_calls[i], f.registry, params.vocab_size);
      ctx.insert(ctx.end(), toks.begin(), toks.end());
    }
  }
  return ctx;
}

// ---------------------------------------------------------------------------
// Rollout

namespace {

// Teacher-forced log-probs of forced tokens under the untruncated
// inference-temperature distribution (nucleus truncation could assign a
// forced environment token probability zero).
void teacher_force(const PolicyParams& params, std::vector<Token>& ctx,
                   const std::vector<Token>& forced, const SamplingConfig& sampling,
                   std::vector<double>* logps, std::vector<std::vector<double>>* topk,
                   std::size_t topk_k) {
  SamplingConfig full = sampling;
  full.top_p = 1.0;
  for (Token t : forced) {
    std::vector<double> p = token_distribution(params, ctx, full);
    logps->push_back(std::log(p[t]));
    if (topk_k > 0) {
      std::vector<double> sorted(p);
      std::sort(sorted.begin(), sorted.end(), std::greater<>());
      sorted.resize(std::min(topk_k, sorted.size()));
      topk->push_back(std::move(sorted));
    }
    ctx.push_back(t);
  }
}

}  // namespace

SampleEnvelope rollout_one(const PolicyParams& params, const PromptUnit& unit,
                           const SamplingConfig& sampling, const RolloutLimits& limits,
                           std::uint64_t traj_seed, std::size_t topk_record) {
  const TaskFixture& fixture = *unit.fixture;
  const ToolRegistry& registry = fixture.registry;
  Sandbox sandbox(unit.id, fixture);
  std::mt19937_64 rng(traj_seed);
  auto wall_start = std::chrono::steady_clock::now();

  SampleEnvelope env;
  env.prompt_id = unit.id;
  Trajectory& traj = env.trajectory;
  traj.prompt_id = unit.id;

  std::vector<Token> ctx = unit_context(unit, params);
  GrpoTrajectory& gt = env.tokens;
  gt.prompt = ctx;

  std::size_t topk_k = std::min<std::size_t>(topk_record, params.vocab_size);
  std::uint64_t request_id = 0;
  std::optional<RewardPayload> payload;
  traj.termination = Termination::max_steps;

  auto push_tokens = [&](const std::vector<Token>& toks, const std::vector<double>& infer_logps,
                         bool env_feedback) {
    for (std::size_t i = 0; i < toks.size(); ++i) {
      TokenRecord rec;
      rec.logp_infer_old = infer_logps[i];
      rec.masked = env_feedback;
      gt.tokens.push_back(toks[i]);
      gt.records.push_back(rec);
    }
  };

  std::size_t step_count = 0;
  while (true) {
    if (step_count >= limits.max_steps) {
      traj.termination = Termination::max_steps;
      break;
    }
    if (ctx.size() >= limits.max_context_tokens) {
      traj.termination = Termination::max_context;
      break;
    }
    double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    if (elapsed > limits.timeout_s) {
      traj.termination = Termination::timeout;
      break;
    }

    StepSample ss;
    try {
      ss = sample_step(params, ctx, sampling, registry, rng, limits.per_step_token_cap, topk_k);
    } catch (const DecodeFailure&) {
      traj.termination = Termination::max_steps;
      break;
    }
    ++step_count;
    ctx.insert(ctx.end(), ss.tokens.begin(), ss.tokens.end());
    push_tokens(ss.tokens, ss.logprobs, false);
    for (auto& row : ss.topk) env.topk.push_back(std::move(row));

    Step step;
    step.action = ss.action;
    step.token_logprobs = ss.logprobs;
    step.role_mask.assign(ss.tokens.size(), TokenRole::agent_response);

    if (const auto* call = std::get_if<ToolCall>(&ss.action)) {
      bool final = call->tool_name == "submit";
      SandboxRequest req{request_id++, unit.id, call->tool_name, call->args, final};
      SandboxResponse resp = sandbox.call(req);
      Observation obs{call->tool_name, resp.status, resp.output, resp.error_kind};
      std::vector<Token> obs_tokens = tokenize_text(resp.output, params.vocab_size);
      std::vector<double> obs_logps;
      std::vector<std::vector<double>> obs_topk;
      teacher_force(params, ctx, obs_tokens, sampling, &obs_logps,
                    topk_k > 0 ? &obs_topk : nullptr, topk_k);
      push_tokens(obs_tokens, obs_logps, true);
      for (auto& row : obs_topk) env.topk.push_back(std::move(row));
      step.token_logprobs.insert(step.token_logprobs.end(), obs_logps.begin(), obs_logps.end());
      step.role_mask.insert(step.role_mask.end(), obs_tokens.size(), TokenRole::environment_feedback);
      step.observation = std::move(obs);
      traj.steps.push_back(std::move(step));
      if (final || unit.turn_level) {
        if (final) payload = resp.reward_payload;
        traj.termination = Termination::completed;
        break;
      }
    } else {
      const auto& gen = std::get<GenerationAction>(ss.action);
      bool is_answer = gen.role_tag == RoleTag::answer;
      traj.steps.push_back(std::move(step));
      if (is_answer) {
        // The answer sentinel is the submit action: fetch the reward payload.
        SandboxRequest req{request_id++, unit.id, "submit", Json::object(), true};
        SandboxResponse resp = sandbox.call(req);
        payload = resp.reward_payload;
        traj.termination = Termination::completed;
        break;
      }
      if (unit.turn_level) {
        traj.termination = Termination::completed;
        break;
      }
    }
  }

  traj.total_tokens = 0;
  for (const auto& s : traj.steps) traj.total_tokens += s.token_count();

  if (unit.turn_level) {
    env.reward = traj.steps.empty()
                     ? 0.0
                     : turn_reward(traj.steps.back(), fixture.ground_truth_calls[unit.gt_index],
                                   registry);
  } else {
    bool verdict = payload.has_value() && payload->task_completed;
    env.reward = outcome_reward(traj, verdict, registry);
  }

  gt.masked = traj.termination != Termination::completed;
  // logp_train_old: teacher-forced walk under the full temperature-1 softmax
  // of the snapshot that generated this trajectory.
  {
    std::vector<Token> walk = gt.prompt;
    SamplingConfig train = training_config();
    for (std::size_t i = 0; i < gt.tokens.size(); ++i) {
      std::vector<double> p = token_distribution(params, walk, train);
      gt.records[i].logp_train_old = std::log(p[gt.tokens[i]]);
      gt.records[i].logp_train_current = gt.records[i].logp_train_old;
      walk.push_back(gt.tokens[i]);
    }
  }
  return env;
}

// ---------------------------------------------------------------------------
// Snapshot store

SnapshotStore::SnapshotStore(PolicyParams initial)
    : current_(std::make_shared<const PolicyParams>(std::move(initial))) {}

std::uint64_t SnapshotStore::publish(PolicyParams params) {
  auto next = std::make_shared<const PolicyParams>(std::move(params));
  std::lock_guard<std::mutex> lock(mu_);
  current_ = std::move(next);
  return ++version_;
}

std::shared_ptr<const PolicyParams> SnapshotStore::read(std::uint64_t* version) const {
  std::lock_guard<std::mutex> lock(mu_);
  if (version != nullptr) *version = version_;
  return current_;
}

std::uint64_t SnapshotStore::version() const {
  std::lock_guard<std::mutex> lock(mu_);
  return version_;
}

// ---------------------------------------------------------------------------
// Group assembly

AssembledGroup assemble_group(std::string group_id, std::vector<SampleEnvelope> envs,
                              const GrpoConfig& cfg) {
  AssembledGroup g;
  g.group_id = std::move(group_id);
  g.grpo.prompt_id = envs.empty() ? g.group_id : envs.front().prompt_id;
  for (auto& e : envs) {
    g.ready_time = std::max(g.ready_time, e.enqueue_timestamp);
    g.grpo.trajectories.push_back(e.tokens);
    double reward = e.reward;
    if (e.tokens.masked && !cfg.masked_in_stats) reward = 0.0;  // excluded below
    g.grpo.rewards.push_back(reward);
  }
  if (!cfg.masked_in_stats) {
    // Masked trajectories leave the statistics: compute advantages over the
    // unmasked subset and give masked ones zero advantage.
    std::vector<double> sub;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < g.grpo.trajectories.size(); ++i) {
      if (!g.grpo.trajectories[i].masked) {
        sub.push_back(g.grpo.rewards[i]);
        idx.push_back(i);
      }
    }
    g.grpo.advantages.assign(g.grpo.rewards.size(), 0.0);
    if (sub.size() >= 2) {
      auto adv = compute_advantages(sub, cfg.std_guard);
      for (std::size_t k = 0; k < idx.size(); ++k) g.grpo.advantages[idx[k]] = adv[k];
    }
    for (std::size_t i = 0; i < g.grpo.trajectories.size(); ++i) {
      for (auto& rec : g.grpo.trajectories[i].records) rec.advantage = g.grpo.advantages[i];
    }
  } else {
    fill_advantages(g.grpo, cfg);
  }
  g.degenerate = std::all_of(g.grpo.advantages.begin(), g.grpo.advantages.end(),
                             [](double a) { return a == 0.0; });
  bool any_unmasked = std::any_of(g.grpo.trajectories.begin(), g.grpo.trajectories.end(),
                                  [](const GrpoTrajectory& t) { return !t.masked; });
  if (!any_unmasked) g.degenerate = true;
  g.envelopes = std::move(envs);
  return g;
}

// ---------------------------------------------------------------------------
// Shared scheduling helpers

namespace {

std::map<std::string, std::vector<PromptUnit>> expand_units(const std::vector<TaskFixture>& tasks) {
  std::map<std::string, std::vector<PromptUnit>> by_family;
  for (const auto& f : tasks) {
    std::string fam = task_family(f);
    if (f.reward == "turn_level") {
      for (std::size_t k = 0; k < f.ground_truth_calls.size(); ++k) {
        by_family[fam].push_back({&f, f.task_id + "#t" + std::to_string(k), true, k});
      }
    } else {
      by_family[fam].push_back({&f, f.task_id, false, 0});
    }
  }
  if (by_family.empty()) throw std::invalid_argument("no task fixtures");
  return by_family;
}

struct GroupSpec {
  PromptUnit unit;
  std::string group_id;
  std::size_t step = 0;
};

// Draws the j-th prompt group of an update step, cycling the family's units.
class GroupScheduler {
 public:
  GroupScheduler(const std::vector<TaskFixture>& tasks, std::vector<std::string> cycle)
      : units_(expand_units(tasks)), cycle_(std::move(cycle)) {
    for (const auto& fam : cycle_) {
      if (units_.find(fam) == units_.end()) {
        throw std::invalid_argument("task cycle names family with no fixtures: " + fam);
      }
    }
  }

  GroupSpec draw(std::size_t step) {
    const std::string& fam = next_task(cycle_, step);
    auto& vec = units_.at(fam);
    const PromptUnit& u = vec[counter_[fam]++ % vec.size()];
    GroupSpec spec;
    spec.unit = u;
    spec.group_id = u.id + "@" + std::to_string(step) + "." + std::to_string(per_step_[step]++);
    spec.step = step;
    return spec;
  }

 private:
  std::map<std::string, std::vector<PromptUnit>> units_;
  std::vector<std::string> cycle_;
  std::map<std::string, std::size_t> counter_;
  std::map<std::size_t, std::size_t> per_step_;
};

RolloutLimits limits_of(const OrchestratorConfig& cfg) {
  return {cfg.max_steps_per_traj, cfg.max_context_tokens, cfg.per_step_token_cap,
          cfg.per_traj_timeout_s};
}

std::size_t groups_per_step(const OrchestratorConfig& cfg) {
  return static_cast<std::size_t>(
      std::ceil(cfg.oversample_factor * static_cast<double>(cfg.grpo.update_prompts)));
}

struct UpdateStats {
  double objective = 0.0;
  double grad_norm = 0.0;
  double mean_reward = 0.0;
  double mean_entropy = 0.0;
  double masked_fraction = 0.0;
};

// One gradient-ascent update on the chosen groups; returns the new params.
PolicyParams train_update(const PolicyParams& params, std::vector<AssembledGroup>& chosen,
                          const std::vector<AssembledGroup>& all_cycle_groups,
                          const GrpoConfig& cfg, UpdateStats* stats) {
  double reward_sum = 0.0, entropy_sum = 0.0;
  std::size_t reward_n = 0, masked_n = 0, traj_n = 0;
  for (const auto& g : all_cycle_groups) {
    for (const auto& e : g.envelopes) {
      reward_sum += e.reward;
      ++reward_n;
    }
    for (const auto& t : g.grpo.trajectories) {
      ++traj_n;
      if (t.masked) ++masked_n;
    }
  }
  stats->mean_reward = reward_n > 0 ? reward_sum / static_cast<double>(reward_n) : 0.0;
  stats->masked_fraction = traj_n > 0 ? static_cast<double>(masked_n) / static_cast<double>(traj_n) : 0.0;

  if (chosen.empty()) return params;  // nothing trainable this step

  std::vector<GrpoGroup> groups;
  for (auto& g : chosen) groups.push_back(g.grpo);
  for (const auto& g : groups) {
    entropy_sum += entropy(params, g.trajectories.front().prompt);
  }
  stats->mean_entropy = entropy_sum / static_cast<double>(groups.size());

  refresh_current_logprobs(groups, params);
  stats->objective = objective(groups, cfg);
  Matrix grad = gradient(groups, cfg, params);
  stats->grad_norm = frobenius_norm(grad);
  return apply_update(params, grad, cfg.learning_rate);
}

}  // namespace

bool has_rollout_train_overlap(const std::vector<IntervalEvent>& events) {
  for (const auto& a : events) {
    if (a.kind != IntervalEvent::Kind::train) continue;
    for (const auto& b : events) {
      if (b.kind != IntervalEvent::Kind::rollout) continue;
      if (b.start < a.end && a.start < b.end) return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Sequential colocated engine (real execution, wall-clock timing)

namespace {

TrainingResult run_colocated_sequential(const OrchestratorConfig& cfg,
                                        const std::vector<TaskFixture>& tasks,
                                        const PolicyParams& initial,
                                        const UpdateObserver& observer) {
  TrainingResult result;
  PolicyParams params = initial;
  GroupScheduler sched(tasks, cfg.task_cycle);
  RolloutLimits limits = limits_of(cfg);
  std::size_t J = groups_per_step(cfg);
  auto t0 = std::chrono::steady_clock::now();
  auto now = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  for (std::size_t step = 0; step < cfg.total_updates; ++step) {
    double roll_start = now();
    std::vector<AssembledGroup> cycle_groups;
    std::vector<double> finish_times;
    for (std::size_t j = 0; j < J; ++j) {
      GroupSpec spec = sched.draw(step);
      std::vector<SampleEnvelope> envs;
      for (std::size_t i = 0; i < cfg.grpo.group_size; ++i) {
        std::uint64_t seed = derive_seed(cfg.seed, spec.group_id, i, 0);
        SampleEnvelope e = rollout_one(params, spec.unit, cfg.sampling, limits, seed, cfg.topk_record);
        e.enqueue_timestamp = now();
        e.snapshot_version = step;
        envs.push_back(std::move(e));
      }
      finish_times.push_back(now());
      cycle_groups.push_back(assemble_group(spec.group_id, std::move(envs), cfg.grpo));
    }
    double roll_end = now();
    result.events.push_back({IntervalEvent::Kind::rollout, roll_start, roll_end});

    std::vector<AssembledGroup> chosen;
    for (auto& g : cycle_groups) {
      if (!g.degenerate && chosen.size() < cfg.grpo.update_prompts) chosen.push_back(g);
    }
    UpdateStats stats;
    double train_start = now();
    params = train_update(params, chosen, cycle_groups, cfg.grpo, &stats);
    double train_end = now();
    result.events.push_back({IntervalEvent::Kind::train, train_start, train_end});

    StepBreakdown bd;
    bd.step = step;
    bd.rollout_time = roll_end - roll_start;
    bd.train_time = train_end - train_start;
    // Barrier effect: everyone waits from their own finish to the last one.
    double mean_finish = 0.0;
    for (double f : finish_times) mean_finish += f;
    mean_finish /= static_cast<double>(finish_times.size());
    bd.idle_time = roll_end - mean_finish;
    bd.throughput = (static_cast<double>(step) + 1.0) / std::max(now(), 1e-12);
    bd.objective = stats.objective;
    bd.mean_reward = stats.mean_reward;
    bd.mean_entropy = stats.mean_entropy;
    bd.masked_fraction = stats.masked_fraction;
    bd.grad_norm = stats.grad_norm;
    result.breakdown.push_back(bd);
    result.reward_curve.push_back(stats.mean_reward);
    result.entropy_curve.push_back(stats.mean_entropy);
    if (observer) observer(step, params, bd);
  }
  result.total_time = now();
  result.throughput = static_cast<double>(cfg.total_updates) / std::max(result.total_time, 1e-12);
  result.final_params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Discrete-event engine (simulated latencies, virtual clock, deterministic)
//
// Demand for update step s opens when update s-1 is published. The
// disaggregated trainer consumes the first M non-degenerate complete groups
// and lets stragglers run on; the colocated trainer waits for the whole
// batch behind a barrier and discards the surplus.

struct SimJob {
  std::size_t step;
  std::size_t group_idx;
  std::size_t traj_idx;
  GroupSpec spec;
  double avail;  // release time of the job's demand cycle
};

TrainingResult run_discrete_event(const OrchestratorConfig& cfg,
                                  const std::vector<TaskFixture>& tasks,
                                  const PolicyParams& initial, const UpdateObserver& observer) {
  const bool colocated = cfg.mode == RunMode::colocated;
  TrainingResult result;
  GroupScheduler sched(tasks, cfg.task_cycle);
  RolloutLimits limits = limits_of(cfg);
  limits.timeout_s = std::numeric_limits<double>::infinity();  // virtual time governs
  // The simulation studies scheduling with a fixed per-cycle batch: demand
  // equals the update size so both modes execute identical work per update
  // (oversampling beyond M is a rollout-filtering concern of the real
  // engines, not of the latency model).
  std::size_t J = cfg.grpo.update_prompts;
  std::size_t G = cfg.grpo.group_size;
  const LatencyModel lat = cfg.latency.value();

  std::vector<PolicyParams> history{initial};  // history[v] = params at version v
  std::vector<double> publish_times;           // publish_times[v-1] = when version v appeared
  auto version_at = [&](double t) {
    return static_cast<std::size_t>(
        std::upper_bound(publish_times.begin(), publish_times.end(), t) - publish_times.begin());
  };

  std::vector<double> worker_free(cfg.rollout_workers, 0.0);
  double trainer_free = 0.0;

  std::deque<SimJob> pending;
  std::map<std::string, std::vector<SampleEnvelope>> partial;  // group_id -> envelopes
  std::map<std::string, std::size_t> group_step;
  std::deque<AssembledGroup> delivered;  // complete groups awaiting consumption
  double release_time = 0.0;

  auto open_demand = [&](std::size_t step, std::size_t n_groups, double avail) {
    for (std::size_t j = 0; j < n_groups; ++j) {
      GroupSpec spec = sched.draw(step);
      group_step[spec.group_id] = step;
      for (std::size_t i = 0; i < G; ++i) pending.push_back({step, j, i, spec, avail});
    }
  };

  // Runs the next pending job on the earliest-free worker; delivers its
  // envelope (and possibly a completed group). Returns the delivery time.
  auto run_next_job = [&]() -> double {
    SimJob job = pending.front();
    pending.pop_front();
    std::size_t w = 0;
    for (std::size_t i = 1; i < worker_free.size(); ++i) {
      if (worker_free[i] < worker_free[w]) w = i;
    }
    double start = std::max(worker_free[w], job.avail);
    std::size_t version = version_at(start);
    std::uint64_t lat_seed = derive_seed(cfg.seed, "lat:" + job.spec.group_id, job.traj_idx, 0);
    std::mt19937_64 lat_rng(lat_seed);
    double duration = std::lognormal_distribution<double>(lat.mu, lat.sigma)(lat_rng);
    bool timed_out = duration > cfg.per_traj_timeout_s;
    if (timed_out) duration = cfg.per_traj_timeout_s;
    double finish = start + duration;
    worker_free[w] = finish;
    result.events.push_back({IntervalEvent::Kind::rollout, start, finish});

    std::uint64_t seed = derive_seed(cfg.seed, job.spec.group_id, job.traj_idx, 0);
    SampleEnvelope env =
        rollout_one(history[version], job.spec.unit, cfg.sampling, limits, seed, cfg.topk_record);
    if (timed_out) {
      env.trajectory.termination = Termination::timeout;
      env.tokens.masked = true;
      env.reward = 0.0;
    }
    env.enqueue_timestamp = finish;
    env.snapshot_version = version;
    auto& bucket = partial[job.spec.group_id];
    bucket.push_back(std::move(env));
    if (bucket.size() == G) {
      std::sort(bucket.begin(), bucket.end(),
                [](const SampleEnvelope& a, const SampleEnvelope& b) {
                  return a.enqueue_timestamp < b.enqueue_timestamp;
                });
      delivered.push_back(assemble_group(job.spec.group_id, std::move(bucket), cfg.grpo));
      partial.erase(job.spec.group_id);
    }
    return finish;
  };

  open_demand(0, J, 0.0);
  // The disaggregated generator keeps two demands in flight so workers never
  // drain: the trainer consumes whichever groups finish first and stragglers
  // spill into the next cycle (or age out past the staleness bound).
  if (!colocated && cfg.total_updates > 1) open_demand(1, J, 0.0);
  for (std::size_t step = 0; step < cfg.total_updates; ++step) {
    std::size_t current_version = step;
    std::vector<AssembledGroup> cycle_groups;  // the consumed batch, delivery order
    double last_needed_delivery = release_time;
    const std::size_t M = cfg.grpo.update_prompts;

    // Consumes fresh complete groups up to the batch size; groups generated
    // beyond the staleness bound are discarded.
    auto try_consume = [&]() {
      while (!delivered.empty() && cycle_groups.size() < M) {
        AssembledGroup g = std::move(delivered.front());
        delivered.pop_front();
        bool stale = false;
        for (const auto& e : g.envelopes) {
          if (current_version > e.snapshot_version &&
              current_version - e.snapshot_version > cfg.staleness_bound) {
            stale = true;
          }
        }
        if (stale) continue;
        last_needed_delivery = std::max(last_needed_delivery, g.ready_time);
        cycle_groups.push_back(std::move(g));
      }
    };

    if (colocated) {
      // Barrier: every job of the batch finishes before training starts.
      double batch_end = release_time;
      while (!pending.empty()) batch_end = std::max(batch_end, run_next_job());
      std::stable_sort(delivered.begin(), delivered.end(),
                       [](const AssembledGroup& a, const AssembledGroup& b) {
                         return a.ready_time < b.ready_time;
                       });
      try_consume();
      // Surplus groups are discarded with the batch.
      delivered.clear();
      partial.clear();
      last_needed_delivery = batch_end;
    } else {
      // Train as soon as the first M complete fresh groups are in.
      try_consume();
      while (cycle_groups.size() < M && !(pending.empty() && delivered.empty())) {
        if (!pending.empty()) run_next_job();
        try_consume();
      }
    }

    // Degenerate groups (uniform rewards, or nothing unmasked) carry no
    // learning signal; they are filtered from the gradient here, mirroring
    // pass-rate prompt filtering.
    std::vector<AssembledGroup> chosen;
    for (const auto& g : cycle_groups) {
      if (!g.degenerate) chosen.push_back(g);
    }

    double train_start = std::max(trainer_free, last_needed_delivery);
    UpdateStats stats;
    PolicyParams next = train_update(history.back(), chosen, cycle_groups, cfg.grpo, &stats);
    double train_end = train_start + cfg.sim_train_seconds;
    // Pipelining: the disaggregated side keeps two demands in flight, each
    // becoming available at its snapshot's publish; busy workers therefore
    // generate through training, while an idle pool waits for the fresh
    // snapshot instead of rolling out parameters the staleness bound would
    // reject. The colocated side waits for the publish (strict
    // generate-then-train alternation).
    if (!colocated && step + 2 < cfg.total_updates) open_demand(step + 2, J, train_end);
    result.events.push_back({IntervalEvent::Kind::train, train_start, train_end});
    double idle = train_start - trainer_free;
    trainer_free = train_end;
    history.push_back(std::move(next));
    publish_times.push_back(train_end);

    StepBreakdown bd;
    bd.step = step;
    bd.rollout_time = std::max(0.0, last_needed_delivery - release_time);
    bd.train_time = cfg.sim_train_seconds;
    bd.idle_time = std::max(0.0, idle);
    bd.throughput = (static_cast<double>(step) + 1.0) / train_end;
    bd.objective = stats.objective;
    bd.mean_reward = stats.mean_reward;
    bd.mean_entropy = stats.mean_entropy;
    bd.masked_fraction = stats.masked_fraction;
    bd.grad_norm = stats.grad_norm;
    result.breakdown.push_back(bd);
    result.reward_curve.push_back(stats.mean_reward);
    result.entropy_curve.push_back(stats.mean_entropy);
    if (observer) observer(step, history.back(), bd);

    release_time = train_end;
    if (colocated && step + 1 < cfg.total_updates) open_demand(step + 1, J, train_end);
  }

  result.total_time = publish_times.back();
  result.throughput = static_cast<double>(cfg.total_updates) / result.total_time;
  result.final_params = history.back();
  return result;
}

// ---------------------------------------------------------------------------
// Threaded disaggregated engine (real concurrency, wall-clock timing)

struct SharedQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<GroupSpec> jobs;  // one entry per prompt group
  bool closed = false;
};

TrainingResult run_disaggregated_threaded(const OrchestratorConfig& cfg,
                                          const std::vector<TaskFixture>& tasks,
                                          const PolicyParams& initial,
                                          const UpdateObserver& observer) {
  TrainingResult result;
  GroupScheduler sched(tasks, cfg.task_cycle);
  RolloutLimits limits = limits_of(cfg);
  std::size_t J = groups_per_step(cfg);
  SnapshotStore store(initial);
  SharedQueue queue;

  struct Delivery {
    AssembledGroup group;
    std::size_t step;
  };
  std::mutex dmu;
  std::condition_variable dcv;
  std::deque<Delivery> deliveries;
  std::map<std::size_t, std::size_t> outstanding;  // step -> groups still in flight

  std::mutex emu;
  auto t0 = std::chrono::steady_clock::now();
  auto now = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  auto worker_fn = [&]() {
    while (true) {
      GroupSpec spec;
      {
        std::unique_lock<std::mutex> lock(queue.mu);
        queue.cv.wait(lock, [&] { return queue.closed || !queue.jobs.empty(); });
        if (queue.jobs.empty()) return;
        spec = std::move(queue.jobs.front());
        queue.jobs.pop_front();
      }
      double start = now();
      std::uint64_t version = 0;
      auto snapshot = store.read(&version);
      std::vector<SampleEnvelope> envs;
      for (std::size_t i = 0; i < cfg.grpo.group_size; ++i) {
        std::uint64_t seed = derive_seed(cfg.seed, spec.group_id, i, 0);
        SampleEnvelope e =
            rollout_one(*snapshot, spec.unit, cfg.sampling, limits, seed, cfg.topk_record);
        e.enqueue_timestamp = now();
        e.snapshot_version = version;
        envs.push_back(std::move(e));
      }
      {
        std::lock_guard<std::mutex> lock(emu);
        result.events.push_back({IntervalEvent::Kind::rollout, start, now()});
      }
      Delivery d{assemble_group(spec.group_id, std::move(envs), cfg.grpo), spec.step};
      d.group.ready_time = now();
      {
        std::lock_guard<std::mutex> lock(dmu);
        deliveries.push_back(std::move(d));
      }
      dcv.notify_one();
    }
  };

  auto enqueue_step = [&](std::size_t step) {
    std::vector<GroupSpec> specs;
    for (std::size_t j = 0; j < J; ++j) specs.push_back(sched.draw(step));
    {
      std::lock_guard<std::mutex> lock(dmu);
      outstanding[step] += specs.size();
    }
    {
      std::lock_guard<std::mutex> lock(queue.mu);
      for (auto& s : specs) queue.jobs.push_back(std::move(s));
    }
    queue.cv.notify_all();
  };

  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < cfg.rollout_workers; ++i) workers.emplace_back(worker_fn);

  PolicyParams params = initial;
  enqueue_step(0);
  for (std::size_t step = 0; step < cfg.total_updates; ++step) {
    std::uint64_t current_version = store.version();
    std::vector<AssembledGroup> chosen;
    std::vector<AssembledGroup> cycle_groups;
    while (chosen.size() < cfg.grpo.update_prompts) {
      Delivery d;
      {
        std::unique_lock<std::mutex> lock(dmu);
        auto in_flight = [&] {
          std::size_t n = 0;
          for (const auto& [s, c] : outstanding) n += c;
          return n;
        };
        dcv.wait(lock, [&] { return !deliveries.empty() || in_flight() == 0; });
        if (deliveries.empty()) break;  // nothing left in flight: train on what we have
        d = std::move(deliveries.front());
        deliveries.pop_front();
        --outstanding[d.step];
      }
      bool stale = false;
      for (const auto& e : d.group.envelopes) {
        if (current_version > e.snapshot_version &&
            current_version - e.snapshot_version > cfg.staleness_bound) {
          stale = true;
        }
      }
      if (stale) continue;
      cycle_groups.push_back(d.group);
      if (!d.group.degenerate) chosen.push_back(std::move(d.group));
    }

    // Let the next step's rollouts overlap this update.
    if (step + 1 < cfg.total_updates) enqueue_step(step + 1);

    double train_start = now();
    UpdateStats stats;
    params = train_update(params, chosen, cycle_groups, cfg.grpo, &stats);
    store.publish(params);
    double train_end = now();
    {
      std::lock_guard<std::mutex> lock(emu);
      result.events.push_back({IntervalEvent::Kind::train, train_start, train_end});
    }

    StepBreakdown bd;
    bd.step = step;
    bd.rollout_time = 0.0;
    for (const auto& g : cycle_groups) bd.rollout_time = std::max(bd.rollout_time, g.ready_time);
    bd.train_time = train_end - train_start;
    bd.idle_time = 0.0;
    bd.throughput = (static_cast<double>(step) + 1.0) / std::max(now(), 1e-12);
    bd.objective = stats.objective;
    bd.mean_reward = stats.mean_reward;
    bd.mean_entropy = stats.mean_entropy;
    bd.masked_fraction = stats.masked_fraction;
    bd.grad_norm = stats.grad_norm;
    result.breakdown.push_back(bd);
    result.reward_curve.push_back(stats.mean_reward);
    result.entropy_curve.push_back(stats.mean_entropy);
    if (observer) observer(step, params, bd);
  }

  {
    std::lock_guard<std::mutex> lock(queue.mu);
    queue.closed = true;
    queue.jobs.clear();
  }
  queue.cv.notify_all();
  for (auto& w : workers) w.join();

  result.total_time = now();
  result.throughput = static_cast<double>(cfg.total_updates) / std::max(result.total_time, 1e-12);
  result.final_params = std::move(params);
  return result;
}

}  // namespace

TrainingResult run_training(const OrchestratorConfig& cfg, const std::vector<TaskFixture>& tasks,
                            const PolicyParams& initial_params, const UpdateObserver& observer) {
  if (cfg.rollout_workers < 1 || cfg.train_workers < 1) {
    throw std::invalid_argument("worker counts must be >= 1");
  }
  if (cfg.latency.has_value()) return run_discrete_event(cfg, tasks, initial_params, observer);
  if (cfg.mode == RunMode::colocated) {
    return run_colocated_sequential(cfg, tasks, initial_params, observer);
  }
  return run_disaggregated_threaded(cfg, tasks, initial_params, observer);
}

void write_metrics_csv(const std::string& path, const std::vector<StepBreakdown>& rows) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write metrics: " + path);
    out << "step,rollout_time,reward_time,train_time,idle_time,throughput,objective,"
           "mean_reward,mean_entropy,masked_fraction,grad_norm\n";
    for (const auto& r : rows) {
      out << r.step << ',' << r.rollout_time << ',' << r.reward_time << ',' << r.train_time << ','
          << r.idle_time << ',' << r.throughput << ',' << r.objective << ',' << r.mean_reward << ','
          << r.mean_entropy << ',' << r.masked_fraction << ',' << r.grad_norm << '\n';
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot rename metrics into place: " + path);
  }
}

}  // namespace arl
