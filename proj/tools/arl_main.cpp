// Command-line entrypoint: rollout collection, RL training, checkpoint
// merging, candidate selection, and the rollout/train disaggregation
// benchmark, all driven by one JSON config plus flag overrides (flags win).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "arl/merge.hpp"
#include "arl/orchestrator.hpp"
#include "arl/tts.hpp"

namespace fs = std::filesystem;
using arl::Json;

namespace {

// ---------------------------------------------------------------------------
// Config file

struct RunConfig {
  std::vector<std::string> fixture_paths;
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  arl::OrchestratorConfig orchestrator;
  arl::MergeConfig merge;
  std::size_t checkpoint_interval = 50;
  // Fresh-parameter initialization when no checkpoint is given.
  std::uint32_t feature_buckets = 64;
  std::uint32_t vocab_size = 16;
  std::uint32_t context_window = 4;
  std::string init_kind = "structured";  // or "zeros"
  std::string init_checkpoint;           // overrides init_kind when set
};

template <typename T>
void read_field(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_grpo(const Json& j, arl::GrpoConfig& g) {
  read_field(j, "eps_low", g.eps_low);
  read_field(j, "eps_high", g.eps_high);
  read_field(j, "tis_cap", g.tis_cap);
  read_field(j, "learning_rate", g.learning_rate);
  read_field(j, "std_guard", g.std_guard);
  read_field(j, "group_size", g.group_size);
  read_field(j, "batch_prompts", g.batch_prompts);
  read_field(j, "update_prompts", g.update_prompts);
  read_field(j, "masked_in_stats", g.masked_in_stats);
  read_field(j, "mean_over_groups", g.mean_over_groups);
}

void parse_sampling(const Json& j, arl::SamplingConfig& s) {
  read_field(j, "temperature", s.temperature);
  read_field(j, "top_p", s.top_p);
  read_field(j, "seed", s.seed);
}

void parse_orchestrator(const Json& j, arl::OrchestratorConfig& o) {
  if (j.contains("mode")) {
    std::string mode = j.at("mode").get<std::string>();
    if (mode == "colocated") {
      o.mode = arl::RunMode::colocated;
    } else if (mode == "disaggregated") {
      o.mode = arl::RunMode::disaggregated;
    } else {
      throw std::runtime_error("unknown mode: " + mode);
    }
  }
  read_field(j, "rollout_workers", o.rollout_workers);
  read_field(j, "train_workers", o.train_workers);
  read_field(j, "oversample_factor", o.oversample_factor);
  read_field(j, "max_steps_per_traj", o.max_steps_per_traj);
  read_field(j, "max_context_tokens", o.max_context_tokens);
  read_field(j, "per_step_token_cap", o.per_step_token_cap);
  read_field(j, "per_traj_timeout_s", o.per_traj_timeout_s);
  read_field(j, "task_cycle", o.task_cycle);
  read_field(j, "staleness_bound", o.staleness_bound);
  read_field(j, "total_updates", o.total_updates);
  read_field(j, "sim_train_seconds", o.sim_train_seconds);
  read_field(j, "topk_record", o.topk_record);
  if (j.contains("latency") && !j.at("latency").is_null()) {
    arl::LatencyModel lat;
    read_field(j.at("latency"), "mu", lat.mu);
    read_field(j.at("latency"), "sigma", lat.sigma);
    o.latency = lat;
  }
  if (j.contains("grpo")) parse_grpo(j.at("grpo"), o.grpo);
  if (j.contains("sampling")) parse_sampling(j.at("sampling"), o.sampling);
}

void parse_merge_config(const Json& j, arl::MergeConfig& m) {
  read_field(j, "top_p", m.top_p);
  if (j.contains("consensus_rule")) {
    std::string r = j.at("consensus_rule").get<std::string>();
    if (r == "unanimity") {
      m.consensus_rule = arl::ConsensusRule::unanimity;
    } else if (r == "majority") {
      m.consensus_rule = arl::ConsensusRule::majority;
    } else {
      throw std::runtime_error("unknown consensus_rule: " + r);
    }
  }
  if (j.contains("scope")) {
    std::string s = j.at("scope").get<std::string>();
    if (s == "per_matrix") {
      m.scope = arl::WeightScope::per_matrix;
    } else if (s == "whole_model") {
      m.scope = arl::WeightScope::whole_model;
    } else {
      throw std::runtime_error("unknown scope: " + s);
    }
  }
}

RunConfig load_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config: " + path);
  Json j = Json::parse(in);
  read_field(j, "fixtures", cfg.fixture_paths);
  read_field(j, "output_dir", cfg.output_dir);
  read_field(j, "seed", cfg.seed);
  read_field(j, "checkpoint_interval", cfg.checkpoint_interval);
  read_field(j, "feature_buckets", cfg.feature_buckets);
  read_field(j, "vocab_size", cfg.vocab_size);
  read_field(j, "context_window", cfg.context_window);
  read_field(j, "init_kind", cfg.init_kind);
  read_field(j, "init_checkpoint", cfg.init_checkpoint);
  if (j.contains("orchestrator")) parse_orchestrator(j.at("orchestrator"), cfg.orchestrator);
  if (j.contains("merge")) parse_merge_config(j.at("merge"), cfg.merge);
  return cfg;
}

std::vector<arl::TaskFixture> load_fixtures(const RunConfig& cfg) {
  if (cfg.fixture_paths.empty()) throw std::runtime_error("fixture_error: no fixtures configured");
  std::vector<arl::TaskFixture> fixtures;
  for (const auto& p : cfg.fixture_paths) {
    if (!fs::exists(p)) throw std::runtime_error("fixture_error: missing fixture " + p);
    fixtures.push_back(arl::load_task_file(p));
  }
  return fixtures;
}

arl::PolicyParams initial_params(const RunConfig& cfg) {
  if (!cfg.init_checkpoint.empty()) {
    return arl::load_checkpoint(cfg.init_checkpoint, cfg.context_window);
  }
  if (cfg.init_kind == "zeros") {
    return arl::PolicyParams::zeros(cfg.feature_buckets, cfg.vocab_size, cfg.context_window);
  }
  return arl::make_structured_init(cfg.feature_buckets, cfg.vocab_size, cfg.context_window);
}

// Guards an output directory against concurrent commands.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::error_code ec;
    if (fs::exists(path_)) {
      throw std::runtime_error("output directory is locked by another command: " + path_.string());
    }
    std::ofstream(path_) << "locked\n";
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

std::vector<arl::PromptUnit> expand_prompt_units(const std::vector<arl::TaskFixture>& fixtures) {
  std::vector<arl::PromptUnit> units;
  for (const auto& f : fixtures) {
    if (f.reward == "turn_level") {
      for (std::size_t k = 0; k < f.ground_truth_calls.size(); ++k) {
        units.push_back({&f, f.task_id + "#t" + std::to_string(k), true, k});
      }
    } else {
      units.push_back({&f, f.task_id, false, 0});
    }
  }
  return units;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_rollout(const RunConfig& cfg, std::size_t n_prompts, std::size_t group_size) {
  auto fixtures = load_fixtures(cfg);
  DirLock lock(cfg.output_dir);
  arl::PolicyParams params = initial_params(cfg);
  arl::RolloutLimits limits{cfg.orchestrator.max_steps_per_traj, cfg.orchestrator.max_context_tokens,
                            cfg.orchestrator.per_step_token_cap, cfg.orchestrator.per_traj_timeout_s};
  std::size_t topk = std::max<std::size_t>(cfg.orchestrator.topk_record, 1);

  auto units = expand_prompt_units(fixtures);
  if (n_prompts < units.size()) units.resize(n_prompts);

  fs::path traj_path = fs::path(cfg.output_dir) / "trajectories.jsonl";
  std::ofstream traj_out(traj_path.string() + ".tmp", std::ios::trunc);
  for (const auto& unit : units) {
    arl::CandidatePool pool;
    pool.prompt_id = unit.id;
    pool.k = topk;
    std::size_t successes = 0;
    for (std::size_t i = 0; i < group_size; ++i) {
      std::uint64_t seed = arl::derive_seed(cfg.seed, unit.id, i, 0);
      arl::SampleEnvelope env =
          arl::rollout_one(params, unit, cfg.orchestrator.sampling, limits, seed, topk);
      traj_out << arl::serialize_trajectory(env.trajectory) << '\n';
      if (env.reward > 0.5) ++successes;
      arl::Candidate cand;
      cand.trajectory = env.trajectory;
      cand.canonical_outcome = arl::canonical_outcome(env.trajectory, *unit.fixture);
      cand.correct = env.reward > 0.5;
      for (std::size_t t = 0; t < env.tokens.tokens.size(); ++t) {
        cand.token_logprobs.push_back(env.tokens.records[t].logp_infer_old);
        cand.role_mask.push_back(env.tokens.records[t].masked
                                     ? arl::TokenRole::environment_feedback
                                     : arl::TokenRole::agent_response);
      }
      cand.topk_probs = env.topk;
      pool.candidates.push_back(std::move(cand));
    }
    fs::path pool_path = fs::path(cfg.output_dir) / ("pool_" + unit.id + ".jsonl");
    arl::save_pool(pool, pool_path.string());
    double rate = static_cast<double>(successes) / static_cast<double>(group_size);
    std::cout << unit.id << " pass_rate " << rate << " (" << successes << "/" << group_size
              << ")\n";
  }
  traj_out.close();
  fs::rename(traj_path.string() + ".tmp", traj_path);
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  auto fixtures = load_fixtures(cfg);
  DirLock lock(cfg.output_dir);
  arl::PolicyParams params = initial_params(cfg);
  arl::OrchestratorConfig ocfg = cfg.orchestrator;
  ocfg.seed = cfg.seed;

  fs::path dir(cfg.output_dir);
  arl::save_checkpoint(params, (dir / "checkpoint_initial.bin").string());

  std::size_t interval = cfg.checkpoint_interval;
  auto observer = [&](std::size_t step, const arl::PolicyParams& p, const arl::StepBreakdown&) {
    if (interval > 0 && (step + 1) % interval == 0) {
      arl::save_checkpoint(p, (dir / ("checkpoint_" + std::to_string(step + 1) + ".bin")).string());
    }
  };
  arl::TrainingResult result = arl::run_training(ocfg, fixtures, params, observer);
  arl::save_checkpoint(result.final_params, (dir / "checkpoint_final.bin").string());
  arl::write_metrics_csv((dir / "metrics.csv").string(), result.breakdown);

  auto window_mean = [&](bool tail) {
    std::size_t n = std::min<std::size_t>(10, result.reward_curve.size());
    if (n == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s += tail ? result.reward_curve[result.reward_curve.size() - 1 - i] : result.reward_curve[i];
    }
    return s / static_cast<double>(n);
  };
  std::cout << "updates " << result.breakdown.size() << "\n"
            << "throughput " << result.throughput << " updates/s\n"
            << "mean_reward_first10 " << window_mean(false) << "\n"
            << "mean_reward_last10 " << window_mean(true) << "\n";
  return 0;
}

int cmd_merge(const RunConfig& cfg, const std::string& base_path,
              const std::vector<std::string>& model_paths, const std::string& out_path) {
  arl::PolicyParams base = arl::load_checkpoint(base_path, cfg.context_window);
  std::vector<arl::PolicyParams> models;
  for (const auto& p : model_paths) models.push_back(arl::load_checkpoint(p, cfg.context_window));
  arl::PolicyParams fused = arl::sce_merge(base, models, cfg.merge);
  arl::save_checkpoint(fused, out_path);
  std::cout << "wrote " << out_path << " (K=" << models.size() << ")\n";
  return 0;
}

int cmd_select(const std::string& pool_path, const std::string& strategy, const std::string& role,
               std::size_t k, bool invert, const std::string& judge_host, int judge_port) {
  arl::CandidatePool pool = arl::load_pool(pool_path);
  arl::RoleFilter filter = arl::RoleFilter::all;
  if (role == "agent_response") filter = arl::RoleFilter::agent_response;
  else if (role == "environment_feedback") filter = arl::RoleFilter::environment_feedback;
  else if (role != "all") throw std::runtime_error("unknown role filter: " + role);

  std::size_t kk = std::min(k == 0 ? pool.k : k, std::size_t{1} << 20);
  std::size_t selected;
  if (strategy == "majority") {
    selected = arl::majority_vote(pool);
  } else if (strategy == "logprob") {
    selected = arl::select_by_avg_logprob(pool, filter);
  } else if (strategy == "confidence") {
    selected = arl::select_by_confidence(pool, kk, filter, invert);
  } else if (strategy == "knockout") {
    arl::Judge judge = judge_port > 0
                           ? arl::remote_judge({judge_host, judge_port}, pool.prompt_id)
                           : arl::Judge(arl::oracle_judge);
    selected = arl::knockout_select(pool, judge, 2);
  } else {
    throw std::runtime_error("strategy_unknown: " + strategy);
  }

  std::cout << "selected " << selected << "\n";
  for (std::size_t i = 0; i < pool.candidates.size(); ++i) {
    const auto& c = pool.candidates[i];
    std::cout << i << " avg_logprob " << arl::avg_logprob(c, arl::RoleFilter::all);
    if (!c.topk_probs.empty()) {
      std::size_t row_k = std::min(kk, c.topk_probs.front().size());
      std::cout << " confidence " << arl::trace_confidence(c, row_k, arl::RoleFilter::all);
    }
    std::cout << " outcome " << c.canonical_outcome.substr(0, 48) << "\n";
  }
  return 0;
}

int cmd_bench(const RunConfig& cfg, double mu, double sigma) {
  auto fixtures = load_fixtures(cfg);
  DirLock lock(cfg.output_dir);
  arl::PolicyParams params = initial_params(cfg);
  arl::OrchestratorConfig ocfg = cfg.orchestrator;
  ocfg.seed = cfg.seed;
  ocfg.latency = arl::LatencyModel{mu, sigma};

  ocfg.mode = arl::RunMode::colocated;
  arl::TrainingResult coloc = arl::run_training(ocfg, fixtures, params);
  ocfg.mode = arl::RunMode::disaggregated;
  arl::TrainingResult disagg = arl::run_training(ocfg, fixtures, params);

  fs::path dir(cfg.output_dir);
  arl::write_metrics_csv((dir / "bench_colocated.csv").string(), coloc.breakdown);
  arl::write_metrics_csv((dir / "bench_disaggregated.csv").string(), disagg.breakdown);

  double ratio = disagg.throughput / coloc.throughput;
  std::cout << "colocated_throughput " << coloc.throughput << " updates/s\n"
            << "disaggregated_throughput " << disagg.throughput << " updates/s\n"
            << "ratio " << ratio << "\n"
            << "overlap " << (arl::has_rollout_train_overlap(disagg.events) ? "yes" : "no")
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"agentic RL harness: rollouts, GRPO training, merging, selection"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed_flag;
  std::optional<std::string> mode_flag;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed_flag, "override config seed");
  app.add_option("--mode", mode_flag, "colocated|disaggregated")
      ->check(CLI::IsMember({"colocated", "disaggregated"}));

  auto* rollout = app.add_subcommand("rollout", "collect trajectories and candidate pools");
  std::size_t n_prompts = 1, group_size = 4;
  rollout->add_option("--prompts", n_prompts, "number of prompt units");
  rollout->add_option("--group-size", group_size, "rollouts per prompt");

  auto* train = app.add_subcommand("train", "run RL training");

  auto* merge = app.add_subcommand("merge", "fuse checkpoints");
  std::string base_path, out_path = "fused.bin";
  std::vector<std::string> model_paths;
  merge->add_option("--base", base_path, "base checkpoint")->required();
  merge->add_option("--models", model_paths, "fine-tuned checkpoints")->required();
  merge->add_option("--out", out_path, "output checkpoint path");

  auto* select = app.add_subcommand("select", "pick a candidate from a pool file");
  std::string pool_path, strategy = "majority", role = "all", judge_host = "127.0.0.1";
  std::size_t conf_k = 0;
  bool invert = false;
  int judge_port = 0;
  select->add_option("--pool", pool_path, "candidate pool JSONL")->required();
  select->add_option("--strategy", strategy, "majority|logprob|confidence|knockout")
      ->check(CLI::IsMember({"majority", "logprob", "confidence", "knockout"}));
  select->add_option("--role", role, "agent_response|environment_feedback|all");
  select->add_option("--k", conf_k, "top-token count for confidence");
  select->add_flag("--invert", invert, "select the lowest trace confidence");
  select->add_option("--judge-host", judge_host, "remote judge host");
  select->add_option("--judge-port", judge_port, "remote judge port (0 = oracle judge)");

  auto* bench = app.add_subcommand("bench", "compare colocated vs disaggregated throughput");
  double mu = 0.0, sigma = 1.0;
  bench->add_option("--mu", mu, "lognormal latency mu");
  bench->add_option("--sigma", sigma, "lognormal latency sigma");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg = load_config(config_path);
    if (seed_flag) cfg.seed = *seed_flag;
    if (mode_flag) {
      cfg.orchestrator.mode =
          *mode_flag == "colocated" ? arl::RunMode::colocated : arl::RunMode::disaggregated;
    }
    if (rollout->parsed()) return cmd_rollout(cfg, n_prompts, group_size);
    if (train->parsed()) return cmd_train(cfg);
    if (merge->parsed()) return cmd_merge(cfg, base_path, model_paths, out_path);
    if (select->parsed()) {
      return cmd_select(pool_path, strategy, role, conf_k, invert, judge_host, judge_port);
    }
    if (bench->parsed()) return cmd_bench(cfg, mu, sigma);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
