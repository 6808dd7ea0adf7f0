#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqpath/policy.hpp"

namespace seqpath {

struct TrainConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_eps = 0.2;
  double lr = 3e-4;
  double bc_weight = 0.5;
  /// Optimizer steps between target-value network syncs.
  int target_update = 10;

  int n_envs = 4;
  /// Steps collected per env per iteration.
  int rollout_steps = 32;
  /// Env steps before an episode is cut and the env reset.
  int episode_length = 64;
  /// Agent-samples per RL / IL minibatch.
  int rl_batch = 1024;
  int il_batch = 512;
  /// Capacity of the expert buffer in joint states (FIFO).
  int il_buffer = 4096;
  int ppo_epochs = 2;
  int il_updates = 2;

  bool use_rl = true;
  bool use_il = true;
  bool normalize_advantages = true;
  /// Global gradient-norm cap, 0 disables.
  double grad_clip = 1.0;
  /// Draw a fresh decision order for every episode.
  bool shuffle_order = false;

  std::uint64_t seed = 0;
  int checkpoint_every = 0;
  std::string out_dir;

  EnvConfig env;

  void validate() const;
};

/// Flat `key = value` text with `#` comments. Keys cover TrainConfig, the
/// reward settings and `policy.*` for the network shape.
void parse_train_config(std::string_view text, TrainConfig& cfg, PolicyConfig& policy);
nlohmann::json to_json(const TrainConfig& cfg);

/// One joint decision of one env.
struct StepRecord {
  std::vector<ObservationTensor> obs;
  HiddenState hidden;  // carries fed into this step
  std::vector<int> actions;
  std::vector<int> order;
  std::vector<double> logprob;
  std::vector<double> values;
  std::vector<double> rewards;  // mode-applied, per agent
  bool done = false;            // episode ended after this step
};

/// Observation after the last collected step of an env, for bootstrapping.
struct RolloutTail {
  bool valid = false;
  std::vector<ObservationTensor> obs;
  HiddenState hidden;
};

struct TrajectoryBatch {
  int n_envs = 0;
  int steps = 0;
  int n_agents = 0;
  std::vector<StepRecord> records;  // env-major: e * steps + t
  std::vector<RolloutTail> tails;

  const StepRecord& at(int env, int t) const { return records[env * steps + t]; }
};

struct ExpertSample {
  std::vector<ObservationTensor> obs;
  HiddenState hidden;
  std::vector<int> actions;
  std::vector<int> order;
};

/// GAE over one env's sequence. `bootstrap` is V_T after the last step and is
/// ignored when the last step ends an episode.
std::vector<double> compute_gae(std::span<const double> rewards, std::span<const double> values,
                                std::span<const char> dones, double bootstrap, double gamma,
                                double lambda);

/// mean_{g,i} (rewards + gamma * next_values * (1 - done) - values)^2 with
/// values [G, n]; rewards, next_values [G * n]; done [G].
ad::Var encoder_loss(ad::Var values, std::span<const double> rewards,
                     std::span<const double> next_values, std::span<const char> done, double gamma);

/// -mean(min(r * A, clip(r, 1 - eps, 1 + eps) * A)) with r = exp(logprob - old).
ad::Var decoder_loss(ad::Var logprob, std::span<const double> old_logprob,
                     std::span<const double> advantages, double clip_eps);

/// -mean log softmax(logits)[expert].
ad::Var bc_loss(ad::Var logits, std::span<const int> expert_actions);

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet& params, const std::vector<ad::Array>& grads);
  long long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<Eigen::VectorXd> m_, v_;
};

struct UpdateStats {
  double loss_encoder = 0.0;
  double loss_decoder = 0.0;
  double loss_bc = 0.0;
  double agreement = 0.0;
  double grad_norm = 0.0;
};

/// Owns the trainable parameters, the frozen target copy and the optimizer.
class Learner {
 public:
  Learner(PolicyConfig policy, TrainConfig cfg, ParamSet params);

  const ParamSet& params() const { return params_; }
  const ParamSet& target() const { return target_; }
  const PolicyConfig& policy() const { return policy_; }
  long long updates() const { return updates_; }

  /// PPO epochs over the batch: encoder + decoder losses.
  UpdateStats rl_update(const TrajectoryBatch& batch, std::mt19937_64& rng);
  /// One behavioural-cloning step on the given joint states.
  UpdateStats bc_update(std::span<const ExpertSample* const> samples);
  /// Fraction of agents whose argmax action matches the expert label.
  double agreement(std::span<const ExpertSample* const> samples) const;

  void sync_target();

 private:
  double apply(ad::Tape& tape, ad::Var loss, const BoundParams& bound);
  std::vector<double> target_next_values(const TrajectoryBatch& batch) const;

  PolicyConfig policy_;
  TrainConfig cfg_;
  ParamSet params_;
  ParamSet target_;
  Adam adam_;
  long long updates_ = 0;
};

struct TrainSetup {
  std::shared_ptr<const GridMap> map;
  std::vector<Order> orders;
  int n_agents = 1;
};

struct TrainResult {
  ParamSet params;
  std::vector<nlohmann::json> metrics;
};

using IterationHook = std::function<void(int iteration, const ParamSet& params, nlohmann::json& metrics)>;

/// The collect / RL update / expert label / BC update loop. Writes
/// metrics.jsonl and checkpoints under cfg.out_dir when it is set. A
/// non-finite loss saves `diverged.ckpt` and throws Divergence.
TrainResult train(const TrainSetup& setup, const TrainConfig& cfg, const PolicyConfig& policy,
                  int iterations, const IterationHook& hook = {}, const ParamSet* init = nullptr);

}  // namespace seqpath
