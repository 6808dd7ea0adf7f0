#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqpath/expert.hpp"
#include "seqpath/policy.hpp"

namespace seqpath {

/// Anything that maps a full simulator state to a joint action.
class JointPolicy {
 public:
  virtual ~JointPolicy() = default;
  virtual std::string name() const = 0;
  /// Called at the start of every episode.
  virtual void reset(const SimState&) {}
  virtual std::vector<int> act(const SimState& state) = 0;
  /// Independent copy for another worker, reseeded with `seed`.
  virtual std::unique_ptr<JointPolicy> clone(std::uint64_t seed) const = 0;
};

class RandomPolicy : public JointPolicy {
 public:
  explicit RandomPolicy(std::uint64_t seed) : rng_(seed) {}
  std::string name() const override { return "random"; }
  std::vector<int> act(const SimState& state) override;
  std::unique_ptr<JointPolicy> clone(std::uint64_t seed) const override;

 private:
  std::mt19937_64 rng_;
};

class ExpertPolicy : public JointPolicy {
 public:
  explicit ExpertPolicy(ExpertConfig cfg = {}) : cfg_(cfg) {}
  std::string name() const override { return "expert"; }
  std::vector<int> act(const SimState& state) override { return expert_actions(state, cfg_); }
  std::unique_ptr<JointPolicy> clone(std::uint64_t) const override;

 private:
  ExpertConfig cfg_;
};

/// The learned policy: builds observations, carries LSTM state across steps
/// and samples joint actions autoregressively.
class NetworkPolicy : public JointPolicy {
 public:
  NetworkPolicy(std::shared_ptr<const ParamSet> params, PolicyConfig cfg, DecodeMode mode,
                std::uint64_t seed, std::string label = "network");
  std::string name() const override { return label_; }
  void reset(const SimState& state) override;
  std::vector<int> act(const SimState& state) override;
  std::unique_ptr<JointPolicy> clone(std::uint64_t seed) const override;

  /// Inference only, on prebuilt observations.
  JointSample infer(std::span<const ObservationTensor> obs);

 private:
  std::shared_ptr<const ParamSet> params_;
  PolicyConfig cfg_;
  DecodeMode mode_;
  std::mt19937_64 rng_;
  std::string label_;
  const GridMap* corridor_map_ = nullptr;
  CorridorIndex corridors_;
  HiddenState hidden_;
};

/// `random`, `expert` or `checkpoint:<path>`; anything else is BadPolicyRef.
std::unique_ptr<JointPolicy> make_policy(const std::string& ref, std::uint64_t seed);

struct EvalConfig {
  int n_agents = 1;
  int steps = 100;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  EnvConfig env;
  /// Keep the per-step JSON event stream in each episode report.
  bool record_trace = false;
};

struct EpisodeReport {
  std::uint64_t seed = 0;
  int steps = 0;  // timesteps executed
  long long goals = 0;
  long long orders_completed = 0;
  double throughput = 0.0;
  long long collisions = 0;
  bool one_shot = false;
  double success_rate = 0.0;
  double soc = 0.0;
  double mean_step_runtime = 0.0;
  std::vector<nlohmann::json> trace;
};

struct Stat {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for one value
};

Stat summarize(std::span<const double> xs);

struct EvalReport {
  std::string policy;
  std::string map_name;
  EvalConfig config;
  std::vector<EpisodeReport> episodes;
  std::map<std::string, Stat> aggregate;
};

inline constexpr int kResultsSchemaVersion = 1;

/// One JSON object per step: clock, actions, per-agent events, rewards.
nlohmann::json step_event(const SimState& after, const StepOutcome& outcome);

EpisodeReport run_episode(std::shared_ptr<const GridMap> map, std::span<const Order> orders,
                          JointPolicy& policy, const EvalConfig& cfg, std::uint64_t seed,
                          const std::function<void(const nlohmann::json&)>& on_event = {});

/// Episodes for every seed run concurrently on clones of `policy`.
EvalReport evaluate(std::shared_ptr<const GridMap> map, std::span<const Order> orders,
                    const JointPolicy& policy, const EvalConfig& cfg);

nlohmann::json to_json(const EvalReport& report);
std::string summary_csv(const EvalReport& report);

/// Mean wall-clock seconds per act() over `repeats` calls after one warmup.
double measure_runtime(JointPolicy& policy, const SimState& state, int repeats);

}  // namespace seqpath
