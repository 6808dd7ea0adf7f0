#include "seqpath/evaluate.hpp"

#include <chrono>
#include <cmath>
#include <future>
#include <numeric>
#include <sstream>

namespace seqpath {

std::vector<int> RandomPolicy::act(const SimState& state) {
  std::uniform_int_distribution<int> pick(0, kNumActions - 1);
  std::vector<int> a(state.agents.size());
  for (int& x : a) x = pick(rng_);
  return a;
}

std::unique_ptr<JointPolicy> RandomPolicy::clone(std::uint64_t seed) const {
  return std::make_unique<RandomPolicy>(seed);
}

std::unique_ptr<JointPolicy> ExpertPolicy::clone(std::uint64_t) const {
  return std::make_unique<ExpertPolicy>(cfg_);
}

NetworkPolicy::NetworkPolicy(std::shared_ptr<const ParamSet> params, PolicyConfig cfg, DecodeMode mode,
                             std::uint64_t seed, std::string label)
    : params_(std::move(params)), cfg_(cfg), mode_(mode), rng_(seed), label_(std::move(label)) {
  cfg_.validate();
}

void NetworkPolicy::reset(const SimState& state) {
  hidden_ = HiddenState::zeros(state.n_agents(), cfg_.d);
  if (corridor_map_ != state.map.get()) {
    corridors_ = find_corridors(*state.map);
    corridor_map_ = state.map.get();
  }
}

JointSample NetworkPolicy::infer(std::span<const ObservationTensor> obs) {
  if (hidden_.h.size() == 0 || hidden_.n_agents() != static_cast<int>(obs.size())) {
    hidden_ = HiddenState::zeros(static_cast<int>(obs.size()), cfg_.d);
  }
  JointSample s = sample_joint(*params_, cfg_, obs, hidden_, mode_, rng_);
  hidden_ = s.hidden;
  return s;
}

std::vector<int> NetworkPolicy::act(const SimState& state) {
  if (corridor_map_ != state.map.get() || hidden_.h.size() == 0 || hidden_.n_agents() != state.n_agents()) {
    reset(state);
  }
  const auto obs = build_observations(state, cfg_.fov, predicted_paths(state), corridors_);
  return infer(obs).actions;
}

std::unique_ptr<JointPolicy> NetworkPolicy::clone(std::uint64_t seed) const {
  return std::make_unique<NetworkPolicy>(params_, cfg_, mode_, seed, label_);
}

std::unique_ptr<JointPolicy> make_policy(const std::string& ref, std::uint64_t seed) {
  if (ref == "random") return std::make_unique<RandomPolicy>(seed);
  if (ref == "expert") return std::make_unique<ExpertPolicy>();
  const std::string prefix = "checkpoint:";
  if (ref.rfind(prefix, 0) == 0 && ref.size() > prefix.size()) {
    const std::string path = ref.substr(prefix.size());
    nlohmann::json meta;
    auto params = std::make_shared<ParamSet>(load_checkpoint(path, &meta));
    const PolicyConfig cfg = policy_config_from_json(meta.value("policy", nlohmann::json::object()));
    // Fail now rather than on the first step if the file does not fit the config.
    const ParamSet expected = init_params(cfg, 0);
    for (size_t i = 0; i < expected.size(); ++i) {
      if (!params->contains(expected.name(i)) || params->at(expected.name(i)).shape != expected[i].shape) {
        throw Error(ErrorCode::BadCheckpoint, path + ": parameter " + expected.name(i) + " missing or misshapen");
      }
    }
    return std::make_unique<NetworkPolicy>(std::move(params), cfg, DecodeMode::Sample, seed, ref);
  }
  throw Error(ErrorCode::BadPolicyRef, "unknown policy '" + ref + "' (random | expert | checkpoint:<path>)");
}

// ---------------------------------------------------------------------------

Stat summarize(std::span<const double> xs) {
  Stat s;
  if (xs.empty()) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / (xs.size() - 1));
  }
  return s;
}

nlohmann::json step_event(const SimState& after, const StepOutcome& outcome) {
  nlohmann::json agents = nlohmann::json::array();
  for (const AgentState& a : after.agents) {
    agents.push_back({{"id", a.id},
                      {"pos", {a.pos.row, a.pos.col}},
                      {"goal", {a.goal.row, a.goal.col}},
                      {"state", to_string(a.work_state)},
                      {"motion", to_string(outcome.motion[a.id])},
                      {"reach", to_string(outcome.reach[a.id])}});
  }
  return {{"t", after.t},
          {"actions", outcome.actions},
          {"rewards", outcome.rewards},
          {"agents", std::move(agents)},
          {"done_goals", outcome.done_goals},
          {"done_orders", outcome.done_orders},
          {"collisions", outcome.collisions}};
}

EpisodeReport run_episode(std::shared_ptr<const GridMap> map, std::span<const Order> orders, JointPolicy& policy,
                          const EvalConfig& cfg, std::uint64_t seed,
                          const std::function<void(const nlohmann::json&)>& on_event) {
  if (cfg.steps < 1) throw Error(ErrorCode::BadConfig, "steps must be >= 1");
  SimState state = reset(std::move(map), cfg.n_agents, orders, seed, cfg.env);
  policy.reset(state);
  EpisodeReport rep;
  rep.seed = seed;
  rep.one_shot = cfg.env.task == TaskMode::OneShot;

  std::vector<int> arrival(state.agents.size(), -1);
  auto note_arrivals = [&] {
    for (const AgentState& a : state.agents) {
      if (a.finished && arrival[a.id] < 0) arrival[a.id] = state.t;
    }
  };
  note_arrivals();
  const long long goals_at_start = state.goals_completed;

  double runtime = 0.0;
  for (int k = 0; k < cfg.steps; ++k) {
    if (rep.one_shot && std::all_of(arrival.begin(), arrival.end(), [](int a) { return a >= 0; })) break;
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<int> joint = policy.act(state);
    runtime += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const StepOutcome out = step_in_place(state, joint);
    rep.collisions += out.collisions;
    ++rep.steps;
    note_arrivals();
    if (on_event || cfg.record_trace) {
      nlohmann::json ev = step_event(state, out);
      if (on_event) on_event(ev);
      if (cfg.record_trace) rep.trace.push_back(std::move(ev));
    }
  }
  // Goals already satisfied at reset are not earned by the policy.
  rep.goals = state.goals_completed - goals_at_start;
  rep.orders_completed = state.orders_completed;
  rep.throughput = rep.steps > 0 ? static_cast<double>(rep.goals) / rep.steps : 0.0;
  rep.mean_step_runtime = rep.steps > 0 ? runtime / rep.steps : 0.0;
  if (rep.one_shot) {
    int arrived = 0;
    for (int a : arrival) {
      arrived += a >= 0;
      rep.soc += a >= 0 ? a : cfg.steps;
    }
    rep.success_rate = arrived == static_cast<int>(arrival.size()) ? 1.0 : 0.0;
  }
  return rep;
}

EvalReport evaluate(std::shared_ptr<const GridMap> map, std::span<const Order> orders, const JointPolicy& policy,
                    const EvalConfig& cfg) {
  if (cfg.seeds.empty()) throw Error(ErrorCode::BadConfig, "at least one seed is required");
  EvalReport report;
  report.policy = policy.name();
  report.map_name = map->name();
  report.config = cfg;

  std::vector<std::future<EpisodeReport>> jobs;
  for (std::uint64_t seed : cfg.seeds) {
    jobs.push_back(std::async(std::launch::async, [&, seed] {
      auto worker = policy.clone(seed);
      return run_episode(map, orders, *worker, cfg, seed);
    }));
  }
  for (auto& j : jobs) report.episodes.push_back(j.get());

  auto collect = [&](auto field) {
    std::vector<double> xs;
    for (const auto& e : report.episodes) xs.push_back(static_cast<double>(field(e)));
    return summarize(xs);
  };
  report.aggregate["throughput"] = collect([](const EpisodeReport& e) { return e.throughput; });
  report.aggregate["goals"] = collect([](const EpisodeReport& e) { return e.goals; });
  report.aggregate["orders_completed"] = collect([](const EpisodeReport& e) { return e.orders_completed; });
  report.aggregate["collisions"] = collect([](const EpisodeReport& e) { return e.collisions; });
  report.aggregate["mean_step_runtime"] = collect([](const EpisodeReport& e) { return e.mean_step_runtime; });
  if (cfg.env.task == TaskMode::OneShot) {
    report.aggregate["success_rate"] = collect([](const EpisodeReport& e) { return e.success_rate; });
    report.aggregate["soc"] = collect([](const EpisodeReport& e) { return e.soc; });
  }
  return report;
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : report.episodes) {
    nlohmann::json j = {{"seed", e.seed},
                        {"steps", e.steps},
                        {"goals", e.goals},
                        {"orders_completed", e.orders_completed},
                        {"throughput", e.throughput},
                        {"collisions", e.collisions},
                        {"mean_step_runtime", e.mean_step_runtime}};
    if (e.one_shot) {
      j["success_rate"] = e.success_rate;
      j["soc"] = e.soc;
    }
    eps.push_back(std::move(j));
  }
  nlohmann::json agg = nlohmann::json::object();
  for (const auto& [k, s] : report.aggregate) agg[k] = {{"mean", s.mean}, {"stddev", s.stddev}};
  return {{"schema_version", kResultsSchemaVersion},
          {"policy", report.policy},
          {"map", report.map_name},
          {"config",
           {{"agents", report.config.n_agents},
            {"steps", report.config.steps},
            {"seeds", report.config.seeds},
            {"task", report.config.env.task == TaskMode::OneShot ? "one_shot" : "lifelong"}}},
          {"episodes", std::move(eps)},
          {"aggregate", std::move(agg)}};
}

std::string summary_csv(const EvalReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << "policy,map,metric,mean,stddev\n";
  for (const auto& [k, s] : report.aggregate) {
    out << report.policy << ',' << report.map_name << ',' << k << ',' << s.mean << ',' << s.stddev << '\n';
  }
  return out.str();
}

double measure_runtime(JointPolicy& policy, const SimState& state, int repeats) {
  if (repeats < 1) throw Error(ErrorCode::BadConfig, "repeats must be >= 1");
  policy.reset(state);
  (void)policy.act(state);
  double total = 0.0;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)policy.act(state);
    total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return total / repeats;
}

}  // namespace seqpath
