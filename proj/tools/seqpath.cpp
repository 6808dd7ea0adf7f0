// Command-line front end: map statistics, order generation, closed-loop
// simulation, training and evaluation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "seqpath/evaluate.hpp"
#include "seqpath/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace seqpath;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool json_out = false;
  std::string out_dir;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
}

TaskMode parse_task(const std::string& s) {
  if (s == "lifelong") return TaskMode::Lifelong;
  if (s == "one_shot") return TaskMode::OneShot;
  throw Error(ErrorCode::BadConfig, "task must be lifelong or one_shot");
}

RewardMode parse_reward(const std::string& s) {
  if (s == "global") return RewardMode::Global;
  if (s == "individual") return RewardMode::Individual;
  if (s == "partial") return RewardMode::Partial;
  throw Error(ErrorCode::BadConfig, "reward mode must be global, individual or partial");
}

json metrics_json(const MapMetrics& m, const std::string& name) {
  return {{"map", name},          {"rho_o", m.rho_o},
          {"rho_t", m.rho_t},     {"rho_e", m.rho_e},
          {"v_e", m.v_e},         {"l_corr", m.l_corr},
          {"alpha_pfci", m.alpha_pfci}, {"nodes", m.node_count},
          {"edges", m.edge_count}, {"corridors", m.corridor_count}};
}

// Writes one step of observations as raw float64 planes.
void dump_observations(const fs::path& dir, int t, std::span<const ObservationTensor> obs) {
  std::ostringstream name;
  name << "obs_t" << std::setw(6) << std::setfill('0') << t << ".bin";
  std::ofstream out(dir / name.str(), std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write observation dump in " + dir.string());
  for (const auto& o : obs) {
    out.write(reinterpret_cast<const char*>(o.data.data()), static_cast<std::streamsize>(sizeof(double) * o.data.size()));
  }
}

struct SimArgs {
  std::string map_path, orders_path, policy = "random", task = "lifelong", reward = "individual", dump_obs;
  int agents = 1, steps = 100, fov = kDefaultFov;
  double mix_alpha = 0.5;
};

int run_simulation(const SimArgs& args, const Globals& g, bool force_expert) {
  auto map = std::make_shared<const GridMap>(load_map_file(args.map_path));
  const std::vector<Order> orders = load_orders_file(args.orders_path);
  EvalConfig cfg;
  cfg.n_agents = args.agents;
  cfg.steps = args.steps;
  cfg.env.task = parse_task(args.task);
  cfg.env.reward.mode = parse_reward(args.reward);
  cfg.env.reward.mix_alpha = args.mix_alpha;
  auto policy = make_policy(force_expert ? "expert" : args.policy, g.seed);

  std::ostream* sink = &std::cout;
  std::ofstream file;
  if (!g.out_dir.empty()) {
    fs::create_directories(g.out_dir);
    file.open(fs::path(g.out_dir) / "trace.jsonl", std::ios::trunc);
    if (!file) throw Error(ErrorCode::Io, "cannot write trace in " + g.out_dir);
    sink = &file;
  }

  std::function<void(const json&)> on_event = [&](const json& ev) { *sink << ev.dump() << '\n'; };
  if (!args.dump_obs.empty()) {
    check_fov(args.fov);
    fs::create_directories(args.dump_obs);
    // Observations are dumped for the state each action was chosen from, so
    // the episode is replayed through a wrapper that sees the state first.
    struct Dumping : JointPolicy {
      JointPolicy* inner;
      fs::path dir;
      int fov;
      CorridorIndex corridors;
      int steps = 0;
      std::string name() const override { return inner->name(); }
      void reset(const SimState& s) override {
        corridors = find_corridors(*s.map);
        inner->reset(s);
      }
      std::vector<int> act(const SimState& s) override {
        dump_observations(dir, s.t, build_observations(s, fov, predicted_paths(s), corridors));
        ++steps;
        return inner->act(s);
      }
      std::unique_ptr<JointPolicy> clone(std::uint64_t) const override { return nullptr; }
    } dumping;
    dumping.inner = policy.get();
    dumping.dir = args.dump_obs;
    dumping.fov = args.fov;
    const EpisodeReport rep = run_episode(map, orders, dumping, cfg, g.seed, on_event);
    json names = json::array();
    for (const char* n : channel_names()) names.push_back(n);
    const json sidecar = {{"layout_version", kObsLayoutVersion},
                          {"dtype", "float64"},
                          {"byte_order", "little"},
                          {"shape", {args.agents, kObsChannels, args.fov, args.fov}},
                          {"axes", {"agent", "channel", "row", "col"}},
                          {"channels", names},
                          {"files", "obs_t{t:06d}.bin"},
                          {"steps", dumping.steps}};
    write_file(fs::path(args.dump_obs) / "observations.json", sidecar.dump(2) + "\n");
    *sink << json{{"summary", {{"steps", rep.steps}, {"goals", rep.goals}, {"throughput", rep.throughput},
                               {"orders_completed", rep.orders_completed}, {"collisions", rep.collisions}}}}.dump()
          << '\n';
    return 0;
  }
  const EpisodeReport rep = run_episode(map, orders, *policy, cfg, g.seed, on_event);
  json summary = {{"steps", rep.steps},       {"goals", rep.goals},
                  {"throughput", rep.throughput}, {"orders_completed", rep.orders_completed},
                  {"collisions", rep.collisions}, {"policy", policy->name()}};
  if (rep.one_shot) {
    summary["success_rate"] = rep.success_rate;
    summary["soc"] = rep.soc;
  }
  *sink << json{{"summary", summary}}.dump() << '\n';
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorCode::BadConfig, "bad seed '" + item + "'");
    }
  }
  if (seeds.empty()) throw Error(ErrorCode::BadConfig, "no seeds given");
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Warehouse pickup-and-delivery toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_flag("--json", g.json_out, "Machine-readable output");
  app.add_option("--out", g.out_dir, "Output directory");

  // map-stats
  std::string stats_map;
  double alpha = kDefaultPfciAlpha;
  auto* stats = app.add_subcommand("map-stats", "Print PFCI and density metrics of a map");
  stats->add_option("map", stats_map)->required();
  stats->add_option("--alpha", alpha, "PFCI coefficient");

  // gen-orders
  std::string orders_map;
  int n_orders = 100;
  auto* gen = app.add_subcommand("gen-orders", "Write a random order file");
  gen->add_option("map", orders_map)->required();
  gen->add_option("--n", n_orders, "Number of orders")->check(CLI::PositiveNumber);

  // simulate / plan
  SimArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Run one closed-loop episode and print JSON-lines events");
  auto* plan = app.add_subcommand("plan", "Run the expert closed-loop and print JSON-lines events");
  for (auto* cmd : {simulate, plan}) {
    cmd->add_option("map", sim.map_path)->required();
    cmd->add_option("orders", sim.orders_path)->required();
    cmd->add_option("--agents", sim.agents)->check(CLI::PositiveNumber);
    cmd->add_option("--steps", sim.steps)->check(CLI::PositiveNumber);
    cmd->add_option("--task", sim.task, "lifelong | one_shot");
    cmd->add_option("--reward", sim.reward, "global | individual | partial");
    cmd->add_option("--mix-alpha", sim.mix_alpha);
  }
  simulate->add_option("--policy", sim.policy, "random | expert | checkpoint:<path>");
  simulate->add_option("--dump-obs", sim.dump_obs, "Directory for per-step observation planes");
  simulate->add_option("--fov", sim.fov, "Field of view for --dump-obs");

  // train
  std::string train_map, train_orders, config_path;
  int train_agents = 2, iters = 10;
  auto* train_cmd = app.add_subcommand("train", "Train the sequential policy");
  train_cmd->add_option("map", train_map)->required();
  train_cmd->add_option("orders", train_orders)->required();
  train_cmd->add_option("--agents", train_agents)->check(CLI::PositiveNumber);
  train_cmd->add_option("--iters", iters)->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--config", config_path, "key = value training config");

  // evaluate
  std::string eval_map, eval_orders, eval_policy = "random", eval_task = "lifelong", seeds_text = "0,1,2,3,4";
  int eval_agents = 1, eval_steps = 100;
  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a policy over several seeds");
  eval_cmd->add_option("map", eval_map)->required();
  eval_cmd->add_option("orders", eval_orders)->required();
  eval_cmd->add_option("--policy", eval_policy, "random | expert | checkpoint:<path>");
  eval_cmd->add_option("--agents", eval_agents)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--steps", eval_steps)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seeds", seeds_text, "Comma-separated seeds");
  eval_cmd->add_option("--task", eval_task, "lifelong | one_shot");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*stats) {
      const GridMap map = load_map_file(stats_map);
      const json j = metrics_json(compute_pfci(map, alpha), map.name());
      std::cout << j.dump(g.json_out ? -1 : 2) << '\n';
      if (!g.out_dir.empty()) write_file(fs::path(g.out_dir) / "map_stats.json", j.dump(2) + "\n");
    } else if (*gen) {
      const GridMap map = load_map_file(orders_map);
      const std::string csv = orders_to_csv(generate_orders(map, n_orders, g.seed));
      if (g.out_dir.empty()) std::cout << csv;
      else write_file(fs::path(g.out_dir) / "orders.csv", csv);
    } else if (*simulate) {
      return run_simulation(sim, g, false);
    } else if (*plan) {
      return run_simulation(sim, g, true);
    } else if (*train_cmd) {
      TrainConfig cfg;
      PolicyConfig policy;
      if (!config_path.empty()) parse_train_config(read_file(config_path), cfg, policy);
      if (app.get_option("--seed")->count() > 0) cfg.seed = g.seed;
      cfg.out_dir = g.out_dir.empty() ? "runs/train" : g.out_dir;
      TrainSetup setup{std::make_shared<const GridMap>(load_map_file(train_map)), load_orders_file(train_orders),
                       train_agents};
      const TrainResult result = train(setup, cfg, policy, iters,
                                       [&](int it, const ParamSet&, json& m) {
                                         if (!g.json_out) {
                                           std::cerr << "iter " << it << " throughput " << m["throughput"]
                                                     << " bc " << m["loss_bc"] << '\n';
                                         }
                                       });
      const json done = {{"iterations", iters},
                         {"out_dir", cfg.out_dir},
                         {"checkpoint", (fs::path(cfg.out_dir) / "final.ckpt").string()},
                         {"last", result.metrics.empty() ? json() : result.metrics.back()}};
      std::cout << done.dump(g.json_out ? -1 : 2) << '\n';
    } else if (*eval_cmd) {
      auto map = std::make_shared<const GridMap>(load_map_file(eval_map));
      const std::vector<Order> orders = load_orders_file(eval_orders);
      EvalConfig cfg;
      cfg.n_agents = eval_agents;
      cfg.steps = eval_steps;
      cfg.seeds = parse_seeds(seeds_text);
      cfg.env.task = parse_task(eval_task);
      auto policy = make_policy(eval_policy, g.seed);
      const EvalReport report = evaluate(map, orders, *policy, cfg);
      const json j = to_json(report);
      if (!g.out_dir.empty()) {
        write_file(fs::path(g.out_dir) / "results.json", j.dump(2) + "\n");
        write_file(fs::path(g.out_dir) / "summary.csv", summary_csv(report));
      }
      if (g.json_out) {
        std::cout << j.dump() << '\n';
      } else {
        std::cout << summary_csv(report);
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::Divergence ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
