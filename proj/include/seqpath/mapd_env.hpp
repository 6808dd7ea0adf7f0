#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "seqpath/grid_map.hpp"

namespace seqpath {

/// Numeric values double as the observation encoding (0 means "no agent").
enum class WorkState : int { Picking = 1, Dropping = 2, Idle = 3 };

const char* to_string(WorkState s);

struct Order {
  int release_time = 0;
  Cell pickup;
  Cell drop;
  /// Owning agent, or -1 for round-robin assignment.
  int agent = -1;
};

struct AgentState {
  int id = 0;
  Cell pos;
  Cell goal;
  WorkState work_state = WorkState::Idle;
  /// Index of the current (or next pending) order in this agent's queue.
  int order_idx = 0;
  /// One-shot only: the agent reached its goal and no longer moves.
  bool finished = false;
};

enum class TaskMode { Lifelong, OneShot };
enum class RewardMode { Global, Individual, Partial };
enum class Scenario { TwoStage, DropOnly };

struct RewardConfig {
  RewardMode mode = RewardMode::Individual;
  double mix_alpha = 0.5;
  Scenario scenario = Scenario::TwoStage;
  double step_penalty = -0.3;
  double collision_penalty = -2.0;

  double pickup_bonus() const { return scenario == Scenario::TwoStage ? 5.0 : 0.0; }
  double drop_bonus() const { return scenario == Scenario::TwoStage ? 5.0 : 10.0; }
};

struct EnvConfig {
  TaskMode task = TaskMode::Lifelong;
  RewardConfig reward;
  /// Restart an agent's order queue from the beginning once exhausted.
  bool recycle_orders = true;
};

struct SimState {
  std::shared_ptr<const GridMap> map;
  std::vector<AgentState> agents;
  int t = 0;
  std::vector<std::vector<Order>> orders;
  /// Pickup-reaches plus drop-reaches (one-shot: goal reaches).
  long long goals_completed = 0;
  long long orders_completed = 0;
  std::uint64_t rng_seed = 0;
  EnvConfig config;

  int n_agents() const { return static_cast<int>(agents.size()); }
};

enum class Motion { Moved, Stayed, Collided };
enum class Reach { None, ReachedPickup, ReachedDrop };

const char* to_string(Motion m);
const char* to_string(Reach r);

struct StepOutcome {
  /// Mode-applied rewards.
  std::vector<double> rewards;
  /// Individual rewards before the reward mode is applied.
  std::vector<double> raw_rewards;
  std::vector<Motion> motion;
  std::vector<Reach> reach;
  /// Actions actually interpreted (finished one-shot agents are forced to NOOP).
  std::vector<int> actions;
  int done_goals = 0;
  int done_orders = 0;
  int collisions = 0;
};

/// Splits a flat order list into per-agent queues; agent == -1 entries are
/// dealt round-robin in file order.
std::vector<std::vector<Order>> assign_orders(std::span<const Order> orders, int n_agents);

SimState reset(std::shared_ptr<const GridMap> map, int n_agents, std::span<const Order> orders,
               std::uint64_t seed, const EnvConfig& config = {});

/// Same as reset() but with explicit start cells.
SimState reset_at(std::shared_ptr<const GridMap> map, std::span<const Cell> starts,
                  std::span<const Order> orders, std::uint64_t seed, const EnvConfig& config = {});

StepOutcome step_in_place(SimState& state, std::span<const int> joint_action);
std::pair<SimState, StepOutcome> step(const SimState& state, std::span<const int> joint_action);

std::vector<double> apply_reward_mode(std::span<const double> raw, const RewardConfig& cfg);

/// Uniform random orders over free cells, all released at t = 0.
std::vector<Order> generate_orders(const GridMap& map, int count, std::uint64_t seed);

/// CSV with header `release_time,pickup_x,pickup_y,drop_x,drop_y,agent`
/// where x is the column and y the row.
std::vector<Order> parse_orders_csv(std::string_view text);
std::vector<Order> load_orders_file(const std::string& path);
std::string orders_to_csv(std::span<const Order> orders);

}  // namespace seqpath
