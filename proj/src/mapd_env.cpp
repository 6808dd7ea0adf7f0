#include "seqpath/mapd_env.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

namespace seqpath {

const char* to_string(WorkState s) {
  switch (s) {
    case WorkState::Picking: return "Picking";
    case WorkState::Dropping: return "Dropping";
    case WorkState::Idle: return "Idle";
  }
  return "?";
}

const char* to_string(Motion m) {
  switch (m) {
    case Motion::Moved: return "Moved";
    case Motion::Stayed: return "Stayed";
    case Motion::Collided: return "Collided";
  }
  return "?";
}

const char* to_string(Reach r) {
  switch (r) {
    case Reach::None: return "None";
    case Reach::ReachedPickup: return "ReachedPickup";
    case Reach::ReachedDrop: return "ReachedDrop";
  }
  return "?";
}

std::vector<std::vector<Order>> assign_orders(std::span<const Order> orders, int n_agents) {
  std::vector<std::vector<Order>> queues(n_agents);
  int next = 0;
  for (const Order& o : orders) {
    if (o.agent >= n_agents || o.agent < -1) {
      throw Error(ErrorCode::BadOrder, "order assigned to agent " + std::to_string(o.agent) +
                                           " but only " + std::to_string(n_agents) + " agents");
    }
    const int owner = o.agent >= 0 ? o.agent : (next++ % std::max(n_agents, 1));
    if (n_agents > 0) queues[owner].push_back(o);
  }
  for (auto& q : queues) {
    std::stable_sort(q.begin(), q.end(),
                     [](const Order& a, const Order& b) { return a.release_time < b.release_time; });
  }
  return queues;
}

namespace {

void validate_orders(const GridMap& map, std::span<const Order> orders) {
  for (const Order& o : orders) {
    if (!map.is_free(o.pickup) || !map.is_free(o.drop)) {
      throw Error(ErrorCode::BadOrder, "order endpoint is not a free cell");
    }
    if (o.pickup == o.drop) throw Error(ErrorCode::BadOrder, "pickup equals drop");
  }
}

// Takes the order at agent.order_idx if it has been released by time t.
void try_assign(SimState& s, AgentState& agent) {
  const auto& queue = s.orders[agent.id];
  if (agent.order_idx >= static_cast<int>(queue.size()) && s.config.recycle_orders &&
      !queue.empty() && s.config.task == TaskMode::Lifelong) {
    agent.order_idx = 0;
  }
  if (agent.order_idx < static_cast<int>(queue.size()) &&
      queue[agent.order_idx].release_time <= s.t) {
    const Order& o = queue[agent.order_idx];
    if (s.config.task == TaskMode::OneShot) {
      agent.work_state = WorkState::Dropping;
      agent.goal = o.drop;
    } else {
      agent.work_state = WorkState::Picking;
      agent.goal = o.pickup;
    }
    return;
  }
  agent.work_state = WorkState::Idle;
  agent.goal = agent.pos;
}

SimState make_state(std::shared_ptr<const GridMap> map, std::vector<Cell> starts,
                    std::span<const Order> orders, std::uint64_t seed, const EnvConfig& config) {
  validate_orders(*map, orders);
  SimState s;
  s.map = std::move(map);
  s.rng_seed = seed;
  s.config = config;
  s.orders = assign_orders(orders, static_cast<int>(starts.size()));
  s.agents.resize(starts.size());
  for (size_t i = 0; i < starts.size(); ++i) {
    AgentState& a = s.agents[i];
    a.id = static_cast<int>(i);
    a.pos = starts[i];
    a.order_idx = 0;
    try_assign(s, a);
    if (s.config.task == TaskMode::OneShot && a.work_state == WorkState::Dropping &&
        a.pos == a.goal) {
      // Starting on the goal counts as an arrival at t = 0.
      a.finished = true;
      a.work_state = WorkState::Idle;
      ++s.goals_completed;
      ++s.orders_completed;
    }
  }
  return s;
}

}  // namespace

SimState reset(std::shared_ptr<const GridMap> map, int n_agents, std::span<const Order> orders,
               std::uint64_t seed, const EnvConfig& config) {
  std::vector<Cell> free = map->free_cells();
  if (free.empty()) throw Error(ErrorCode::NoFreeCells, "map has no free cells");
  if (n_agents < 0 || n_agents > static_cast<int>(free.size())) {
    throw Error(ErrorCode::TooManyAgents, std::to_string(n_agents) + " agents for " +
                                              std::to_string(free.size()) + " free cells");
  }
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first n_agents entries are a uniform sample.
  for (int i = 0; i < n_agents; ++i) {
    std::uniform_int_distribution<size_t> pick(i, free.size() - 1);
    std::swap(free[i], free[pick(rng)]);
  }
  free.resize(n_agents);
  return make_state(std::move(map), std::move(free), orders, seed, config);
}

SimState reset_at(std::shared_ptr<const GridMap> map, std::span<const Cell> starts,
                  std::span<const Order> orders, std::uint64_t seed, const EnvConfig& config) {
  std::vector<Cell> cells(starts.begin(), starts.end());
  std::vector<Cell> sorted = cells;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error(ErrorCode::TooManyAgents, "two agents share a start cell");
  }
  for (Cell c : cells) {
    if (!map->is_free(c)) throw Error(ErrorCode::NoFreeCells, "start cell is not free");
  }
  return make_state(std::move(map), std::move(cells), orders, seed, config);
}

std::vector<double> apply_reward_mode(std::span<const double> raw, const RewardConfig& cfg) {
  double total = 0.0;
  for (double r : raw) total += r;
  std::vector<double> out(raw.begin(), raw.end());
  switch (cfg.mode) {
    case RewardMode::Individual:
      break;
    case RewardMode::Global:
      std::fill(out.begin(), out.end(), total);
      break;
    case RewardMode::Partial:
      for (size_t i = 0; i < raw.size(); ++i) {
        out[i] = cfg.mix_alpha * raw[i] + (1.0 - cfg.mix_alpha) * (total - raw[i]);
      }
      break;
  }
  return out;
}

StepOutcome step_in_place(SimState& s, std::span<const int> joint_action) {
  const int n = s.n_agents();
  if (static_cast<int>(joint_action.size()) != n) {
    throw Error(ErrorCode::BadActionLength, "expected " + std::to_string(n) + " actions, got " +
                                                std::to_string(joint_action.size()));
  }
  for (int a : joint_action) {
    if (a < 0 || a >= kNumActions) {
      throw Error(ErrorCode::BadActionValue, "action " + std::to_string(a) + " not in 0..4");
    }
  }
  const GridMap& map = *s.map;
  StepOutcome out;
  out.actions.assign(joint_action.begin(), joint_action.end());
  out.motion.assign(n, Motion::Stayed);
  out.reach.assign(n, Reach::None);

  std::vector<Cell> target(n);
  std::vector<char> moving(n, 0);
  for (int i = 0; i < n; ++i) {
    const AgentState& a = s.agents[i];
    if (a.finished) out.actions[i] = 0;
    target[i] = apply_action(a.pos, out.actions[i]);
    moving[i] = out.actions[i] != 0;
    if (moving[i] && !map.is_free(target[i])) {
      out.motion[i] = Motion::Collided;
      moving[i] = 0;
    }
  }

  // Cancel conflicting moves until a fixed point; each round is evaluated on
  // a snapshot so the result does not depend on agent order.
  std::vector<int> claims(map.cell_count(), 0);
  std::vector<int> occupant(map.cell_count(), -1);
  for (int i = 0; i < n; ++i) occupant[map.index(s.agents[i].pos)] = i;
  bool changed = true;
  while (changed) {
    changed = false;
    std::fill(claims.begin(), claims.end(), 0);
    auto claim = [&](int i) { return moving[i] ? target[i] : s.agents[i].pos; };
    for (int i = 0; i < n; ++i) ++claims[map.index(claim(i))];
    std::vector<int> cancel;
    for (int i = 0; i < n; ++i) {
      if (!moving[i]) continue;
      if (claims[map.index(target[i])] > 1) {
        cancel.push_back(i);
        continue;
      }
      const int j = occupant[map.index(target[i])];
      if (j >= 0 && moving[j] && target[j] == s.agents[i].pos) cancel.push_back(i);
    }
    for (int i : cancel) {
      moving[i] = 0;
      out.motion[i] = Motion::Collided;
      changed = true;
    }
  }

  const RewardConfig& rc = s.config.reward;
  out.raw_rewards.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    AgentState& a = s.agents[i];
    if (moving[i]) {
      a.pos = target[i];
      out.motion[i] = Motion::Moved;
    }
    if (out.motion[i] == Motion::Collided) {
      out.raw_rewards[i] = rc.collision_penalty;
      ++out.collisions;
    } else {
      out.raw_rewards[i] = rc.step_penalty;
    }
  }

  s.t += 1;
  for (int i = 0; i < n; ++i) {
    AgentState& a = s.agents[i];
    if (a.finished) continue;
    if (a.work_state == WorkState::Picking && a.pos == a.goal) {
      out.reach[i] = Reach::ReachedPickup;
      out.raw_rewards[i] += rc.pickup_bonus();
      a.work_state = WorkState::Dropping;
      a.goal = s.orders[i][a.order_idx].drop;
      ++out.done_goals;
    } else if (a.work_state == WorkState::Dropping && a.pos == a.goal) {
      out.reach[i] = Reach::ReachedDrop;
      out.raw_rewards[i] += rc.drop_bonus();
      ++out.done_goals;
      ++out.done_orders;
      if (s.config.task == TaskMode::OneShot) {
        a.finished = true;
        a.work_state = WorkState::Idle;
        a.goal = a.pos;
      } else {
        ++a.order_idx;
        try_assign(s, a);
      }
    } else if (a.work_state == WorkState::Idle) {
      try_assign(s, a);
    }
  }
  s.goals_completed += out.done_goals;
  s.orders_completed += out.done_orders;
  out.rewards = apply_reward_mode(out.raw_rewards, rc);
  return out;
}

std::pair<SimState, StepOutcome> step(const SimState& state, std::span<const int> joint_action) {
  SimState next = state;
  StepOutcome out = step_in_place(next, joint_action);
  return {std::move(next), std::move(out)};
}

std::vector<Order> generate_orders(const GridMap& map, int count, std::uint64_t seed) {
  const std::vector<Cell> free = map.free_cells();
  if (free.size() < 2) throw Error(ErrorCode::NoFreeCells, "orders need two free cells");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, free.size() - 1);
  std::vector<Order> orders;
  orders.reserve(count);
  for (int k = 0; k < count; ++k) {
    Order o;
    o.pickup = free[pick(rng)];
    do {
      o.drop = free[pick(rng)];
    } while (o.drop == o.pickup);
    orders.push_back(o);
  }
  return orders;
}

std::vector<Order> parse_orders_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::vector<Order> orders;
  bool header = true;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    if (header) {
      if (line != "release_time,pickup_x,pickup_y,drop_x,drop_y,agent") {
        throw Error(ErrorCode::BadOrder, "unexpected order file header: " + line);
      }
      header = false;
      continue;
    }
    std::istringstream row(line);
    std::string field;
    std::vector<int> v;
    while (std::getline(row, field, ',')) {
      try {
        size_t used = 0;
        v.push_back(std::stoi(field, &used));
        if (used != field.size()) throw std::invalid_argument(field);
      } catch (const std::exception&) {
        throw Error(ErrorCode::BadOrder, "line " + std::to_string(line_no) + ": bad field '" +
                                             field + "'");
      }
    }
    if (v.size() != 6) {
      throw Error(ErrorCode::BadOrder, "line " + std::to_string(line_no) + ": expected 6 fields");
    }
    orders.push_back(Order{v[0], Cell{v[2], v[1]}, Cell{v[4], v[3]}, v[5]});
  }
  if (header) throw Error(ErrorCode::BadOrder, "order file is empty");
  return orders;
}

std::vector<Order> load_orders_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_orders_csv(ss.str());
}

std::string orders_to_csv(std::span<const Order> orders) {
  std::string out = "release_time,pickup_x,pickup_y,drop_x,drop_y,agent\n";
  for (const Order& o : orders) {
    out += std::to_string(o.release_time) + ',' + std::to_string(o.pickup.col) + ',' +
           std::to_string(o.pickup.row) + ',' + std::to_string(o.drop.col) + ',' +
           std::to_string(o.drop.row) + ',' + std::to_string(o.agent) + '\n';
  }
  return out;
}

}  // namespace seqpath
