#include "seqpath/expert.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <tuple>

namespace seqpath {

std::vector<Cell> astar_single(const GridMap& map, Cell start, Cell goal) {
  if (!map.is_free(start) || !map.is_free(goal)) {
    throw Error(ErrorCode::Unreachable, "start or goal is not a free cell");
  }
  if (start == goal) return {};
  const int n = map.cell_count();
  // (f, h, row, col) min-heap.
  using Entry = std::tuple<int, int, int, int>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> open;
  std::vector<int> g(n, std::numeric_limits<int>::max());
  std::vector<int> parent(n, -1);
  std::vector<char> closed(n, 0);
  g[map.index(start)] = 0;
  open.emplace(manhattan(start, goal), manhattan(start, goal), start.row, start.col);
  while (!open.empty()) {
    auto [f, h, row, col] = open.top();
    open.pop();
    const Cell cur{row, col};
    const int ci = map.index(cur);
    if (closed[ci]) continue;
    closed[ci] = 1;
    if (cur == goal) {
      std::vector<Cell> path;
      for (int at = ci; at != map.index(start); at = parent[at]) path.push_back(map.cell(at));
      std::reverse(path.begin(), path.end());
      return path;
    }
    for (int a = 1; a < kNumActions; ++a) {
      const Cell nb = apply_action(cur, a);
      if (!map.is_free(nb)) continue;
      const int ni = map.index(nb);
      if (closed[ni] || g[ci] + 1 >= g[ni]) continue;
      g[ni] = g[ci] + 1;
      parent[ni] = ci;
      const int nh = manhattan(nb, goal);
      open.emplace(g[ni] + nh, nh, nb.row, nb.col);
    }
  }
  throw Error(ErrorCode::Unreachable, "goal is not reachable from start");
}

std::vector<int> distance_map(const GridMap& map, Cell source) {
  std::vector<int> dist(map.cell_count(), -1);
  if (!map.is_free(source)) return dist;
  std::vector<int> queue{map.index(source)};
  dist[queue[0]] = 0;
  for (size_t head = 0; head < queue.size(); ++head) {
    const Cell cur = map.cell(queue[head]);
    for (int a = 1; a < kNumActions; ++a) {
      const Cell nb = apply_action(cur, a);
      if (!map.is_free(nb)) continue;
      const int ni = map.index(nb);
      if (dist[ni] >= 0) continue;
      dist[ni] = dist[queue[head]] + 1;
      queue.push_back(ni);
    }
  }
  return dist;
}

void ReservationTable::reserve_vertex(Cell c, int t) { vertex_.insert(key(id(c), t)); }

void ReservationTable::reserve_edge(Cell from, Cell to, int t) {
  edge_.insert(key(id(from) * kNumActions + action_between(from, to), t));
}

void ReservationTable::park(Cell c, int from_t) {
  auto [it, inserted] = parked_.emplace(id(c), from_t);
  if (!inserted) it->second = std::min(it->second, from_t);
}

bool ReservationTable::vertex_free(Cell c, int t) const {
  if (auto it = parked_.find(id(c)); it != parked_.end() && t >= it->second) return false;
  return !vertex_.contains(key(id(c), t));
}

bool ReservationTable::move_free(Cell from, Cell to, int t) const {
  if (!vertex_free(to, t + 1)) return false;
  if (from == to) return true;
  return !edge_.contains(key(id(to) * kNumActions + action_between(to, from), t));
}

bool ReservationTable::free_after(Cell c, int t, int horizon) const {
  if (parked_.contains(id(c))) return false;
  for (int k = t + 1; k <= horizon; ++k) {
    if (vertex_.contains(key(id(c), k))) return false;
  }
  return true;
}

void ReservationTable::reserve_path(const std::vector<Cell>& cells, bool park_at_end) {
  for (size_t t = 0; t < cells.size(); ++t) {
    reserve_vertex(cells[t], static_cast<int>(t));
    if (t + 1 < cells.size() && cells[t] != cells[t + 1]) {
      reserve_edge(cells[t], cells[t + 1], static_cast<int>(t));
    }
  }
  if (park_at_end && !cells.empty()) park(cells.back(), static_cast<int>(cells.size()) - 1);
}

int default_horizon(const GridMap& map) {
  return std::max(1, 2 * (map.height() + map.width() - 2));
}

namespace {

constexpr int kMoveCost = 100;
constexpr int kWaitCost = 101;  // a wait costs 1.01 moves

struct SpaceTimeResult {
  std::vector<Cell> cells;  // t = 0..len
  bool reached_goal = false;
};

// Space-time A* against `table`. Succeeds with a goal path when the goal can be
// reached and held; otherwise returns the best conflict-free path that
// survives to the horizon. Empty result means the agent is trapped. With
// `terminal_goal` the agent stops for good on arrival, so the goal may only be
// entered when it can be held.
SpaceTimeResult space_time_astar(const GridMap& map, const ReservationTable& table, Cell start,
                                 Cell goal, const std::vector<int>& dist, int horizon,
                                 bool terminal_goal) {
  const int cells = map.cell_count();
  const auto state = [&](int cell, int t) { return static_cast<size_t>(t) * cells + cell; };
  const auto heuristic = [&](int cell) {
    // Unreachable goals still get a finite, uniform heuristic.
    return dist[cell] >= 0 ? dist[cell] : cells;
  };

  std::vector<int> g(static_cast<size_t>(cells) * (horizon + 1), std::numeric_limits<int>::max());
  std::vector<int> parent(g.size(), -1);
  std::vector<char> closed(g.size(), 0);
  using Entry = std::tuple<int, int, int, int, int>;  // f, h, row, col, t
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> open;

  const int s0 = map.index(start);
  g[state(s0, 0)] = 0;
  open.emplace(kMoveCost * heuristic(s0), heuristic(s0), start.row, start.col, 0);

  size_t best_partial = std::numeric_limits<size_t>::max();
  std::pair<int, int> best_partial_key{std::numeric_limits<int>::max(), 0};
  size_t found = std::numeric_limits<size_t>::max();

  while (!open.empty()) {
    auto [f, h, row, col, t] = open.top();
    open.pop();
    const Cell cur{row, col};
    const int ci = map.index(cur);
    const size_t si = state(ci, t);
    if (closed[si]) continue;
    closed[si] = 1;
    if (cur == goal && table.free_after(cur, t, horizon)) {
      found = si;
      break;
    }
    if (t == horizon) {
      const std::pair<int, int> k{h, g[si]};
      if (k < best_partial_key) {
        best_partial_key = k;
        best_partial = si;
      }
      continue;
    }
    for (int a = 0; a < kNumActions; ++a) {
      const Cell nb = apply_action(cur, a);
      if (!map.is_free(nb) || !table.move_free(cur, nb, t)) continue;
      if (terminal_goal && nb == goal && !table.free_after(nb, t + 1, horizon)) continue;
      const int ni = map.index(nb);
      const size_t sn = state(ni, t + 1);
      const int ng = g[si] + (a == 0 ? kWaitCost : kMoveCost);
      if (closed[sn] || ng >= g[sn]) continue;
      g[sn] = ng;
      parent[sn] = static_cast<int>(si);
      const int nh = heuristic(ni);
      open.emplace(ng + kMoveCost * nh, nh, nb.row, nb.col, t + 1);
    }
  }

  SpaceTimeResult result;
  size_t end = found;
  if (end == std::numeric_limits<size_t>::max()) end = best_partial;
  if (end == std::numeric_limits<size_t>::max()) return result;
  result.reached_goal = found != std::numeric_limits<size_t>::max();
  for (long long at = static_cast<long long>(end); at >= 0; at = parent[at]) {
    result.cells.push_back(map.cell(static_cast<int>(at % cells)));
  }
  std::reverse(result.cells.begin(), result.cells.end());
  return result;
}

struct Attempt {
  std::vector<std::vector<Cell>> paths;
  std::vector<char> planned;
  int successes = 0;
  long long cost = 0;  // planned arrival times, horizon + distance left if not reached

  bool better_than(const Attempt& o) const {
    return successes != o.successes ? successes > o.successes : cost < o.cost;
  }
};

Attempt plan_with_priority(const SimState& state, const std::vector<int>& order, int horizon,
                           const std::vector<std::vector<int>>& dists) {
  const GridMap& map = *state.map;
  const int n = state.n_agents();
  Attempt at;
  at.paths.assign(n, {});
  at.planned.assign(n, 0);
  ReservationTable table(map);
  for (const AgentState& a : state.agents) {
    if (a.finished) {
      table.park(a.pos, 0);
      at.paths[a.id].assign(horizon + 1, a.pos);
      at.planned[a.id] = 1;
      ++at.successes;
    }
  }
  for (int i : order) {
    const AgentState& a = state.agents[i];
    if (a.finished) continue;
    SpaceTimeResult r = space_time_astar(map, table, a.pos, a.goal, dists[i], horizon,
                                         state.config.task == TaskMode::OneShot);
    if (r.cells.empty()) {
      // Trapped: it will idle, so later agents must not step into it.
      table.reserve_vertex(a.pos, 1);
      continue;
    }
    table.reserve_path(r.cells, r.reached_goal);
    at.cost += r.reached_goal ? static_cast<long long>(r.cells.size()) - 1
                              : horizon + std::max(0, dists[i][map.index(r.cells.back())]);
    // Pad to the horizon by holding the last cell.
    while (static_cast<int>(r.cells.size()) < horizon + 1) r.cells.push_back(r.cells.back());
    at.paths[i] = std::move(r.cells);
    at.planned[i] = 1;
    ++at.successes;
  }
  return at;
}

}  // namespace

int resolve_to_safe(const SimState& state, std::vector<int>& joint) {
  const GridMap& map = *state.map;
  const int n = state.n_agents();
  std::vector<int> occupant(map.cell_count(), -1);
  for (int i = 0; i < n; ++i) occupant[map.index(state.agents[i].pos)] = i;
  int cancelled = 0;
  for (int i = 0; i < n; ++i) {
    if (state.agents[i].finished && joint[i] != 0) {
      joint[i] = 0;
      ++cancelled;
    }
    if (joint[i] != 0 && !map.is_free(apply_action(state.agents[i].pos, joint[i]))) {
      joint[i] = 0;
      ++cancelled;
    }
  }
  std::vector<int> claims(map.cell_count(), 0);
  bool changed = true;
  while (changed) {
    changed = false;
    std::fill(claims.begin(), claims.end(), 0);
    for (int i = 0; i < n; ++i) ++claims[map.index(apply_action(state.agents[i].pos, joint[i]))];
    std::vector<int> cancel;
    for (int i = 0; i < n; ++i) {
      if (joint[i] == 0) continue;
      const Cell target = apply_action(state.agents[i].pos, joint[i]);
      const int j = occupant[map.index(target)];
      const bool swap = j >= 0 && joint[j] != 0 &&
                        apply_action(state.agents[j].pos, joint[j]) == state.agents[i].pos;
      if (claims[map.index(target)] > 1 || swap) cancel.push_back(i);
    }
    for (int i : cancel) {
      joint[i] = 0;
      ++cancelled;
      changed = true;
    }
  }
  return cancelled;
}

ExpertPlan plan_expert(const SimState& state, int horizon, const ExpertConfig& config) {
  const GridMap& map = *state.map;
  const int n = state.n_agents();
  horizon = std::max(1, horizon);

  std::vector<std::vector<int>> dists(n);
  std::vector<int> remaining(n, 0);
  for (int i = 0; i < n; ++i) {
    dists[i] = distance_map(map, state.agents[i].goal);
    const int d = dists[i][map.index(state.agents[i].pos)];
    remaining[i] = d >= 0 ? d : map.cell_count();
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return remaining[a] > remaining[b]; });

  // Beyond the default order, restarts also look for a cheaper complete plan.
  // Small teams try every permutation, larger ones K seeded shuffles.
  Attempt best = plan_with_priority(state, order, horizon, dists);
  std::vector<int> best_order = order;
  auto consider = [&](const std::vector<int>& perm) {
    Attempt at = plan_with_priority(state, perm, horizon, dists);
    if (at.better_than(best)) {
      best = std::move(at);
      best_order = perm;
    }
  };
  long long perms = 1;
  for (int k = 2; k <= n && perms <= config.restarts + 1; ++k) perms *= k;
  if (n > 1 && perms <= config.restarts + 1) {
    std::vector<int> perm = order;
    std::sort(perm.begin(), perm.end());
    do {
      if (perm != order) consider(perm);
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else if (n > 1) {
    std::mt19937_64 rng(state.rng_seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(state.t));
    for (int k = 0; k < config.restarts; ++k) {
      std::vector<int> perm = order;
      std::shuffle(perm.begin(), perm.end(), rng);
      consider(perm);
    }
  }

  ExpertPlan plan;
  plan.horizon = horizon;
  plan.priority = best_order;
  plan.planned = best.planned;
  plan.paths.resize(n);
  plan.actions.resize(n);
  plan.first_step.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    if (!best.planned[i]) best.paths[i].assign(horizon + 1, state.agents[i].pos);
    plan.paths[i] = std::move(best.paths[i]);
    plan.actions[i].resize(horizon);
    for (int t = 0; t < horizon; ++t) {
      plan.actions[i][t] = action_between(plan.paths[i][t], plan.paths[i][t + 1]);
    }
    plan.first_step[i] = plan.actions[i][0];
  }
  const int cancelled = resolve_to_safe(state, plan.first_step);
  plan.valid = best.successes == n && cancelled == 0;
  return plan;
}

std::vector<int> expert_actions(const SimState& state, const ExpertConfig& config) {
  const int horizon = config.horizon > 0 ? config.horizon : default_horizon(*state.map);
  return plan_expert(state, horizon, config).first_step;
}

}  // namespace seqpath
