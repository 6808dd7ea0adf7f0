#pragma once

// Shared scenario builders for the unit and acceptance suites.

#include <memory>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "seqpath/expert.hpp"
#include "seqpath/mapd_env.hpp"

namespace fixture {

using namespace seqpath;

inline std::shared_ptr<const GridMap> open_map(int h, int w, const char* name = "open") {
  return std::make_shared<const GridMap>(h, w, std::vector<char>(h * w, 0), name);
}

/// One-shot instance with explicit starts and goals. Each agent gets a single
/// order whose drop is its goal; the pickup is any other free cell.
inline SimState one_shot(std::shared_ptr<const GridMap> map, const std::vector<Cell>& starts,
                         const std::vector<Cell>& goals) {
  std::vector<Order> orders;
  const auto free = map->free_cells();
  for (size_t i = 0; i < goals.size(); ++i) {
    Order o;
    o.drop = goals[i];
    o.pickup = free[0] == goals[i] ? free[1] : free[0];
    o.agent = static_cast<int>(i);
    orders.push_back(o);
  }
  EnvConfig cfg;
  cfg.task = TaskMode::OneShot;
  return reset_at(std::move(map), starts, orders, 0, cfg);
}

struct ClosedLoop {
  int steps = 0;
  int collisions = 0;
  int soc = 0;  // sum of arrival times, -1 if someone never arrived
  bool all_arrived = false;
};

/// Runs expert_actions until every one-shot agent has arrived or `cap` steps.
inline ClosedLoop run_expert(SimState s, int cap) {
  ClosedLoop out;
  std::vector<int> arrival(s.agents.size(), -1);
  for (const auto& a : s.agents)
    if (a.finished) arrival[a.id] = 0;
  for (int k = 0; k < cap; ++k) {
    bool all = true;
    for (int a : arrival) all = all && a >= 0;
    if (all) break;
    const auto joint = expert_actions(s);
    const StepOutcome o = step_in_place(s, joint);
    out.collisions += o.collisions;
    ++out.steps;
    for (const auto& a : s.agents)
      if (a.finished && arrival[a.id] < 0) arrival[a.id] = s.t;
  }
  out.all_arrived = true;
  for (int a : arrival) {
    if (a < 0) out.all_arrived = false;
    out.soc += a;
  }
  if (!out.all_arrived) out.soc = -1;
  return out;
}

/// Random lifelong fixture on a random map with at least two free cells.
inline SimState random_state(std::mt19937_64& rng, int max_side, int max_agents) {
  for (;;) {
    auto m = std::make_shared<const GridMap>(oracle::random_map(rng, max_side, 0.25));
    if (m->free_count() < 3) continue;
    const int n = std::uniform_int_distribution<int>(1, std::min(max_agents, m->free_count() - 1))(rng);
    return reset(m, n, generate_orders(*m, 2 * n, rng()), rng());
  }
}

}  // namespace fixture
