#include "seqpath/observation.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "seqpath/expert.hpp"

namespace seqpath {

const std::array<const char*, kObsChannels>& channel_names() {
  static const std::array<const char*, kObsChannels> names = {
      "obstacles",      "own_goal",        "own_state",        "others",       "other_goals",
      "other_states",   "own_path",        "others_t1",        "others_t2",    "others_t3",
      "endpoint_dx",    "endpoint_dy",     "corridor_blocked"};
  return names;
}

void check_fov(int fov) {
  if (fov < 3 || fov % 2 == 0) {
    throw Error(ErrorCode::BadFov, "field of view must be odd and >= 3, got " + std::to_string(fov));
  }
}

PathSet predicted_paths(const SimState& state) {
  PathSet paths(state.agents.size());
  for (const AgentState& a : state.agents) {
    try {
      paths[a.id] = astar_single(*state.map, a.pos, a.goal);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Unreachable) throw;
    }
  }
  return paths;
}

Cell project_to_fov(Cell center, Cell target, int fov) {
  const int r = fov / 2;
  const int dr = target.row - center.row;
  const int dc = target.col - center.col;
  const int far = std::max(std::abs(dr), std::abs(dc));
  if (far <= r) return {dr + r, dc + r};
  const double s = static_cast<double>(r) / far;
  return {static_cast<int>(std::lround(dr * s)) + r, static_cast<int>(std::lround(dc * s)) + r};
}

namespace {

// Position of `c` along corridor `k`: 0..len-1 for its cells, -1 and len for
// the two endpoints. nullopt when `c` is not part of it.
std::optional<int> chain_index(const GridMap& map, const CorridorIndex& index, int k, Cell c) {
  const Corridor& cor = index.corridors[k];
  if (index.corridor_of[map.index(c)] == k) {
    auto it = std::find(cor.cells.begin(), cor.cells.end(), c);
    return static_cast<int>(it - cor.cells.begin());
  }
  if (!cor.endpoints.empty()) {
    if (cor.endpoints[0] == c) return -1;
    if (cor.endpoints.size() > 1 && cor.endpoints[1] == c) return static_cast<int>(cor.cells.size());
  }
  return std::nullopt;
}

struct ChainMove {
  int corridor = -1;
  int direction = 0;
};

// Direction of a single step from -> to along whichever corridor contains it.
ChainMove chain_move(const GridMap& map, const CorridorIndex& index, Cell from, Cell to) {
  if (from == to) return {};
  for (Cell probe : {from, to}) {
    const int k = index.corridor_of[map.index(probe)];
    if (k < 0) continue;
    auto a = chain_index(map, index, k, from);
    auto b = chain_index(map, index, k, to);
    if (!a || !b || *a == *b) continue;
    int d = *b - *a;
    if (index.corridors[k].endpoints.empty() && std::abs(d) > 1) d = -d;  // wrapped around a loop
    return {k, d > 0 ? 1 : -1};
  }
  return {};
}

}  // namespace

ObservationTensor build_observation(const SimState& state, int agent, int fov,
                                    const PathSet& paths, const CorridorIndex& corridors) {
  check_fov(fov);
  const GridMap& map = *state.map;
  if (agent < 0 || agent >= state.n_agents()) {
    throw Error(ErrorCode::ShapeMismatch, "agent index out of range");
  }
  if (static_cast<int>(paths.size()) != state.n_agents()) {
    throw Error(ErrorCode::ShapeMismatch, "one predicted path per agent is required");
  }
  ObservationTensor obs;
  obs.agent_id = agent;
  obs.fov = fov;
  obs.data = Eigen::VectorXd::Zero(kObsChannels * fov * fov);

  const AgentState& self = state.agents[agent];
  const int r = fov / 2;
  const Cell origin{self.pos.row - r, self.pos.col - r};
  auto window = [&](Cell c) -> std::optional<Cell> {
    Cell w{c.row - origin.row, c.col - origin.col};
    if (w.row < 0 || w.row >= fov || w.col < 0 || w.col >= fov) return std::nullopt;
    return w;
  };

  for (int wr = 0; wr < fov; ++wr) {
    for (int wc = 0; wc < fov; ++wc) {
      const Cell c{origin.row + wr, origin.col + wc};
      if (!map.is_free(c)) obs.at(kChObstacles, wr, wc) = 1.0;
      if (map.in_bounds(c) && corridors.is_endpoint[map.index(c)]) {
        obs.at(kChEndpointDx, wr, wc) = std::clamp(self.pos.col - c.col, -fov, fov) / double(fov);
        obs.at(kChEndpointDy, wr, wc) = std::clamp(self.pos.row - c.row, -fov, fov) / double(fov);
      }
    }
  }

  const Cell own_goal = project_to_fov(self.pos, self.goal, fov);
  obs.at(kChOwnGoal, own_goal.row, own_goal.col) = 1.0;
  obs.data.segment(kChOwnState * fov * fov, fov * fov).setConstant(static_cast<int>(self.work_state));

  const auto& own_path = paths[agent];
  for (size_t k = 0; k < own_path.size() && k < 3; ++k) {
    if (auto w = window(own_path[k])) obs.at(kChOwnPath, w->row, w->col) = 1.0;
  }

  for (const AgentState& other : state.agents) {
    if (other.id == agent) continue;
    if (auto w = window(other.pos)) {
      obs.at(kChOthers, w->row, w->col) = 1.0;
      obs.at(kChOtherStates, w->row, w->col) = static_cast<int>(other.work_state);
    }
    if (auto w = window(other.goal)) obs.at(kChOtherGoals, w->row, w->col) = 1.0;
    else {
      const Cell p = project_to_fov(self.pos, other.goal, fov);
      obs.at(kChOtherGoals, p.row, p.col) = 1.0;
    }
    const auto& path = paths[other.id];
    for (int k = 0; k < 3; ++k) {
      const Cell c = path.empty() ? other.pos : path[std::min<size_t>(k, path.size() - 1)];
      if (auto w = window(c)) obs.at(kChOthersT1 + k, w->row, w->col) = 1.0;
    }
  }

  // Blocked corridors: the first corridor this agent's path travels along,
  // flagged when another agent is stepping through it the other way.
  if (!corridors.corridors.empty()) {
    ChainMove mine;
    Cell prev = self.pos;
    for (size_t k = 0; k < own_path.size() && k < 3 && mine.corridor < 0; ++k) {
      mine = chain_move(map, corridors, prev, own_path[k]);
      prev = own_path[k];
    }
    if (mine.corridor >= 0) {
      bool blocked = false;
      for (const AgentState& other : state.agents) {
        if (other.id == agent || paths[other.id].empty()) continue;
        const Cell next = paths[other.id].front();
        const ChainMove theirs = chain_move(map, corridors, other.pos, next);
        if (theirs.corridor == mine.corridor && theirs.direction == -mine.direction) blocked = true;
      }
      if (blocked) {
        for (Cell c : corridors.corridors[mine.corridor].cells) {
          if (auto w = window(c)) obs.at(kChBlocked, w->row, w->col) = 1.0;
        }
      }
    }
  }
  return obs;
}

ObservationTensor build_observation(const SimState& state, int agent, int fov, const PathSet& paths) {
  return build_observation(state, agent, fov, paths, find_corridors(*state.map));
}

std::vector<ObservationTensor> build_observations(const SimState& state, int fov,
                                                  const PathSet& paths,
                                                  const CorridorIndex& corridors) {
  std::vector<ObservationTensor> out;
  out.reserve(state.agents.size());
  for (int i = 0; i < state.n_agents(); ++i) {
    out.push_back(build_observation(state, i, fov, paths, corridors));
  }
  return out;
}

}  // namespace seqpath
