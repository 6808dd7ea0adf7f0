#pragma once

#include <cstdint>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "seqpath/mapd_env.hpp"

namespace seqpath {

/// Shortest 4-connected path from `start` to `goal`, excluding `start`.
/// Ties are broken by (f, h, row, col). Throws Unreachable.
std::vector<Cell> astar_single(const GridMap& map, Cell start, Cell goal);

/// Single-source BFS distances over free cells; -1 where unreachable.
std::vector<int> distance_map(const GridMap& map, Cell source);

/// Space-time occupancy ledger. Vertex entries block a cell at one timestep,
/// edge entries block traversing (from -> to) between t and t + 1, and a
/// parked cell is blocked from its park time onward.
class ReservationTable {
 public:
  explicit ReservationTable(const GridMap& map) : width_(map.width()) {}

  void reserve_vertex(Cell c, int t);
  void reserve_edge(Cell from, Cell to, int t);
  void park(Cell c, int from_t);

  bool vertex_free(Cell c, int t) const;
  /// True when moving from -> to between t and t + 1 hits no reservation.
  bool move_free(Cell from, Cell to, int t) const;
  /// No vertex reservation on `c` at any time in (t, horizon] and not parked.
  bool free_after(Cell c, int t, int horizon) const;

  /// Reserves every vertex and edge of a space-time path starting at t = 0.
  /// With `park_at_end`, the last cell stays reserved indefinitely.
  void reserve_path(const std::vector<Cell>& cells, bool park_at_end);

 private:
  std::uint64_t key(int cell, int t) const {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) << 32) |
           static_cast<std::uint32_t>(cell);
  }
  int id(Cell c) const { return c.row * width_ + c.col; }

  int width_;
  std::unordered_set<std::uint64_t> vertex_;
  std::unordered_set<std::uint64_t> edge_;  // key(from, t) per direction slot
  std::unordered_map<int, int> parked_;
};

struct ExpertConfig {
  /// Space-time lookahead; 0 selects 2 * (height + width - 2).
  int horizon = 0;
  /// Random priority permutations tried after the default order fails.
  int restarts = 8;
};

struct ExpertPlan {
  int horizon = 0;
  /// Per-agent space-time cells for t = 0..horizon (index 0 is the start).
  std::vector<std::vector<Cell>> paths;
  /// Per-agent actions for t = 0..horizon-1.
  std::vector<std::vector<int>> actions;
  /// Collision-free first joint action after fallback resolution.
  std::vector<int> first_step;
  std::vector<char> planned;
  std::vector<int> priority;
  /// Every agent planned and no fallback cancellation was needed.
  bool valid = false;
};

int default_horizon(const GridMap& map);

ExpertPlan plan_expert(const SimState& state, int horizon, const ExpertConfig& config = {});

std::vector<int> expert_actions(const SimState& state, const ExpertConfig& config = {});

/// Replaces moves that would be cancelled by the simulator with NOOPs until
/// the joint action is conflict-free. Returns the number of moves cancelled.
int resolve_to_safe(const SimState& state, std::vector<int>& joint_action);

}  // namespace seqpath
