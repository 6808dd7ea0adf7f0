#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "seqpath/mapd_env.hpp"

namespace seqpath {

inline constexpr int kObsChannels = 13;
inline constexpr int kDefaultFov = 11;
/// Bumped whenever the channel layout changes; written into dump sidecars.
inline constexpr int kObsLayoutVersion = 1;

enum ObsChannel : int {
  kChObstacles = 0,
  kChOwnGoal = 1,
  kChOwnState = 2,
  kChOthers = 3,
  kChOtherGoals = 4,
  kChOtherStates = 5,
  kChOwnPath = 6,
  kChOthersT1 = 7,
  kChOthersT2 = 8,
  kChOthersT3 = 9,
  kChEndpointDx = 10,
  kChEndpointDy = 11,
  kChBlocked = 12,
};

const std::array<const char*, kObsChannels>& channel_names();

/// Channel-major [13, m, m] stack centred on the agent.
struct ObservationTensor {
  int agent_id = 0;
  int fov = kDefaultFov;
  Eigen::VectorXd data;

  double at(int ch, int r, int c) const { return data[(ch * fov + r) * fov + c]; }
  double& at(int ch, int r, int c) { return data[(ch * fov + r) * fov + c]; }
  Eigen::Map<const Eigen::VectorXd> plane(int ch) const {
    return {data.data() + ch * fov * fov, fov * fov};
  }
};

/// Per-agent predicted cells, excluding the current position.
using PathSet = std::vector<std::vector<Cell>>;

/// Single-agent shortest path from each agent to its goal, ignoring the
/// others. Unreachable goals give an empty path.
PathSet predicted_paths(const SimState& state);

/// Where `target` lands in an m x m window centred on `center`: the cell
/// itself when visible, otherwise the boundary cell on the straight ray.
/// Returned as window coordinates.
Cell project_to_fov(Cell center, Cell target, int fov);

ObservationTensor build_observation(const SimState& state, int agent, int fov,
                                    const PathSet& paths, const CorridorIndex& corridors);
ObservationTensor build_observation(const SimState& state, int agent, int fov, const PathSet& paths);

std::vector<ObservationTensor> build_observations(const SimState& state, int fov,
                                                  const PathSet& paths,
                                                  const CorridorIndex& corridors);

void check_fov(int fov);

}  // namespace seqpath
