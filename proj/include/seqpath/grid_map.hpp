#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "seqpath/core.hpp"

namespace seqpath {

/// Occupancy grid. Rows are stored top to bottom; `Cell{row, col}` indexes it.
class GridMap {
 public:
  GridMap() = default;
  GridMap(int height, int width, std::vector<char> obstacle, std::string name = {});

  int height() const { return height_; }
  int width() const { return width_; }
  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }

  bool in_bounds(Cell c) const {
    return c.row >= 0 && c.row < height_ && c.col >= 0 && c.col < width_;
  }
  bool is_obstacle(Cell c) const { return obstacle_[index(c)] != 0; }
  /// In bounds and not an obstacle.
  bool is_free(Cell c) const { return in_bounds(c) && obstacle_[index(c)] == 0; }

  int index(Cell c) const { return c.row * width_ + c.col; }
  Cell cell(int index) const { return {index / width_, index % width_}; }
  int cell_count() const { return height_ * width_; }

  int free_count() const;
  int obstacle_count() const { return cell_count() - free_count(); }
  std::vector<Cell> free_cells() const;

  /// Number of free 4-neighbours of a free cell.
  int degree(Cell c) const;

  /// Copy of this map surrounded by obstacle margins of the given widths.
  GridMap padded(int top, int left, int bottom, int right) const;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<char> obstacle_;
  std::string name_;
};

/// Parses raw grid rows, optionally preceded by a MovingAI header
/// (`type`, `height H`, `width W`, `map`).
GridMap load_map(std::string_view text, std::string name = {});
GridMap load_map_file(const std::string& path);

std::string to_text(const GridMap& map);

struct TraversalGraph {
  long long node_count = 0;
  long long edge_count = 0;
};

TraversalGraph build_graph(const GridMap& map);

struct Corridor {
  /// Degree-2 cells in chain order.
  std::vector<Cell> cells;
  /// Non-corridor neighbours at each end, adjacent to cells.front() and
  /// cells.back() respectively. Empty for a closed loop.
  std::vector<Cell> endpoints;
};

struct CorridorIndex {
  std::vector<Corridor> corridors;
  double mean_length = 0.0;

  /// Per-cell corridor id, -1 for cells outside any corridor.
  std::vector<int> corridor_of;
  /// Per-cell flag: cell is an endpoint of at least one corridor.
  std::vector<char> is_endpoint;
};

CorridorIndex find_corridors(const GridMap& map);

inline constexpr double kDefaultPfciAlpha = 0.001;

struct MapMetrics {
  double rho_o = 0.0;
  double rho_t = 0.0;
  double rho_e = 0.0;
  double v_e = 0.0;
  double l_corr = 0.0;
  double alpha_pfci = kDefaultPfciAlpha;
  long long node_count = 0;
  long long edge_count = 0;
  int corridor_count = 0;
};

/// Effective edge sparsity alpha / (rho_e * rho_t).
inline double effective_edge_sparsity(double alpha, double rho_e, double rho_t) {
  return alpha / (rho_e * rho_t);
}

MapMetrics compute_pfci(const GridMap& map, double alpha_pfci = kDefaultPfciAlpha);

}  // namespace seqpath
