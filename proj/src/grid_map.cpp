#include "seqpath/grid_map.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <sstream>

namespace seqpath {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::RaggedRows: return "RaggedRows";
    case ErrorCode::UnknownCell: return "UnknownCell";
    case ErrorCode::HeaderMismatch: return "HeaderMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::DegenerateGraph: return "DegenerateGraph";
    case ErrorCode::TooManyAgents: return "TooManyAgents";
    case ErrorCode::NoFreeCells: return "NoFreeCells";
    case ErrorCode::BadActionLength: return "BadActionLength";
    case ErrorCode::BadActionValue: return "BadActionValue";
    case ErrorCode::BadOrder: return "BadOrder";
    case ErrorCode::BadFov: return "BadFov";
    case ErrorCode::Unreachable: return "Unreachable";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::BadPolicyRef: return "BadPolicyRef";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::BadCheckpoint: return "BadCheckpoint";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Divergence: return "Divergence";
  }
  return "Unknown";
}

int action_between(Cell from, Cell to) {
  for (int a = 0; a < kNumActions; ++a) {
    if (apply_action(from, a) == to) return a;
  }
  throw Error(ErrorCode::BadActionValue, "cells are not adjacent");
}

GridMap::GridMap(int height, int width, std::vector<char> obstacle, std::string name)
    : height_(height), width_(width), obstacle_(std::move(obstacle)), name_(std::move(name)) {
  if (height_ < 1 || width_ < 1 || static_cast<int>(obstacle_.size()) != height_ * width_) {
    throw Error(ErrorCode::RaggedRows, "grid dimensions do not match cell count");
  }
}

int GridMap::free_count() const {
  return static_cast<int>(std::count(obstacle_.begin(), obstacle_.end(), 0));
}

std::vector<Cell> GridMap::free_cells() const {
  std::vector<Cell> out;
  for (int i = 0; i < cell_count(); ++i) {
    if (!obstacle_[i]) out.push_back(cell(i));
  }
  return out;
}

int GridMap::degree(Cell c) const {
  int d = 0;
  for (int a = 1; a < kNumActions; ++a) d += is_free(apply_action(c, a));
  return d;
}

GridMap GridMap::padded(int top, int left, int bottom, int right) const {
  const int h = height_ + top + bottom;
  const int w = width_ + left + right;
  std::vector<char> cells(static_cast<size_t>(h) * w, 1);
  for (int r = 0; r < height_; ++r) {
    for (int c = 0; c < width_; ++c) {
      cells[(r + top) * w + (c + left)] = obstacle_[r * width_ + c];
    }
  }
  return GridMap(h, w, std::move(cells), name_);
}

namespace {

std::string_view rstrip(std::string_view s) {
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

bool starts_with_word(std::string_view line, std::string_view word) {
  return line.size() >= word.size() && line.substr(0, word.size()) == word &&
         (line.size() == word.size() || line[word.size()] == ' ' || line[word.size()] == '\t');
}

int header_value(std::string_view line, std::string_view key) {
  if (!starts_with_word(line, key)) {
    throw Error(ErrorCode::HeaderMismatch, "expected '" + std::string(key) + "' header line");
  }
  std::istringstream in{std::string(line.substr(key.size()))};
  int value = 0;
  if (!(in >> value) || value < 1) {
    throw Error(ErrorCode::HeaderMismatch, "bad value in '" + std::string(line) + "'");
  }
  return value;
}

}  // namespace

GridMap load_map(std::string_view text, std::string name) {
  std::vector<std::string_view> lines;
  size_t start = 0;
  while (start <= text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    lines.push_back(rstrip(text.substr(start, end - start)));
    start = end + 1;
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw Error(ErrorCode::EmptyInput, "map text is empty");

  size_t body = 0;
  int declared_h = -1;
  int declared_w = -1;
  if (starts_with_word(lines[0], "type")) {
    if (lines.size() < 4) throw Error(ErrorCode::HeaderMismatch, "truncated header");
    declared_h = header_value(lines[1], "height");
    declared_w = header_value(lines[2], "width");
    if (lines[3] != "map") throw Error(ErrorCode::HeaderMismatch, "expected 'map' line");
    body = 4;
  }

  const int h = static_cast<int>(lines.size() - body);
  if (h == 0) throw Error(ErrorCode::EmptyInput, "map has no rows");
  const int w = static_cast<int>(lines[body].size());
  if (w == 0) throw Error(ErrorCode::RaggedRows, "first row is empty");

  std::vector<char> cells;
  cells.reserve(static_cast<size_t>(h) * w);
  for (size_t i = body; i < lines.size(); ++i) {
    if (static_cast<int>(lines[i].size()) != w) {
      throw Error(ErrorCode::RaggedRows, "row " + std::to_string(i - body) + " has width " +
                                             std::to_string(lines[i].size()) + ", expected " +
                                             std::to_string(w));
    }
    for (char ch : lines[i]) {
      switch (ch) {
        case '.': case '0': cells.push_back(0); break;
        case '#': case '@': case 'T': case '1': cells.push_back(1); break;
        default:
          throw Error(ErrorCode::UnknownCell, std::string("unexpected character '") + ch + "'");
      }
    }
  }
  if (declared_h >= 0 && (declared_h != h || declared_w != w)) {
    throw Error(ErrorCode::HeaderMismatch,
                "header declares " + std::to_string(declared_h) + "x" + std::to_string(declared_w) +
                    ", body is " + std::to_string(h) + "x" + std::to_string(w));
  }
  return GridMap(h, w, std::move(cells), std::move(name));
}

GridMap load_map_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string name = path;
  if (auto slash = name.find_last_of('/'); slash != std::string::npos) name = name.substr(slash + 1);
  if (auto dot = name.find_last_of('.'); dot != std::string::npos) name = name.substr(0, dot);
  return load_map(ss.str(), name);
}

std::string to_text(const GridMap& map) {
  std::string out;
  for (int r = 0; r < map.height(); ++r) {
    for (int c = 0; c < map.width(); ++c) out.push_back(map.is_obstacle({r, c}) ? '#' : '.');
    out.push_back('\n');
  }
  return out;
}

TraversalGraph build_graph(const GridMap& map) {
  TraversalGraph g;
  for (int r = 0; r < map.height(); ++r) {
    for (int c = 0; c < map.width(); ++c) {
      if (!map.is_free({r, c})) continue;
      ++g.node_count;
      // Count each edge once from its left/upper end.
      g.edge_count += map.is_free({r, c + 1});
      g.edge_count += map.is_free({r + 1, c});
    }
  }
  return g;
}

CorridorIndex find_corridors(const GridMap& map) {
  CorridorIndex index;
  const int n = map.cell_count();
  index.corridor_of.assign(n, -1);
  index.is_endpoint.assign(n, 0);

  auto in_corridor_set = [&](Cell c) { return map.is_free(c) && map.degree(c) == 2; };
  auto neighbours = [&](Cell c) {
    std::vector<Cell> out;
    for (int a = 1; a < kNumActions; ++a) {
      Cell nb = apply_action(c, a);
      if (map.is_free(nb)) out.push_back(nb);
    }
    return out;
  };

  std::vector<char> visited(n, 0);
  for (int i = 0; i < n; ++i) {
    const Cell seed = map.cell(i);
    if (visited[i] || !in_corridor_set(seed)) continue;

    // Walk both directions from the seed until leaving the degree-2 set.
    auto walk = [&](Cell prev, Cell cur, std::vector<Cell>& chain) -> std::optional<Cell> {
      while (true) {
        if (cur == seed) return std::nullopt;  // closed loop
        if (!in_corridor_set(cur)) return cur;
        chain.push_back(cur);
        visited[map.index(cur)] = 1;
        auto nb = neighbours(cur);
        Cell next = nb[0] == prev ? nb[1] : nb[0];
        prev = cur;
        cur = next;
      }
    };

    visited[i] = 1;
    const auto nb = neighbours(seed);
    std::vector<Cell> forward;
    std::vector<Cell> backward;
    auto end_a = walk(seed, nb[0], forward);
    Corridor corridor;
    if (!end_a) {
      corridor.cells.push_back(seed);
      corridor.cells.insert(corridor.cells.end(), forward.begin(), forward.end());
    } else {
      auto end_b = walk(seed, nb[1], backward);
      corridor.cells.assign(backward.rbegin(), backward.rend());
      corridor.cells.push_back(seed);
      corridor.cells.insert(corridor.cells.end(), forward.begin(), forward.end());
      corridor.endpoints = {*end_b, *end_a};
    }

    const int id = static_cast<int>(index.corridors.size());
    for (Cell c : corridor.cells) index.corridor_of[map.index(c)] = id;
    for (Cell e : corridor.endpoints) index.is_endpoint[map.index(e)] = 1;
    index.corridors.push_back(std::move(corridor));
  }

  if (!index.corridors.empty()) {
    double total = 0.0;
    for (const auto& c : index.corridors) total += static_cast<double>(c.cells.size());
    index.mean_length = total / static_cast<double>(index.corridors.size());
  }
  return index;
}

MapMetrics compute_pfci(const GridMap& map, double alpha_pfci) {
  const TraversalGraph g = build_graph(map);
  if (g.node_count < 2) {
    throw Error(ErrorCode::DegenerateGraph, "edge density needs at least two traversable cells");
  }
  MapMetrics m;
  m.alpha_pfci = alpha_pfci;
  m.node_count = g.node_count;
  m.edge_count = g.edge_count;
  const double cells = static_cast<double>(map.cell_count());
  m.rho_o = static_cast<double>(map.obstacle_count()) / cells;
  m.rho_t = 1.0 - m.rho_o;
  const double v = static_cast<double>(g.node_count);
  m.rho_e = 2.0 * static_cast<double>(g.edge_count) / (v * (v - 1.0));
  m.v_e = effective_edge_sparsity(alpha_pfci, m.rho_e, m.rho_t);
  const CorridorIndex corridors = find_corridors(map);
  m.l_corr = corridors.mean_length;
  m.corridor_count = static_cast<int>(corridors.corridors.size());
  return m;
}

}  // namespace seqpath
