#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "seqpath/grid_map.hpp"

using namespace seqpath;

TEST_CASE("load_map parses the grid alphabet") {
  const GridMap one = load_map(".");
  CHECK(one.height() == 1);
  CHECK(one.width() == 1);
  CHECK(one.free_count() == 1);

  const GridMap m = load_map(".#.\n...\n.#.");
  CHECK(m.height() == 3);
  CHECK(m.width() == 3);
  CHECK(m.obstacle_count() == 2);
  CHECK(compute_pfci(m).rho_o == doctest::Approx(2.0 / 9.0).epsilon(1e-15));

  const GridMap all = load_map("0@\nT1\n#.");
  CHECK(all.free_count() == 2);
  CHECK(all.is_free({0, 0}));
  CHECK(all.is_free({2, 1}));
}

TEST_CASE("load_map accepts a MovingAI header and trailing whitespace") {
  const GridMap m = load_map("type octile\nheight 2\nwidth 3\nmap\n..@  \r\n.T.\n\n");
  CHECK(m.height() == 2);
  CHECK(m.width() == 3);
  CHECK(m.obstacle_count() == 2);
}

TEST_CASE("load_map rejects malformed input") {
  auto code = [](const char* text) {
    try {
      load_map(text);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::Io;
  };
  CHECK(code(".#.\n..") == ErrorCode::RaggedRows);
  CHECK(code(".x.") == ErrorCode::UnknownCell);
  CHECK(code("type octile\nheight 3\nwidth 3\nmap\n...\n...") == ErrorCode::HeaderMismatch);
  CHECK(code("") == ErrorCode::EmptyInput);
}

TEST_CASE("to_text round-trips") {
  const GridMap m = load_map("..#\n#..\n...");
  const GridMap back = load_map(to_text(m));
  CHECK(to_text(back) == to_text(m));
}

TEST_CASE("build_graph counts nodes and undirected edges") {
  const GridMap open3 = load_map("...\n...\n...");
  CHECK(build_graph(open3).node_count == 9);
  CHECK(build_graph(open3).edge_count == 12);
  CHECK(build_graph(load_map(".")).edge_count == 0);
  CHECK(build_graph(load_map(".\n.")).edge_count == 1);
}

TEST_CASE("find_corridors on small fixtures") {
  const CorridorIndex row = find_corridors(load_map("....."));
  REQUIRE(row.corridors.size() == 1);
  CHECK(row.corridors[0].cells.size() == 3);
  CHECK(row.corridors[0].endpoints.size() == 2);
  CHECK(row.mean_length == 3.0);

  // Open 3x3: the four corners are the only degree-2 cells and none touch,
  // so the degree-2 chain oracle sees four corridors of one cell each.
  const GridMap open3 = load_map("...\n...\n...");
  const CorridorIndex ci = find_corridors(open3);
  CHECK(ci.corridors.size() == oracle::corridor_sets(open3).size());
  CHECK(ci.mean_length == oracle::mean_corridor_length(open3));
  CHECK(ci.mean_length == 1.0);

  CHECK(find_corridors(load_map(".")).corridors.empty());
  CHECK(find_corridors(load_map(".")).mean_length == 0.0);
}

TEST_CASE("a closed ring is one corridor without endpoints") {
  const CorridorIndex ci = find_corridors(load_map("...\n.#.\n..."));
  REQUIRE(ci.corridors.size() == 1);
  CHECK(ci.corridors[0].cells.size() == 8);
  CHECK(ci.corridors[0].endpoints.empty());
}

TEST_CASE("compute_pfci on the open 3x3 map") {
  const MapMetrics m = compute_pfci(load_map("...\n...\n..."), 0.001);
  CHECK(m.rho_e == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(m.rho_t == 1.0);
  CHECK(m.v_e == doctest::Approx(0.003).epsilon(1e-12));
}

TEST_CASE("compute_pfci needs two nodes") {
  CHECK_THROWS_AS(compute_pfci(load_map(".")), Error);
  CHECK_THROWS_AS(compute_pfci(load_map(".#\n##")), Error);
}

TEST_CASE("property: graph, densities and corridors agree with brute force") {
  std::mt19937_64 rng(7);
  for (int k = 0; k < 200; ++k) {
    const GridMap m = oracle::random_map(rng, 14, 0.1 + 0.5 * (k % 5) / 5.0);
    const TraversalGraph g = build_graph(m);
    CHECK(g.node_count == oracle::count_free(m));
    CHECK(g.edge_count == oracle::count_edges(m));
    CHECK(g.edge_count <= 2 * g.node_count);

    const CorridorIndex ci = find_corridors(m);
    std::set<std::set<std::pair<int, int>>> mine;
    for (const Corridor& c : ci.corridors) {
      std::set<std::pair<int, int>> cells;
      for (Cell x : c.cells) {
        CHECK(m.degree(x) == 2);
        cells.insert({x.row, x.col});
      }
      CHECK(cells.size() == c.cells.size());
      // Maximality: no neighbour of a corridor outside it also has degree 2.
      for (Cell x : c.cells) {
        for (int a = 1; a < kNumActions; ++a) {
          const Cell y = apply_action(x, a);
          if (m.is_free(y) && m.degree(y) == 2) CHECK(cells.count({y.row, y.col}) == 1);
        }
      }
      mine.insert(cells);
    }
    CHECK(mine == oracle::corridor_sets(m));

    if (g.node_count >= 2) {
      const MapMetrics mm = compute_pfci(m, 0.001);
      const double n = static_cast<double>(g.node_count);
      CHECK(mm.rho_t == 1.0 - mm.rho_o);
      CHECK(mm.rho_e == 2.0 * g.edge_count / (n * (n - 1.0)));
      if (mm.rho_e > 0) CHECK(mm.v_e * mm.rho_e * mm.rho_t == doctest::Approx(0.001).epsilon(1e-12));
      CHECK(mm.l_corr == oracle::mean_corridor_length(m));
    }
  }
}
