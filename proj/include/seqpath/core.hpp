#pragma once

#include <compare>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace seqpath {

enum class ErrorCode {
  RaggedRows,
  UnknownCell,
  HeaderMismatch,
  EmptyInput,
  DegenerateGraph,
  TooManyAgents,
  NoFreeCells,
  BadActionLength,
  BadActionValue,
  BadOrder,
  BadFov,
  Unreachable,
  ShapeMismatch,
  NotNormalized,
  BadPolicyRef,
  BadConfig,
  BadCheckpoint,
  Io,
  Divergence,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

struct Cell {
  int row = 0;
  int col = 0;

  friend constexpr bool operator==(const Cell&, const Cell&) = default;
  friend constexpr auto operator<=>(const Cell&, const Cell&) = default;
};

inline constexpr int manhattan(Cell a, Cell b) {
  return (a.row > b.row ? a.row - b.row : b.row - a.row) +
         (a.col > b.col ? a.col - b.col : b.col - a.col);
}

// 0=NOOP, 1=LEFT, 2=RIGHT, 3=UP, 4=DOWN
inline constexpr int kNumActions = 5;
inline constexpr int kActionRow[kNumActions] = {0, 0, 0, -1, 1};
inline constexpr int kActionCol[kNumActions] = {0, -1, 1, 0, 0};

inline constexpr Cell apply_action(Cell c, int action) {
  return {c.row + kActionRow[action], c.col + kActionCol[action]};
}

// Action that moves `from` onto the 4-adjacent cell `to`; 0 when equal.
int action_between(Cell from, Cell to);

}  // namespace seqpath
