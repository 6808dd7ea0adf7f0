#pragma once

// Reverse-mode differentiation over dense row-major arrays. Storage and the
// heavy kernels are Eigen; the tape records one node per primitive and walks
// the nodes backwards once.

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "seqpath/core.hpp"

namespace seqpath::ad {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

Index numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Array {
  Shape shape;
  Eigen::VectorXd data;

  Array() = default;
  explicit Array(Shape s);
  Array(Shape s, Eigen::VectorXd values);

  static Array scalar(double v) { return Array({1}, Eigen::VectorXd::Constant(1, v)); }
  static Array filled(Shape s, double v);

  Index size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(int axis) const { return shape[axis < 0 ? shape.size() + axis : axis]; }
  double item() const { return data[0]; }

  /// View as [size / last_dim, last_dim].
  ConstMatrixMap matrix() const;
  MatrixMap matrix();
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  const Array& value() const;
  const Shape& shape() const { return value().shape; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);
  Var variable(Array value);

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  /// Seeds d(output)/d(output) = 1 and propagates to every variable.
  void backward(Var output);

  /// Gradient of the last backward() with respect to `v` (zeros if unreached).
  Array grad(Var v) const;

  size_t size() const { return nodes_.size(); }

  // Primitive authoring interface.
  Var record(Array value, std::initializer_list<Var> inputs, Backward fn);
  Var record(Array value, std::span<const Var> inputs, Backward fn);
  const Array& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Upstream gradient of a node during backward().
  const Eigen::VectorXd& upstream(int id) const { return nodes_[id].grad; }
  /// Accumulator for an input's gradient; allocated on first use.
  Eigen::VectorXd& accum(int id);

 private:
  struct Node {
    Array value;
    Eigen::VectorXd grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), previous_(tape.grad_enabled()) {
    tape_.set_grad_enabled(false);
  }
  ~NoGradGuard() { tape_.set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool previous_;
};

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var minimum(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var clip(Var a, double lo, double hi);
Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);

/// x[..., C] + bias[C].
Var add_bias(Var x, Var bias);
/// a[..., K] x b[K, N] -> [..., N].
Var matmul(Var a, Var b);

Var softmax(Var x);
Var log_softmax(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Scalar sum / mean over every element; result has shape {1}.
Var sum(Var x);
Var mean(Var x);

Var reshape(Var x, Shape shape);
Var concat(std::span<const Var> xs, int axis);
Var slice(Var x, int axis, Index begin, Index end);

/// Rows of `table` selected by `ids`: [ids.size(), D].
Var embedding(Var table, std::span<const int> ids);
/// x[r, ids[r]] for each row of a 2-D array: [R].
Var pick(Var x, std::span<const int> ids);

/// x[N, C, H, W] with weights[O, C, K, K], bias[O]; stride 1, zero padding K/2.
Var conv2d(Var x, Var weights, Var bias);
/// 2x2 window, stride 2; ties go to the first index in row-major order.
Var maxpool2d(Var x);

/// Multi-head scaled dot-product attention on q[G, Lq, D], k/v[G, Lk, D].
/// With `causal`, query r only sees keys j <= r + causal_offset.
Var attention(Var q, Var k, Var v, int heads, bool causal, Index causal_offset = 0);
/// The softmax weights attention() would use: [G, heads, Lq, Lk].
Array attention_weights(const Array& q, const Array& k, int heads, bool causal,
                        Index causal_offset = 0);
/// 1 where query r may attend key j, 0 otherwise.
RowMatrix causal_mask(Index n);

struct LstmWeights {
  Var input;      // [in, 4H], gate order i, f, g, o
  Var recurrent;  // [H, 4H]
  Var bias;       // [4H]
};

/// One LSTM cell update on row batches x[B, in], h/c[B, H]. Returns (h', c').
std::pair<Var, Var> lstm_step(Var x, Var h, Var c, const LstmWeights& w);

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Max over coordinates of |g_tape - g_fd| / max(1, |g_fd|) using central
/// differences. `max_coords` > 0 checks an evenly strided subset per input.
double grad_check(const ScalarFn& f, const std::vector<Array>& inputs, double eps = 1e-5,
                  Index max_coords = 0);

}  // namespace seqpath::ad
