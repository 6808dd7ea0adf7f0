#include "seqpath/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace seqpath::ad {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

Index last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

ConstMatrixMap as_matrix(const Eigen::VectorXd& v, Index rows, Index cols) {
  return ConstMatrixMap(v.data(), rows, cols);
}

MatrixMap as_matrix(Eigen::VectorXd& v, Index rows, Index cols) {
  return MatrixMap(v.data(), rows, cols);
}

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (size_t i = 0; i < shape.size(); ++i) out << (i ? ", " : "") << shape[i];
  out << ']';
  return out.str();
}

Array::Array(Shape s) : shape(std::move(s)), data(Eigen::VectorXd::Zero(numel(shape))) {}

Array::Array(Shape s, Eigen::VectorXd values) : shape(std::move(s)), data(std::move(values)) {
  require(data.size() == numel(shape),
          "array data has " + std::to_string(data.size()) + " values for shape " +
              shape_string(shape));
}

Array Array::filled(Shape s, double v) {
  const Index n = numel(s);
  return Array(std::move(s), Eigen::VectorXd::Constant(n, v));
}

ConstMatrixMap Array::matrix() const {
  const Index cols = last_dim(shape);
  return ConstMatrixMap(data.data(), cols ? data.size() / cols : 0, cols);
}

MatrixMap Array::matrix() {
  const Index cols = last_dim(shape);
  return MatrixMap(data.data(), cols ? data.size() / cols : 0, cols);
}

const Array& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Array value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::variable(Array value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Array value, std::initializer_list<Var> inputs, Backward fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Array value, std::span<const Var> inputs, Backward fn) {
  bool needs = false;
  if (grad_enabled_) {
    for (const Var& v : inputs) {
      require(&v.tape() == this, "inputs come from a different tape");
      needs = needs || nodes_[v.id()].requires_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : Backward{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Eigen::VectorXd& Tape::accum(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = Eigen::VectorXd::Zero(n.value.size());
  return n.grad;
}

void Tape::backward(Var output) {
  require(output.value().size() == 1, "backward() needs a scalar output");
  for (Node& n : nodes_) n.grad.resize(0);
  if (!nodes_[output.id()].requires_grad) return;
  accum(output.id())[0] = 1.0;
  // Nodes are appended after their inputs, so descending ids is a reverse
  // topological order.
  for (int id = output.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, id);
  }
}

Array Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() != n.value.size()) return Array(n.value.shape);
  return Array(n.value.shape, n.grad);
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <class Fwd, class Bwd>
Var unary(Var a, Fwd fwd, Bwd bwd) {
  Array out(a.shape(), a.value().data.unaryExpr(fwd));
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, bwd](Tape& t, int self) {
    const Eigen::VectorXd& up = t.upstream(self);
    const Eigen::VectorXd& x = t.value(ia).data;
    const Eigen::VectorXd& y = t.value(self).data;
    Eigen::VectorXd& gx = t.accum(ia);
    for (Index i = 0; i < up.size(); ++i) gx[i] += up[i] * bwd(x[i], y[i]);
  });
}

void require_same(Var a, Var b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shapes " + shape_string(a.shape()) +
                                      " and " + shape_string(b.shape()) + " differ");
}

}  // namespace

Var add(Var a, Var b) {
  require_same(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(Array(a.shape(), a.value().data + b.value().data), {a, b},
                         [ia, ib](Tape& t, int self) {
                           if (t.requires_grad(ia)) t.accum(ia) += t.upstream(self);
                           if (t.requires_grad(ib)) t.accum(ib) += t.upstream(self);
                         });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(Array(a.shape(), a.value().data - b.value().data), {a, b},
                         [ia, ib](Tape& t, int self) {
                           if (t.requires_grad(ia)) t.accum(ia) += t.upstream(self);
                           if (t.requires_grad(ib)) t.accum(ib) -= t.upstream(self);
                         });
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(Array(a.shape(), a.value().data.cwiseProduct(b.value().data)), {a, b},
                         [ia, ib](Tape& t, int self) {
                           const auto& up = t.upstream(self);
                           if (t.requires_grad(ia)) t.accum(ia) += up.cwiseProduct(t.value(ib).data);
                           if (t.requires_grad(ib)) t.accum(ib) += up.cwiseProduct(t.value(ia).data);
                         });
}

Var minimum(Var a, Var b) {
  require_same(a, b, "minimum");
  const int ia = a.id(), ib = b.id();
  return a.tape().record(Array(a.shape(), a.value().data.cwiseMin(b.value().data)), {a, b},
                         [ia, ib](Tape& t, int self) {
                           const auto& up = t.upstream(self);
                           const auto& x = t.value(ia).data;
                           const auto& y = t.value(ib).data;
                           // Ties route to the first argument.
                           for (Index i = 0; i < up.size(); ++i) {
                             const int to = x[i] <= y[i] ? ia : ib;
                             if (t.requires_grad(to)) t.accum(to)[i] += up[i];
                           }
                         });
}

Var scale(Var a, double s) {
  const int ia = a.id();
  return a.tape().record(Array(a.shape(), a.value().data * s), {a}, [ia, s](Tape& t, int self) {
    t.accum(ia) += s * t.upstream(self);
  });
}

Var add_scalar(Var a, double s) {
  const int ia = a.id();
  return a.tape().record(Array(a.shape(), a.value().data.array() + s), {a},
                         [ia](Tape& t, int self) { t.accum(ia) += t.upstream(self); });
}

Var clip(Var a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var add_bias(Var x, Var bias) {
  const Index c = last_dim(x.shape());
  require(bias.value().size() == c, "add_bias: bias size " + std::to_string(bias.value().size()) +
                                        " vs last dim " + std::to_string(c));
  Array out = x.value();
  out.matrix().rowwise() += bias.value().data.transpose();
  const int ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [ix, ib, c](Tape& t, int self) {
    const auto& up = t.upstream(self);
    if (t.requires_grad(ix)) t.accum(ix) += up;
    if (t.requires_grad(ib)) {
      t.accum(ib) += as_matrix(up, up.size() / c, c).colwise().sum().transpose();
    }
  });
}

Var matmul(Var a, Var b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(bs.size() == 2 && !as.empty() && as.back() == bs[0],
          "matmul: " + shape_string(as) + " x " + shape_string(bs));
  const Index k = bs[0], n = bs[1], rows = numel(as) / k;
  Shape os = as;
  os.back() = n;
  Array out(os);
  as_matrix(out.data, rows, n).noalias() =
      as_matrix(a.value().data, rows, k) * as_matrix(b.value().data, k, n);
  const int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, rows, k, n](Tape& t, int self) {
    const auto up = as_matrix(t.upstream(self), rows, n);
    if (t.requires_grad(ia)) {
      as_matrix(t.accum(ia), rows, k).noalias() += up * as_matrix(t.value(ib).data, k, n).transpose();
    }
    if (t.requires_grad(ib)) {
      as_matrix(t.accum(ib), k, n).noalias() += as_matrix(t.value(ia).data, rows, k).transpose() * up;
    }
  });
}

Var softmax(Var x) {
  const Index c = last_dim(x.shape());
  Array out = x.value();
  auto m = out.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    m.row(r).array() -= m.row(r).maxCoeff();
    m.row(r) = m.row(r).array().exp();
    m.row(r) /= m.row(r).sum();
  }
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, c](Tape& t, int self) {
    const auto& upv = t.upstream(self);
    const Index rows = upv.size() / c;
    const auto up = as_matrix(upv, rows, c);
    const auto y = as_matrix(t.value(self).data, rows, c);
    auto gx = as_matrix(t.accum(ix), rows, c);
    for (Index r = 0; r < rows; ++r) {
      const double dot = up.row(r).dot(y.row(r));
      gx.row(r).array() += y.row(r).array() * (up.row(r).array() - dot);
    }
  });
}

Var log_softmax(Var x) {
  const Index c = last_dim(x.shape());
  Array out = x.value();
  auto m = out.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    const double lse = mx + std::log((m.row(r).array() - mx).exp().sum());
    m.row(r).array() -= lse;
  }
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, c](Tape& t, int self) {
    const auto& upv = t.upstream(self);
    const Index rows = upv.size() / c;
    const auto up = as_matrix(upv, rows, c);
    const auto y = as_matrix(t.value(self).data, rows, c);
    auto gx = as_matrix(t.accum(ix), rows, c);
    for (Index r = 0; r < rows; ++r) {
      gx.row(r).array() += up.row(r).array() - y.row(r).array().exp() * up.row(r).sum();
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Index c = last_dim(x.shape());
  require(gamma.value().size() == c && beta.value().size() == c, "layer_norm: parameter width");
  const Index rows = x.value().size() / c;
  Array out(x.shape());
  Eigen::VectorXd inv_std(rows);
  RowMatrix xhat(rows, c);
  const auto xm = x.value().matrix();
  for (Index r = 0; r < rows; ++r) {
    const double mu = xm.row(r).mean();
    const double var = (xm.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xm.row(r).array() - mu) * inv_std[r];
  }
  out.matrix() = (xhat.array().rowwise() * gamma.value().data.transpose().array()).rowwise() +
                 beta.value().data.transpose().array();
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, rows, c, inv_std = std::move(inv_std), xhat = std::move(xhat)](Tape& t,
                                                                                  int self) {
        const auto up = as_matrix(t.upstream(self), rows, c);
        if (t.requires_grad(ig)) {
          t.accum(ig) += (up.array() * xhat.array()).colwise().sum().transpose().matrix();
        }
        if (t.requires_grad(ib)) t.accum(ib) += up.colwise().sum().transpose();
        if (t.requires_grad(ix)) {
          const auto& g = t.value(ig).data;
          auto gx = as_matrix(t.accum(ix), rows, c);
          for (Index r = 0; r < rows; ++r) {
            Eigen::ArrayXd dxhat = up.row(r).transpose().array() * g.array();
            const double m1 = dxhat.mean();
            const double m2 = (dxhat * xhat.row(r).transpose().array()).mean();
            gx.row(r).array() +=
                (inv_std[r] * (dxhat - m1 - xhat.row(r).transpose().array() * m2)).transpose();
          }
        }
      });
}

Var sum(Var x) {
  const int ix = x.id();
  return x.tape().record(Array::scalar(x.value().data.sum()), {x}, [ix](Tape& t, int self) {
    t.accum(ix).array() += t.upstream(self)[0];
  });
}

Var mean(Var x) {
  const Index n = x.value().size();
  require(n > 0, "mean of an empty array");
  const int ix = x.id();
  return x.tape().record(Array::scalar(x.value().data.mean()), {x}, [ix, n](Tape& t, int self) {
    t.accum(ix).array() += t.upstream(self)[0] / static_cast<double>(n);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Var reshape(Var x, Shape shape) {
  require(numel(shape) == x.value().size(),
          "reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  const int ix = x.id();
  return x.tape().record(Array(std::move(shape), x.value().data), {x},
                         [ix](Tape& t, int self) { t.accum(ix) += t.upstream(self); });
}

namespace {

// [outer, axis, inner] factorisation of a shape around `axis`.
struct AxisSplit {
  Index outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit a;
  for (int i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

int normalize_axis(int axis, size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "axis out of range");
  return axis;
}

}  // namespace

Var concat(std::span<const Var> xs, int axis) {
  require(!xs.empty(), "concat of nothing");
  const Shape& s0 = xs[0].shape();
  axis = normalize_axis(axis, s0.size());
  Shape os = s0;
  os[axis] = 0;
  std::vector<Index> lens;
  for (const Var& v : xs) {
    const Shape& s = v.shape();
    require(s.size() == s0.size(), "concat: rank mismatch");
    for (size_t d = 0; d < s.size(); ++d) {
      require(static_cast<int>(d) == axis || s[d] == s0[d],
              "concat: " + shape_string(s) + " vs " + shape_string(s0));
    }
    lens.push_back(s[axis]);
    os[axis] += s[axis];
  }
  const AxisSplit out_split = split_at(os, axis);
  Array out(os);
  Index off = 0;
  for (size_t k = 0; k < xs.size(); ++k) {
    const Eigen::VectorXd& src = xs[k].value().data;
    const Index chunk = lens[k] * out_split.inner;
    for (Index o = 0; o < out_split.outer; ++o) {
      out.data.segment(o * out_split.len * out_split.inner + off * out_split.inner, chunk) =
          src.segment(o * chunk, chunk);
    }
    off += lens[k];
  }
  std::vector<int> ids;
  for (const Var& v : xs) ids.push_back(v.id());
  return xs[0].tape().record(std::move(out), xs,
                             [ids, lens, out_split](Tape& t, int self) {
                               const auto& up = t.upstream(self);
                               Index off = 0;
                               for (size_t k = 0; k < ids.size(); ++k) {
                                 const Index chunk = lens[k] * out_split.inner;
                                 if (t.requires_grad(ids[k])) {
                                   Eigen::VectorXd& g = t.accum(ids[k]);
                                   for (Index o = 0; o < out_split.outer; ++o) {
                                     g.segment(o * chunk, chunk) += up.segment(
                                         o * out_split.len * out_split.inner + off * out_split.inner,
                                         chunk);
                                   }
                                 }
                                 off += lens[k];
                               }
                             });
}

Var slice(Var x, int axis, Index begin, Index end) {
  const Shape& s = x.shape();
  axis = normalize_axis(axis, s.size());
  require(begin >= 0 && begin <= end && end <= s[axis], "slice bounds out of range");
  const AxisSplit sp = split_at(s, axis);
  Shape os = s;
  os[axis] = end - begin;
  Array out(os);
  const Index chunk = (end - begin) * sp.inner;
  for (Index o = 0; o < sp.outer; ++o) {
    out.data.segment(o * chunk, chunk) = x.value().data.segment(o * sp.len * sp.inner + begin * sp.inner, chunk);
  }
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, sp, begin, chunk](Tape& t, int self) {
    const auto& up = t.upstream(self);
    Eigen::VectorXd& g = t.accum(ix);
    for (Index o = 0; o < sp.outer; ++o) {
      g.segment(o * sp.len * sp.inner + begin * sp.inner, chunk) += up.segment(o * chunk, chunk);
    }
  });
}

Var embedding(Var table, std::span<const int> ids) {
  const Shape& ts = table.shape();
  require(ts.size() == 2, "embedding table must be 2-D");
  const Index d = ts[1];
  Array out({static_cast<Index>(ids.size()), d});
  std::vector<int> rows(ids.begin(), ids.end());
  for (size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] >= 0 && rows[r] < ts[0], "embedding id out of range");
    out.matrix().row(r) = table.value().matrix().row(rows[r]);
  }
  const int it = table.id();
  return table.tape().record(std::move(out), {table}, [it, rows, d](Tape& t, int self) {
    const auto up = as_matrix(t.upstream(self), static_cast<Index>(rows.size()), d);
    const Index vocab = t.value(it).size() / d;
    auto g = as_matrix(t.accum(it), vocab, d);
    for (size_t r = 0; r < rows.size(); ++r) g.row(rows[r]) += up.row(r);
  });
}

Var pick(Var x, std::span<const int> ids) {
  const Shape& s = x.shape();
  require(s.size() == 2 && static_cast<Index>(ids.size()) == s[0], "pick: needs [R, C] and R ids");
  const Index c = s[1];
  Array out({s[0]});
  std::vector<int> cols(ids.begin(), ids.end());
  for (Index r = 0; r < s[0]; ++r) {
    require(cols[r] >= 0 && cols[r] < c, "pick: column out of range");
    out.data[r] = x.value().data[r * c + cols[r]];
  }
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, cols, c](Tape& t, int self) {
    const auto& up = t.upstream(self);
    Eigen::VectorXd& g = t.accum(ix);
    for (size_t r = 0; r < cols.size(); ++r) g[r * c + cols[r]] += up[r];
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

namespace {

// cols[(c * K + ky) * K + kx, y * W + x] = in[c, y + ky - p, x + kx - p]
void im2col(const double* in, Index channels, Index h, Index w, Index k, RowMatrix& cols) {
  const Index p = k / 2;
  cols.setZero(channels * k * k, h * w);
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        double* row = cols.row((c * k + ky) * k + kx).data();
        for (Index y = 0; y < h; ++y) {
          const Index sy = y + ky - p;
          if (sy < 0 || sy >= h) continue;
          for (Index x = 0; x < w; ++x) {
            const Index sx = x + kx - p;
            if (sx >= 0 && sx < w) row[y * w + x] = in[(c * h + sy) * w + sx];
          }
        }
      }
    }
  }
}

void col2im_add(const RowMatrix& cols, Index channels, Index h, Index w, Index k, double* out) {
  const Index p = k / 2;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const double* row = cols.row((c * k + ky) * k + kx).data();
        for (Index y = 0; y < h; ++y) {
          const Index sy = y + ky - p;
          if (sy < 0 || sy >= h) continue;
          for (Index x = 0; x < w; ++x) {
            const Index sx = x + kx - p;
            if (sx >= 0 && sx < w) out[(c * h + sy) * w + sx] += row[y * w + x];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var weights, Var bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weights.shape();
  require(xs.size() == 4 && ws.size() == 4 && ws[1] == xs[1] && ws[2] == ws[3] && ws[2] % 2 == 1,
          "conv2d: input " + shape_string(xs) + ", weights " + shape_string(ws));
  require(bias.value().size() == ws[0], "conv2d: bias size");
  const Index n = xs[0], c = xs[1], h = xs[2], w = xs[3], o = ws[0], k = ws[2];
  Array out({n, o, h, w});
  const auto wm = as_matrix(weights.value().data, o, c * k * k);
  RowMatrix cols;
  for (Index s = 0; s < n; ++s) {
    im2col(x.value().data.data() + s * c * h * w, c, h, w, k, cols);
    auto om = as_matrix(out.data, n * o, h * w).middleRows(s * o, o);
    om.noalias() = wm * cols;
    om.colwise() += bias.value().data;
  }
  const int ix = x.id(), iw = weights.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, weights, bias},
                         [ix, iw, ib, n, c, h, w, o, k](Tape& t, int self) {
                           const auto up = as_matrix(t.upstream(self), n * o, h * w);
                           const auto wm = as_matrix(t.value(iw).data, o, c * k * k);
                           const bool gx = t.requires_grad(ix);
                           const bool gw = t.requires_grad(iw);
                           if (t.requires_grad(ib)) {
                             Eigen::VectorXd& gb = t.accum(ib);
                             for (Index s = 0; s < n; ++s) {
                               gb += up.middleRows(s * o, o).rowwise().sum();
                             }
                           }
                           if (!gx && !gw) return;
                           RowMatrix cols;
                           RowMatrix dcols;
                           for (Index s = 0; s < n; ++s) {
                             const auto us = up.middleRows(s * o, o);
                             if (gw) {
                               im2col(t.value(ix).data.data() + s * c * h * w, c, h, w, k, cols);
                               as_matrix(t.accum(iw), o, c * k * k).noalias() += us * cols.transpose();
                             }
                             if (gx) {
                               dcols.noalias() = wm.transpose() * us;
                               col2im_add(dcols, c, h, w, k, t.accum(ix).data() + s * c * h * w);
                             }
                           }
                         });
}

Var maxpool2d(Var x) {
  const Shape& xs = x.shape();
  require(xs.size() == 4 && xs[2] >= 2 && xs[3] >= 2, "maxpool2d: input " + shape_string(xs));
  const Index planes = xs[0] * xs[1], h = xs[2], w = xs[3], oh = h / 2, ow = w / 2;
  Array out({xs[0], xs[1], oh, ow});
  std::vector<Index> arg(static_cast<size_t>(out.size()));
  const double* in = x.value().data.data();
  for (Index p = 0; p < planes; ++p) {
    for (Index y = 0; y < oh; ++y) {
      for (Index xx = 0; xx < ow; ++xx) {
        Index best = p * h * w + (2 * y) * w + 2 * xx;
        for (Index dy = 0; dy < 2; ++dy) {
          for (Index dx = 0; dx < 2; ++dx) {
            const Index idx = p * h * w + (2 * y + dy) * w + 2 * xx + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const Index o = (p * oh + y) * ow + xx;
        out.data[o] = in[best];
        arg[o] = best;
      }
    }
  }
  const int ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, arg = std::move(arg)](Tape& t, int self) {
    const auto& up = t.upstream(self);
    Eigen::VectorXd& g = t.accum(ix);
    for (size_t o = 0; o < arg.size(); ++o) g[arg[o]] += up[o];
  });
}

// ---------------------------------------------------------------------------
// Attention

namespace {

struct AttnDims {
  Index groups, lq, lk, d, dh;
};

AttnDims attn_dims(const Shape& qs, const Shape& ks, int heads) {
  require(qs.size() == 3 && ks.size() == 3 && qs[0] == ks[0] && qs[2] == ks[2],
          "attention: q " + shape_string(qs) + ", k " + shape_string(ks));
  require(heads > 0 && qs[2] % heads == 0, "attention: width not divisible by heads");
  return {qs[0], qs[1], ks[1], qs[2], qs[2] / heads};
}

// Row-softmax of the scaled scores for one (group, head).
RowMatrix attention_probs(const double* q, const double* k, const AttnDims& a, Index head,
                          bool causal, Index offset) {
  const Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>> qh(q + head * a.dh, a.lq, a.dh,
                                                                Eigen::OuterStride<>(a.d));
  const Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>> kh(k + head * a.dh, a.lk, a.dh,
                                                                Eigen::OuterStride<>(a.d));
  RowMatrix s = (qh * kh.transpose()) / std::sqrt(static_cast<double>(a.dh));
  for (Index r = 0; r < a.lq; ++r) {
    const Index visible = causal ? std::min(a.lk, r + offset + 1) : a.lk;
    require(visible > 0, "attention: a query sees no keys");
    auto row = s.row(r);
    const double mx = row.head(visible).maxCoeff();
    row.head(visible) = (row.head(visible).array() - mx).exp();
    row.tail(a.lk - visible).setZero();
    row /= row.sum();
  }
  return s;
}

}  // namespace

RowMatrix causal_mask(Index n) {
  RowMatrix m = RowMatrix::Zero(n, n);
  for (Index r = 0; r < n; ++r) m.row(r).head(r + 1).setOnes();
  return m;
}

Array attention_weights(const Array& q, const Array& k, int heads, bool causal, Index offset) {
  const AttnDims a = attn_dims(q.shape, k.shape, heads);
  Array out({a.groups, heads, a.lq, a.lk});
  for (Index g = 0; g < a.groups; ++g) {
    for (Index h = 0; h < heads; ++h) {
      RowMatrix p = attention_probs(q.data.data() + g * a.lq * a.d, k.data.data() + g * a.lk * a.d,
                                    a, h, causal, offset);
      as_matrix(out.data, a.groups * heads * a.lq, a.lk).middleRows((g * heads + h) * a.lq, a.lq) = p;
    }
  }
  return out;
}

Var attention(Var q, Var k, Var v, int heads, bool causal, Index offset) {
  const AttnDims a = attn_dims(q.shape(), k.shape(), heads);
  require(v.shape() == k.shape(), "attention: v must match k");
  using Strided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
  const Eigen::OuterStride<> stride(a.d);

  Array out(q.shape());
  std::vector<RowMatrix> probs(static_cast<size_t>(a.groups * heads));
  for (Index g = 0; g < a.groups; ++g) {
    const double* qg = q.value().data.data() + g * a.lq * a.d;
    const double* kg = k.value().data.data() + g * a.lk * a.d;
    const double* vg = v.value().data.data() + g * a.lk * a.d;
    double* og = out.data.data() + g * a.lq * a.d;
    for (Index h = 0; h < heads; ++h) {
      RowMatrix& p = probs[g * heads + h];
      p = attention_probs(qg, kg, a, h, causal, offset);
      StridedMut(og + h * a.dh, a.lq, a.dh, stride).noalias() =
          p * Strided(vg + h * a.dh, a.lk, a.dh, stride);
    }
  }

  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      std::move(out), {q, k, v},
      [iq, ik, iv, a, heads, probs = std::move(probs)](Tape& t, int self) {
        using Strided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
        using StridedMut = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
        const Eigen::OuterStride<> stride(a.d);
        const double inv = 1.0 / std::sqrt(static_cast<double>(a.dh));
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
        double* dq = gq ? t.accum(iq).data() : nullptr;
        double* dk = gk ? t.accum(ik).data() : nullptr;
        double* dv = gv ? t.accum(iv).data() : nullptr;
        const double* up = t.upstream(self).data();
        for (Index g = 0; g < a.groups; ++g) {
          const Index qo = g * a.lq * a.d, ko = g * a.lk * a.d;
          for (Index h = 0; h < heads; ++h) {
            const RowMatrix& p = probs[g * heads + h];
            const Strided dout(up + qo + h * a.dh, a.lq, a.dh, stride);
            const Strided qh(t.value(iq).data.data() + qo + h * a.dh, a.lq, a.dh, stride);
            const Strided kh(t.value(ik).data.data() + ko + h * a.dh, a.lk, a.dh, stride);
            const Strided vh(t.value(iv).data.data() + ko + h * a.dh, a.lk, a.dh, stride);
            if (gv) StridedMut(dv + ko + h * a.dh, a.lk, a.dh, stride).noalias() += p.transpose() * dout;
            if (!gq && !gk) continue;
            RowMatrix dp = dout * vh.transpose();
            RowMatrix ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
            ds *= inv;
            if (gq) StridedMut(dq + qo + h * a.dh, a.lq, a.dh, stride).noalias() += ds * kh;
            if (gk) StridedMut(dk + ko + h * a.dh, a.lk, a.dh, stride).noalias() += ds.transpose() * qh;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Recurrent cell

std::pair<Var, Var> lstm_step(Var x, Var h, Var c, const LstmWeights& w) {
  const Shape& hs = h.shape();
  require(hs.size() == 2 && c.shape() == hs, "lstm_step: h and c must be [B, H] alike");
  const Index hidden = hs[1];
  require(w.recurrent.shape() == Shape{hidden, 4 * hidden}, "lstm_step: recurrent weights");
  require(w.input.shape().size() == 2 && w.input.shape()[1] == 4 * hidden &&
              x.shape().size() == 2 && x.shape()[1] == w.input.shape()[0] && x.shape()[0] == hs[0],
          "lstm_step: input weights " + shape_string(w.input.shape()) + " vs x " +
              shape_string(x.shape()));
  Var gates = add_bias(add(matmul(x, w.input), matmul(h, w.recurrent)), w.bias);
  Var i = sigmoid(slice(gates, 1, 0, hidden));
  Var f = sigmoid(slice(gates, 1, hidden, 2 * hidden));
  Var g = tanh(slice(gates, 1, 2 * hidden, 3 * hidden));
  Var o = sigmoid(slice(gates, 1, 3 * hidden, 4 * hidden));
  Var c_next = add(mul(f, c), mul(i, g));
  Var h_next = mul(o, tanh(c_next));
  return {h_next, c_next};
}

// ---------------------------------------------------------------------------

double grad_check(const ScalarFn& f, const std::vector<Array>& inputs, double eps,
                  Index max_coords) {
  std::vector<Array> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Array& a : inputs) vars.push_back(tape.variable(a));
    Var out = f(tape, vars);
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }
  auto evaluate = [&](const std::vector<Array>& xs) {
    Tape tape;
    tape.set_grad_enabled(false);
    std::vector<Var> vars;
    for (const Array& a : xs) vars.push_back(tape.constant(a));
    return f(tape, vars).value().item();
  };

  double worst = 0.0;
  std::vector<Array> xs = inputs;
  for (size_t k = 0; k < xs.size(); ++k) {
    const Index n = xs[k].size();
    const Index stride = (max_coords > 0 && n > max_coords) ? (n + max_coords - 1) / max_coords : 1;
    for (Index i = 0; i < n; i += stride) {
      const double saved = xs[k].data[i];
      xs[k].data[i] = saved + eps;
      const double fp = evaluate(xs);
      xs[k].data[i] = saved - eps;
      const double fm = evaluate(xs);
      xs[k].data[i] = saved;
      const double fd = (fp - fm) / (2.0 * eps);
      const double err = std::abs(analytic[k].data[i] - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace seqpath::ad
