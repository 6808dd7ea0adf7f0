#include "seqpath/order_invariance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "seqpath/core.hpp"

namespace seqpath {

namespace {

int table_size(int n) {
  int s = 1;
  for (int i = 0; i < n; ++i) s *= kNumActions;
  return s;
}

std::vector<int> digits(int index, int n) {
  std::vector<int> a(n);
  for (int i = n - 1; i >= 0; --i) {
    a[i] = index % kNumActions;
    index /= kNumActions;
  }
  return a;
}

void check(const TabularJoint& joint) {
  if (joint.n < 1 || joint.n > 6 || static_cast<int>(joint.p.size()) != table_size(joint.n)) {
    throw Error(ErrorCode::ShapeMismatch, "joint table must hold 5^n entries");
  }
  double total = 0.0;
  for (double v : joint.p) {
    if (!(v >= 0.0)) throw Error(ErrorCode::NotNormalized, "negative or NaN probability");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw Error(ErrorCode::NotNormalized, "probabilities sum to " + std::to_string(total));
  }
}

void check_order(std::span<const int> order, int n) {
  std::vector<int> sorted(order.begin(), order.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expect(n);
  std::iota(expect.begin(), expect.end(), 0);
  if (sorted != expect) throw Error(ErrorCode::BadOrder, "decision order is not a permutation");
}

}  // namespace

std::vector<double> recompose(const TabularJoint& joint, std::span<const int> order) {
  check(joint);
  const int n = joint.n;
  check_order(order, n);
  const int size = table_size(n);

  // marginal[k][key] = P(a_order[0..k)) where key packs those k actions.
  std::vector<std::vector<double>> marginal(n + 1);
  for (int k = 0; k <= n; ++k) marginal[k].assign(table_size(k), 0.0);
  for (int idx = 0; idx < size; ++idx) {
    const std::vector<int> a = digits(idx, n);
    int key = 0;
    marginal[0][0] += joint.p[idx];
    for (int k = 0; k < n; ++k) {
      key = key * kNumActions + a[order[k]];
      marginal[k + 1][key] += joint.p[idx];
    }
  }

  std::vector<double> out(size, 0.0);
  for (int idx = 0; idx < size; ++idx) {
    const std::vector<int> a = digits(idx, n);
    double prob = 1.0;
    int key = 0;
    for (int k = 0; k < n && prob != 0.0; ++k) {
      const double denom = marginal[k][key];
      key = key * kNumActions + a[order[k]];
      prob = denom > 0.0 ? prob * (marginal[k + 1][key] / denom) : 0.0;
    }
    out[idx] = prob;
  }
  return out;
}

double verify_order_invariance(const TabularJoint& joint, std::span<const int> sigma,
                               std::span<const int> nu) {
  const std::vector<double> ps = recompose(joint, sigma);
  const std::vector<double> pn = recompose(joint, nu);
  double worst = 0.0;
  for (size_t i = 0; i < ps.size(); ++i) worst = std::max(worst, std::abs(ps[i] - pn[i]));
  return worst;
}

}  // namespace seqpath
