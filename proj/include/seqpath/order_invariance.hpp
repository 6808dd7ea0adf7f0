#pragma once

#include <span>
#include <vector>

namespace seqpath {

/// Tabular joint over A^n with |A| = 5, indexed row-major with agent 0 as the
/// most significant digit.
struct TabularJoint {
  int n = 0;
  std::vector<double> p;
};

/// Chain-rule factorisation of `joint` into exact conditionals taken in
/// `order`, multiplied back together. Prefixes of probability zero give zero.
std::vector<double> recompose(const TabularJoint& joint, std::span<const int> order);

/// max_a |P_sigma(a) - P_nu(a)|. Throws NotNormalized when the table has a
/// negative entry or does not sum to 1 within 1e-9.
double verify_order_invariance(const TabularJoint& joint, std::span<const int> sigma,
                               std::span<const int> nu);

}  // namespace seqpath
