#pragma once

// Central-difference gradient verification. The function under test is
// re-evaluated with each leaf coordinate nudged by ±eps while graph recording
// is off, and the numeric slope is compared against one reverse-mode sweep.

#include <cmath>
#include <functional>
#include <vector>

#include "ohf/errors.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

// Returns max over all coordinates of all leaves of
// |analytic − numeric| / max(1, |analytic|, |numeric|).
// `f` must be deterministic and scalar-valued; leaves must be graph leaves.
template <typename T>
double finite_diff_check(const std::function<Tensor<T>()>& f, const std::vector<Tensor<T>>& leaves, T eps = T(1e-3)) {
  for (const auto& leaf : leaves) leaf.zero_grad();
  Tensor<T> loss = f();
  if (loss.numel() != 1) fail_contract("finite_diff_check needs a scalar-valued function, got " + shape_str(loss.shape()));
  loss.backward();

  std::vector<std::vector<T>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad());

  double worst = 0.0;
  NoGradGuard eval_only;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<T> leaf = leaves[li];  // handles share storage; copy drops constness
    auto& vals = leaf.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const T keep = vals[i];
      vals[i] = keep + eps;
      const double up = static_cast<double>(f().item());
      vals[i] = keep - eps;
      const double down = static_cast<double>(f().item());
      vals[i] = keep;
      const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
      const double a = static_cast<double>(analytic[li][i]);
      const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace ohf
