#pragma once

// Shared helpers for the test suites: tensor fillers backed by the library
// RNG and approximate comparison over whole tensors.

#include <cmath>
#include <vector>

#include "ohf/rng.hpp"
#include "ohf/tensor.hpp"

namespace ohftest {

template <typename T>
ohf::Tensor<T> random_tensor(std::vector<int> shape, ohf::Rng& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = false) {
  std::vector<T> v(static_cast<std::size_t>(ohf::shape_numel(shape)));
  for (auto& e : v) e = static_cast<T>(rng.uniform(lo, hi));
  return ohf::Tensor<T>::from_values(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
double max_abs_diff(const ohf::Tensor<T>& a, const ohf::Tensor<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i)
    worst = std::max(worst, std::fabs(static_cast<double>(a.values()[i]) - static_cast<double>(b.values()[i])));
  return worst;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return worst;
}

}  // namespace ohftest
