#pragma once

// SGD with momentum and decoupled-by-flag weight decay, plus the cosine
// learning-rate schedule. The momentum buffers are named after their
// parameters so checkpoints can persist them losslessly.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ohf/errors.hpp"
#include "ohf/model.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

// lr_t = lr0 * 0.5 * (1 + cos(pi * t / T)); lr0 at t=0, 0 at t=T.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0) {
  if (total_steps <= 0) fail_config("cosine schedule needs a positive total step count");
  if (step < 0 || step > total_steps)
    fail_contract("step " + std::to_string(step) + " outside the schedule [0, " + std::to_string(total_steps) + "]");
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) / static_cast<double>(total_steps)));
}

// One parameter update: v <- momentum*v + (g + wd*theta); theta <- theta - lr*v.
template <typename T>
void sgd_step(Tensor<T>& param, const std::vector<T>& grad, Tensor<T>& velocity, double lr, double momentum,
              double weight_decay) {
  if (grad.size() != param.values().size() || velocity.values().size() != param.values().size())
    fail_contract("sgd_step: gradient/velocity size does not match parameter " + shape_str(param.shape()));
  auto& v = velocity.mutable_values();
  auto& p = param.mutable_values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double g = static_cast<double>(grad[i]) + weight_decay * static_cast<double>(p[i]);
    const double vel = momentum * static_cast<double>(v[i]) + g;
    v[i] = static_cast<T>(vel);
    p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * vel);
  }
}

template <typename T>
struct Sgd {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  // One buffer per parameter, aligned with the named_params order.
  std::vector<std::pair<std::string, Tensor<T>>> velocity;

  Sgd() = default;
  Sgd(const std::vector<NamedParam<T>>& params, double momentum_, double weight_decay_)
      : momentum(momentum_), weight_decay(weight_decay_) {
    velocity.reserve(params.size());
    for (const auto& p : params) velocity.emplace_back(p.name, Tensor<T>::zeros(p.tensor.shape()));
  }

  // Applies one update to every parameter from its accumulated gradient.
  // Decay-exempt parameters (norm affines, class token) see wd = 0.
  void step(const std::vector<NamedParam<T>>& params, double lr) {
    if (params.size() != velocity.size())
      fail_contract("optimizer tracks " + std::to_string(velocity.size()) + " parameters, got " +
                    std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name != velocity[i].first)
        fail_contract("optimizer buffer '" + velocity[i].first + "' does not match parameter '" + params[i].name + "'");
      Tensor<T> t = params[i].tensor;
      sgd_step(t, t.grad(), velocity[i].second, lr, momentum, params[i].decay ? weight_decay : 0.0);
    }
  }

  void zero_grad(const std::vector<NamedParam<T>>& params) {
    for (const auto& p : params) p.tensor.zero_grad();
  }
};

}  // namespace ohf
