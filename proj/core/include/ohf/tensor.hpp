#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ohf/errors.hpp"

namespace ohf {

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

// Thread-local switch that disables graph recording (used for evaluation and
// for the numeric side of gradient checks).
namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor;

namespace detail {

// One recorded operation (or leaf) of the backward graph. Parents precede a
// node in execution order, so a reverse topological walk replays adjoints
// with every node visited exactly once.
template <typename T>
struct Node {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized lazily, same extent as value when present
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_step;  // reads this->grad, accumulates into parents

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
inline void axpy(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// Dense row-major tensor of floats (float for the model, double for gradient
// checking) behaving as a cheap shared handle. Values are immutable after an
// op produces them; only gradient buffers and leaf parameters mutate between
// forward passes.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, /*fill=*/T(0));
  }

  static Tensor full(std::vector<int> shape, T v, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, v);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from_values({}, {v}, requires_grad); }

  static Tensor from_values(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
    check_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
      fail_dim("tensor data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim() const { return static_cast<int>(node_->shape.size()); }
  int extent(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const T* data() const { return node_->value.data(); }
  const std::vector<T>& values() const { return node_->value; }

  // Mutable access to a leaf's storage (parameter updates, gradient-check
  // perturbations). Calling this on an op output would silently desynchronize
  // the recorded graph, hence the leaf check.
  std::vector<T>& mutable_values() {
    if (!node_->parents.empty()) fail_contract("mutable_values() is only valid on leaf tensors");
    return node_->value;
  }

  std::vector<T>& grad() const { return node_->ensure_grad(); }
  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
  void zero_grad() const {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) fail_contract("item() requires a single-element tensor, got shape " + shape_str(shape()));
    return node_->value[0];
  }

  Tensor detach() const { return from_values(node_->shape, node_->value, false); }

  // Reverse-mode sweep from a scalar. Gradients accumulate additively into
  // every reachable leaf that requires them; repeated calls without
  // zero_grad() keep accumulating. Interior (op-output) gradients are scoped
  // to one sweep and reset here so a second sweep does not compound them.
  void backward() const {
    if (!defined()) fail_contract("backward() on an undefined tensor");
    if (numel() != 1) fail_contract("backward() requires a scalar loss, got shape " + shape_str(shape()));
    if (!node_->requires_grad) fail_contract("backward() on a tensor that does not require gradients");

    std::vector<detail::Node<T>*> order;
    topo_order(node_.get(), order);
    for (detail::Node<T>* n : order)
      if (!n->parents.empty()) n->grad.assign(n->value.size(), T(0));
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* n = *it;
      if (n->backward_step && n->requires_grad) n->backward_step(*n);
    }
  }

  detail::Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node<T>>& node_ptr() const { return node_; }

  // Internal: wraps a computed result into the graph. `backward_step` may be
  // empty for pure reorderings whose parents take gradients another way.
  static Tensor make_op(std::vector<int> shape, std::vector<T> value, std::vector<Tensor> parents,
                        std::function<void(detail::Node<T>&)> backward_step) {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    node->requires_grad = needs && grad_enabled();
    if (node->requires_grad) {
      node->parents.reserve(parents.size());
      for (const auto& p : parents) node->parents.push_back(p.node_ptr());
      node->backward_step = std::move(backward_step);
    }
    return Tensor(std::move(node));
  }

 private:
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  static void check_shape(const std::vector<int>& shape) {
    for (int e : shape)
      if (e <= 0) fail_dim("tensor extents must be positive, got " + shape_str(shape));
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> values, bool requires_grad, T fill) {
    check_shape(shape);
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    values.assign(n, fill);
    return from_values(std::move(shape), std::move(values), requires_grad);
  }

  // Iterative DFS producing parents-before-node order.
  static void topo_order(detail::Node<T>* root, std::vector<detail::Node<T>*>& out) {
    std::unordered_set<detail::Node<T>*> visited;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        out.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<detail::Node<T>> node_;
};

}  // namespace ohf
