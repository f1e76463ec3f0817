#pragma once

// Training losses: softmax cross-entropy over identity logits, batch-hard
// triplet loss on raw features, and the composite objective that weights the
// class head fully and the part heads by 1/p.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ohf/errors.hpp"
#include "ohf/model.hpp"
#include "ohf/ops.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

// Mean softmax cross-entropy with integer labels, computed with the
// log-sum-exp shift so large logits cannot overflow.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.dim() != 2) fail_dim("cross_entropy_mean expects [B, C] logits, got " + shape_str(logits.shape()));
  const int B = logits.extent(0), C = logits.extent(1);
  if (static_cast<int>(labels.size()) != B)
    fail_contract("got " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(B));
  for (int b = 0; b < B; ++b)
    if (labels[b] < 0 || labels[b] >= C)
      fail_contract("label " + std::to_string(labels[b]) + " outside classifier range [0, " + std::to_string(C) + ")");

  const T* v = logits.data();
  // Cache the softmax for the backward pass while accumulating the loss.
  std::vector<T> soft(static_cast<std::size_t>(B) * C);
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const T* row = v + static_cast<std::size_t>(b) * C;
    T* srow = soft.data() + static_cast<std::size_t>(b) * C;
    double mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max<double>(mx, row[c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
    const double lse = mx + std::log(sum);
    loss += lse - static_cast<double>(row[labels[b]]);
    for (int c = 0; c < C; ++c) srow[c] = static_cast<T>(std::exp(static_cast<double>(row[c]) - lse));
  }
  loss /= B;

  return Tensor<T>::make_op({1}, {static_cast<T>(loss)}, {logits},
                            [logits, labels, soft = std::move(soft), B, C](detail::Node<T>& n) {
                              if (!logits.requires_grad()) return;
                              auto& g = logits.grad();
                              const T up = n.grad[0] / static_cast<T>(B);
                              for (int b = 0; b < B; ++b) {
                                const T* srow = soft.data() + static_cast<std::size_t>(b) * C;
                                T* grow = g.data() + static_cast<std::size_t>(b) * C;
                                for (int c = 0; c < C; ++c) grow[c] += up * (srow[c] - (c == labels[b] ? T(1) : T(0)));
                              }
                            });
}

// Pairwise Euclidean distances between feature rows, with a small epsilon
// inside the square root so the gradient stays finite at zero distance.
template <typename T>
Tensor<T> pairwise_euclidean(const Tensor<T>& x, T eps = T(1e-12)) {
  if (x.dim() != 2) fail_dim("pairwise_euclidean expects [B, d] features, got " + shape_str(x.shape()));
  const int B = x.extent(0), d = x.extent(1);
  const T* v = x.data();
  std::vector<T> out(static_cast<std::size_t>(B) * B, T(0));
  for (int i = 0; i < B; ++i)
    for (int j = i + 1; j < B; ++j) {
      const T* ri = v + static_cast<std::size_t>(i) * d;
      const T* rj = v + static_cast<std::size_t>(j) * d;
      double s = 0.0;
      for (int k = 0; k < d; ++k) {
        const double e = static_cast<double>(ri[k]) - static_cast<double>(rj[k]);
        s += e * e;
      }
      const T dist = static_cast<T>(std::sqrt(s + static_cast<double>(eps)));
      out[static_cast<std::size_t>(i) * B + j] = dist;
      out[static_cast<std::size_t>(j) * B + i] = dist;
    }
  for (int i = 0; i < B; ++i) out[static_cast<std::size_t>(i) * B + i] = static_cast<T>(std::sqrt(static_cast<double>(eps)));

  return Tensor<T>::make_op({B, B}, std::move(out), {x}, [x, B, d](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    const T* v = x.data();
    // d(i,j) = sqrt(sum_k (x_ik - x_jk)^2 + eps), so
    // ∂d/∂x_ik = (x_ik - x_jk) / d(i,j); the diagonal has zero gradient.
    for (int i = 0; i < B; ++i)
      for (int j = 0; j < B; ++j) {
        if (i == j) continue;
        const T up = n.grad[static_cast<std::size_t>(i) * B + j];
        if (up == T(0)) continue;
        const T dist = n.value[static_cast<std::size_t>(i) * B + j];
        const T* ri = v + static_cast<std::size_t>(i) * d;
        const T* rj = v + static_cast<std::size_t>(j) * d;
        T* gi = g.data() + static_cast<std::size_t>(i) * d;
        T* gj = g.data() + static_cast<std::size_t>(j) * d;
        for (int k = 0; k < d; ++k) {
          const T e = up * (ri[k] - rj[k]) / dist;
          gi[k] += e;
          gj[k] -= e;
        }
      }
  });
}

// Batch-hard triplet loss: per anchor, the farthest same-identity row and the
// nearest different-identity row; mean over anchors of the hinge
// max(0, d_pos - d_neg + margin). Gradients flow only through the selected
// pairs.
template <typename T>
Tensor<T> batch_hard_triplet(const Tensor<T>& features, const std::vector<int>& labels, T margin) {
  if (margin < T(0)) fail_config("triplet margin must be nonnegative");
  const int B = features.extent(0);
  if (static_cast<int>(labels.size()) != B)
    fail_contract("got " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(B));

  auto dist = pairwise_euclidean(features);
  const T* dv = dist.data();

  std::vector<int> hardest_pos(B, -1), hardest_neg(B, -1);
  for (int a = 0; a < B; ++a) {
    const T* row = dv + static_cast<std::size_t>(a) * B;
    for (int j = 0; j < B; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (hardest_pos[a] < 0 || row[j] > row[hardest_pos[a]]) hardest_pos[a] = j;
      } else {
        if (hardest_neg[a] < 0 || row[j] < row[hardest_neg[a]]) hardest_neg[a] = j;
      }
    }
    if (hardest_pos[a] < 0)
      fail_contract("anchor " + std::to_string(a) + " (identity " + std::to_string(labels[a]) +
                    ") has no positive in the batch; PK sampling requires K >= 2");
    if (hardest_neg[a] < 0) fail_contract("the batch contains a single identity; triplets need a negative");
  }

  double loss = 0.0;
  std::vector<char> active(static_cast<std::size_t>(B), 0);
  for (int a = 0; a < B; ++a) {
    const double h = static_cast<double>(dv[static_cast<std::size_t>(a) * B + hardest_pos[a]]) -
                     static_cast<double>(dv[static_cast<std::size_t>(a) * B + hardest_neg[a]]) +
                     static_cast<double>(margin);
    if (h > 0.0) {
      loss += h;
      active[static_cast<std::size_t>(a)] = 1;
    }
  }
  loss /= B;

  return Tensor<T>::make_op({1}, {static_cast<T>(loss)}, {dist},
                            [dist, hardest_pos = std::move(hardest_pos), hardest_neg = std::move(hardest_neg),
                             active = std::move(active), B](detail::Node<T>& n) {
                              if (!dist.requires_grad()) return;
                              auto& g = dist.grad();
                              const T up = n.grad[0] / static_cast<T>(B);
                              for (int a = 0; a < B; ++a) {
                                if (!active[static_cast<std::size_t>(a)]) continue;
                                g[static_cast<std::size_t>(a) * B + hardest_pos[a]] += up;
                                g[static_cast<std::size_t>(a) * B + hardest_neg[a]] -= up;
                              }
                            });
}

// Per-head loss components, kept separate for the training log.
template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  T ce_cls = T(0);
  T tri_cls = T(0);
  T parts = T(0);  // mean over parts of (CE + triplet)
};

// Composite objective: (CE + triplet) on the class head plus the mean over
// part heads of the same pair. Cross-entropy consumes logits, the triplet
// loss the raw (pre-batch-norm) features.
template <typename T>
LossBreakdown<T> total_loss(const HeadOutput<T>& cls, const std::vector<HeadOutput<T>>& parts,
                            const std::vector<int>& labels, T margin) {
  LossBreakdown<T> out;
  auto ce = cross_entropy_mean(cls.logits, labels);
  auto tri = batch_hard_triplet(cls.f_triplet, labels, margin);
  out.ce_cls = ce.item();
  out.tri_cls = tri.item();
  out.total = add(ce, tri);
  if (!parts.empty()) {
    Tensor<T> part_sum;
    for (const auto& p : parts) {
      auto term = add(cross_entropy_mean(p.logits, labels), batch_hard_triplet(p.f_triplet, labels, margin));
      part_sum = part_sum.defined() ? add(part_sum, term) : term;
    }
    auto part_mean = scale(part_sum, T(1) / static_cast<T>(parts.size()));
    out.parts = part_mean.item();
    out.total = add(out.total, part_mean);
  }
  return out;
}

}  // namespace ohf
