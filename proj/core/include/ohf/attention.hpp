#pragma once

// Scaled dot-product multi-head self-attention with optional capture of the
// per-head score and weight matrices for later similarity analysis.

#include <cmath>
#include <string>
#include <vector>

#include "ohf/errors.hpp"
#include "ohf/ops.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

// Query/key/value projections plus the output projection, all [d, d] with the
// head split applied after projecting (per-head width d/h for q, k and v).
template <typename T>
struct ProjectionSet {
  Tensor<T> w_q, w_k, w_v, w_o;
  int heads = 1;
};

// One head's attention matrices from one forward pass (batch element 0).
template <typename T>
struct AttentionRecord {
  int layer = -1;
  int order = -1;
  int head = -1;
  Tensor<T> weights;  // [T, T] post-softmax rows
  Tensor<T> scores;   // [T, T] pre-softmax
};

namespace detail {

// Copies batch element 0, head `h` of a [B, H, T, T] tensor into a graph-free
// [T, T] tensor.
template <typename T>
Tensor<T> head_slice(const Tensor<T>& x, int h) {
  const int H = x.extent(1), t = x.extent(2);
  std::vector<T> v(static_cast<std::size_t>(t) * t);
  const T* p = x.data() + (static_cast<std::int64_t>(h) * t) * t;
  std::copy(p, p + static_cast<std::int64_t>(t) * t, v.begin());
  (void)H;
  return Tensor<T>::from_values({t, t}, std::move(v));
}

}  // namespace detail

template <typename T>
void capture_attention(std::vector<AttentionRecord<T>>* sink, int layer, int order, const Tensor<T>& scores,
                       const Tensor<T>& weights) {
  if (!sink) return;
  for (int h = 0; h < scores.extent(1); ++h)
    sink->push_back({layer, order, h, detail::head_slice(weights, h), detail::head_slice(scores, h)});
}

// Per-head scaled dot-product scores: S = Q·K^T / sqrt(d/h).
// x[B, T, d] -> [B, h, T, T].
template <typename T>
Tensor<T> attention_scores(const Tensor<T>& x, const ProjectionSet<T>& proj) {
  if (x.dim() != 3) fail_dim("attention_scores expects [B, T, d], got " + shape_str(x.shape()));
  const int d = x.extent(2);
  if (proj.w_q.extent(0) != d)
    fail_dim("projection width " + std::to_string(proj.w_q.extent(0)) + " does not match input width " + std::to_string(d));
  if (d % proj.heads != 0)
    fail_config("width " + std::to_string(d) + " not divisible by head count " + std::to_string(proj.heads));
  const int dh = d / proj.heads;
  auto q = split_heads(matmul(x, proj.w_q), proj.heads);
  auto k = split_heads(matmul(x, proj.w_k), proj.heads);
  return scale(matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
}

// Softmax over key positions, then the weighted sum of value rows.
// scores[B, h, T, T], v[B, h, T, d_v] -> [B, h, T, d_v].
template <typename T>
Tensor<T> attention_apply(const Tensor<T>& scores, const Tensor<T>& v) {
  return matmul(softmax_lastdim(scores), v);
}

// Full multi-head block: project, attend per head, concatenate, project out.
// The caller supplies pre-norm and the residual connection. `scores_out`,
// when given, receives the pre-softmax head scores (consumed by the
// score-sharing path downstream).
template <typename T>
Tensor<T> mhsa(const Tensor<T>& x, const ProjectionSet<T>& proj, std::vector<AttentionRecord<T>>* capture = nullptr,
               int layer = -1, int order = 1, Tensor<T>* scores_out = nullptr) {
  auto s = attention_scores(x, proj);
  auto probs = softmax_lastdim(s);
  auto v = split_heads(matmul(x, proj.w_v), proj.heads);
  auto ctx = merge_heads(matmul(probs, v));
  capture_attention(capture, layer, order, s, probs);
  if (scores_out) *scores_out = s;
  return matmul(ctx, proj.w_o);
}

}  // namespace ohf
