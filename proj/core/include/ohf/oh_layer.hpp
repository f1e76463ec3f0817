#pragma once

// One omni-relational high-order layer: plain multi-head attention over all
// tokens (first order), then repeated downsample-and-attend steps building
// coarser orders, finishing with a fusion feed-forward block that folds every
// order back onto the full-resolution sequence.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ohf/attention.hpp"
#include "ohf/errors.hpp"
#include "ohf/flops.hpp"
#include "ohf/lrp.hpp"
#include "ohf/ops.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

inline constexpr double kNormEps = 1e-5;

// How high orders obtain their attention scores: Full computes fresh Q/K
// projections per order; Shared pools the first-order score matrix down to
// the coarse grid and re-weights it with a learned prior.
enum class ShareMode { Full, Shared };

// Axis the prior matrix acts on in shared mode. Key mixes attended positions
// (right multiplication); Query mixes attending positions.
enum class PriorAxis { Key, Query };

inline std::string share_mode_name(ShareMode m) { return m == ShareMode::Full ? "full" : "shared"; }

// ---------------------------------------------------------------------------
// Score sharing
// ---------------------------------------------------------------------------

namespace detail {

// Fine index -> coarse index under the same floor map nearest upsampling
// uses, so pooling here and upsampling in fusion are exact inverses.
inline int coarse_index(int i, int fine, int coarse) {
  return static_cast<int>((static_cast<std::int64_t>(i) * coarse) / fine);
}

inline void check_halving_chain(int h, int w, int dst_h, int dst_w) {
  int ch = h, cw = w;
  while (ch != dst_h || cw != dst_w) {
    if (ch < dst_h || cw < dst_w)
      fail_config("grid " + std::to_string(dst_h) + "x" + std::to_string(dst_w) +
                  " is not on the halving chain of " + std::to_string(h) + "x" + std::to_string(w));
    ch = (ch + 1) / 2;
    cw = (cw + 1) / 2;
  }
}

}  // namespace detail

// Pools a fine spatial score matrix s1[B, H, h·w, h·w] (class row/column
// already removed) down to the coarse token grid by block means over both the
// query and the key axis. Blocks are the preimages of the nearest-neighbor
// index map; softmax is applied afterward by the caller.
template <typename T>
Tensor<T> share_scores(const Tensor<T>& s1, int src_h, int src_w, int dst_h, int dst_w) {
  if (s1.dim() != 4) fail_dim("share_scores expects [B, H, n, n], got " + shape_str(s1.shape()));
  const int B = s1.extent(0), H = s1.extent(1), n1 = s1.extent(2);
  if (s1.extent(3) != n1 || n1 != src_h * src_w)
    fail_dim("score matrix " + shape_str(s1.shape()) + " does not cover a " + std::to_string(src_h) + "x" +
             std::to_string(src_w) + " token grid");
  detail::check_halving_chain(src_h, src_w, dst_h, dst_w);
  const int n2 = dst_h * dst_w;

  // Fine token -> coarse token, and how many fine tokens each block holds.
  std::vector<int> tmap(static_cast<std::size_t>(n1));
  std::vector<int> cnt(static_cast<std::size_t>(n2), 0);
  for (int r = 0; r < src_h; ++r)
    for (int c = 0; c < src_w; ++c) {
      const int j = detail::coarse_index(r, src_h, dst_h) * dst_w + detail::coarse_index(c, src_w, dst_w);
      tmap[static_cast<std::size_t>(r * src_w + c)] = j;
      cnt[static_cast<std::size_t>(j)]++;
    }

  // Two passes: average fine query rows into coarse rows, then fine key
  // columns into coarse columns. Every source entry is touched exactly once
  // per pass, which is also the work the profiler reports.
  count_madds(static_cast<std::int64_t>(B) * H * (static_cast<std::int64_t>(n1) * n1 + static_cast<std::int64_t>(n2) * n1));
  std::vector<T> out(static_cast<std::size_t>(B) * H * n2 * n2, T(0));
  {
    const T* ps = s1.data();
    std::vector<double> rows(static_cast<std::size_t>(n2) * n1);
    for (std::int64_t bh = 0; bh < static_cast<std::int64_t>(B) * H; ++bh) {
      std::fill(rows.begin(), rows.end(), 0.0);
      const T* src = ps + bh * n1 * n1;
      for (int q = 0; q < n1; ++q) {
        double* dst = rows.data() + static_cast<std::size_t>(tmap[static_cast<std::size_t>(q)]) * n1;
        const T* in = src + static_cast<std::int64_t>(q) * n1;
        for (int k = 0; k < n1; ++k) dst[k] += in[k];
      }
      T* o = out.data() + bh * n2 * n2;
      for (int q2 = 0; q2 < n2; ++q2) {
        std::vector<double> acc(static_cast<std::size_t>(n2), 0.0);
        const double* in = rows.data() + static_cast<std::size_t>(q2) * n1;
        for (int k = 0; k < n1; ++k) acc[static_cast<std::size_t>(tmap[static_cast<std::size_t>(k)])] += in[k];
        for (int k2 = 0; k2 < n2; ++k2)
          o[q2 * n2 + k2] = static_cast<T>(acc[static_cast<std::size_t>(k2)] /
                                           (static_cast<double>(cnt[static_cast<std::size_t>(q2)]) * cnt[static_cast<std::size_t>(k2)]));
      }
    }
  }
  return Tensor<T>::make_op(
      {B, H, n2, n2}, std::move(out), {s1},
      [s1, B, H, n1, n2, tmap = std::move(tmap), cnt = std::move(cnt)](detail::Node<T>& nd) {
        if (!s1.requires_grad()) return;
        auto& gs = s1.grad();
        const T* g = nd.grad.data();
        for (std::int64_t bh = 0; bh < static_cast<std::int64_t>(B) * H; ++bh)
          for (int q = 0; q < n1; ++q) {
            const int q2 = tmap[static_cast<std::size_t>(q)];
            for (int k = 0; k < n1; ++k) {
              const int k2 = tmap[static_cast<std::size_t>(k)];
              gs[static_cast<std::size_t>((bh * n1 + q) * n1 + k)] +=
                  g[(bh * n2 + q2) * n2 + k2] /
                  static_cast<T>(cnt[static_cast<std::size_t>(q2)] * cnt[static_cast<std::size_t>(k2)]);
            }
          }
      });
}

// Learned prior over the shared scores: a square matrix per order and layer,
// identity-initialized so training starts from plain score reuse.
template <typename T>
Tensor<T> prior_mix(const Tensor<T>& s_shared, const Tensor<T>& w_prior, PriorAxis axis = PriorAxis::Key) {
  if (w_prior.dim() != 2 || w_prior.extent(0) != w_prior.extent(1))
    fail_dim("prior matrix must be square, got " + shape_str(w_prior.shape()));
  if (s_shared.dim() != 4 || s_shared.extent(3) != w_prior.extent(0))
    fail_dim("prior extent " + shape_str(w_prior.shape()) + " does not match scores " + shape_str(s_shared.shape()));
  return axis == PriorAxis::Key ? matmul(s_shared, w_prior) : matmul(w_prior, s_shared);
}

// ---------------------------------------------------------------------------
// Layer parameters and state
// ---------------------------------------------------------------------------

template <typename T>
struct FfnParams {
  Tensor<T> w1, b1, w2, b2;  // [d, r·d], [r·d], [r·d, d], [d]
};

template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const FfnParams<T>& p) {
  return add_broadcast(matmul(gelu(add_broadcast(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

// Parameters owned by one high order (2, 3, ...). Full mode uses w_q/w_k/w_v;
// shared mode owns only w_v and the prior (no query/key projections at all).
template <typename T>
struct OrderParams {
  LrpParams<T> lrp;
  Tensor<T> w_q, w_k, w_v;
  Tensor<T> w_prior;
};

template <typename T>
struct OhLayerParams {
  ProjectionSet<T> first;
  Tensor<T> ln1_g, ln1_b;  // pre-attention norm
  Tensor<T> ln2_g, ln2_b;  // pre-FFN norm after fusion
  FfnParams<T> ffn;
  std::vector<OrderParams<T>> high;  // orders 2 .. m; empty means m = 1
  ShareMode mode = ShareMode::Full;
  PriorAxis prior_axis = PriorAxis::Key;
  // Reuses the key projection as the value projection in full mode,
  // reproducing the literal high-order value equation for comparison.
  bool tie_vk = false;
};

// Feature and bookkeeping for one order of one layer invocation.
template <typename T>
struct OrderState {
  int order = 1;
  Tensor<T> feature;  // [B, n, d] tokens; order 1 keeps the class token
  int h = 0, w = 0;   // spatial grid of the non-class tokens
  Tensor<T> scores;   // [B, heads, n, n] pre-softmax
};

// Multiply-adds spent computing high-order attention scores (the part that
// differs between Full and Shared mode). First-order work is identical in
// both modes and excluded.
struct OhLayerStats {
  std::int64_t score_madds = 0;
};

// ---------------------------------------------------------------------------
// Layer stages
// ---------------------------------------------------------------------------

template <typename T>
OrderState<T> first_order(const Tensor<T>& x, const OhLayerParams<T>& params, int h, int w,
                          std::vector<AttentionRecord<T>>* capture = nullptr, int layer_index = -1) {
  if (x.dim() != 3) fail_dim("layer input must be [B, T, d], got " + shape_str(x.shape()));
  if (x.extent(1) != 1 + h * w)
    fail_contract("token count " + std::to_string(x.extent(1)) + " != 1 + " + std::to_string(h) + "x" +
                  std::to_string(w) + "; the class token must be present");
  Tensor<T> s;
  auto normed = layer_norm(x, params.ln1_g, params.ln1_b, static_cast<T>(kNormEps));
  auto a1 = add(x, mhsa(normed, params.first, capture, layer_index, 1, &s));
  return OrderState<T>{1, a1, h, w, s};
}

template <typename T>
OrderState<T> high_order_step(const OrderState<T>& prev, const OrderParams<T>& op, const OhLayerParams<T>& params,
                              const Tensor<T>& s1_spatial, int src_h, int src_w, OhLayerStats* stats = nullptr,
                              std::vector<AttentionRecord<T>>* capture = nullptr, int layer_index = -1) {
  // The identity variant keeps the grid; every real branch halves it.
  const bool downsamples = !(op.lrp.branches.size() == 1 && op.lrp.branches[0] == LrpBranch::None);
  if (downsamples && (prev.h < 2 || prev.w < 2))
    fail_config("order " + std::to_string(prev.order) + " grid " + std::to_string(prev.h) + "x" +
                std::to_string(prev.w) + " is too small to downsample");
  auto spatial = prev.order == 1 ? slice_tokens(prev.feature, 1, prev.feature.extent(1)) : prev.feature;
  auto tok = lrp_tokens(spatial, prev.h, prev.w, op.lrp);
  const int h2 = downsamples ? (prev.h + 1) / 2 : prev.h;
  const int w2 = downsamples ? (prev.w + 1) / 2 : prev.w;
  const int heads = params.first.heads;
  const int d = tok.extent(2);
  const int dh = d / heads;

  Tensor<T> s;
  {
    std::optional<MaddScope> scope;
    if (stats) scope.emplace(stats->score_madds);
    if (params.mode == ShareMode::Full) {
      auto q = split_heads(matmul(tok, op.w_q), heads);
      auto k = split_heads(matmul(tok, op.w_k), heads);
      s = scale(matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    } else {
      // Pool the first order's spatial scores straight to this order's grid,
      // however many halvings separate them, then apply the learned prior.
      s = prior_mix(share_scores(s1_spatial, src_h, src_w, h2, w2), op.w_prior, params.prior_axis);
    }
  }
  auto probs = softmax_lastdim(s);
  auto v = split_heads(matmul(tok, (params.mode == ShareMode::Full && params.tie_vk) ? op.w_k : op.w_v), heads);
  auto a = merge_heads(matmul(probs, v));
  capture_attention(capture, layer_index, prev.order + 1, s, probs);
  return OrderState<T>{prev.order + 1, a, h2, w2, s};
}

// Upsamples every high order back to the first-order grid, prefixes the zero
// class-position row, sums onto the first order, then LayerNorm -> FFN with a
// residual skip around the FFN.
template <typename T>
Tensor<T> fuse(const std::vector<OrderState<T>>& states, const OhLayerParams<T>& params) {
  if (states.empty()) fail_contract("fuse needs at least the first-order state");
  const auto& first = states[0];
  const int B = first.feature.extent(0), d = first.feature.extent(2);
  Tensor<T> acc = first.feature;
  for (std::size_t i = 1; i < states.size(); ++i) {
    const auto& st = states[i];
    if (st.feature.extent(1) != st.h * st.w)
      fail_contract("order " + std::to_string(st.order) + " feature does not match its recorded grid " +
                    std::to_string(st.h) + "x" + std::to_string(st.w));
    auto up = nearest_upsample2d(tokens_to_grid(st.feature, st.h, st.w), first.h, first.w);
    auto padded = concat_tokens(Tensor<T>::zeros({B, 1, d}), grid_to_tokens(up));
    acc = add(acc, padded);
  }
  auto normed = layer_norm(acc, params.ln2_g, params.ln2_b, static_cast<T>(kNormEps));
  return add(acc, ffn(normed, params.ffn));
}

// Full layer: first order, the chain of high orders, fusion. Token count and
// width are preserved for every order count and both score modes.
template <typename T>
Tensor<T> oh_layer(const Tensor<T>& x, const OhLayerParams<T>& params, int h, int w,
                   std::vector<AttentionRecord<T>>* capture = nullptr, OhLayerStats* stats = nullptr,
                   int layer_index = -1) {
  std::vector<OrderState<T>> states;
  states.push_back(first_order(x, params, h, w, capture, layer_index));
  Tensor<T> s1_spatial;
  if (!params.high.empty() && params.mode == ShareMode::Shared)
    s1_spatial = slice_last2(states[0].scores, 1, 1 + h * w, 1, 1 + h * w);
  for (const auto& op : params.high)
    states.push_back(high_order_step(states.back(), op, params, s1_spatial, h, w, stats, capture, layer_index));
  return fuse(states, params);
}

}  // namespace ohf
