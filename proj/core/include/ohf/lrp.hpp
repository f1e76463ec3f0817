#pragma once

// Local relation perception: the stride-2 bridge between attention orders.
// The default composite sums a deformable-convolution branch (content-adaptive
// local relations) and a depthwise-convolution branch (fixed 2D positions).
// Alternative downsamplers (normal conv, average/max pool, identity) are
// selectable for comparison runs.

#include <cmath>
#include <string>
#include <vector>

#include "ohf/conv.hpp"
#include "ohf/errors.hpp"
#include "ohf/ops.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

enum class LrpBranch { None, Dwc, Nc, Ap, Mp, Dfc };

inline std::string lrp_branch_name(LrpBranch b) {
  switch (b) {
    case LrpBranch::None: return "none";
    case LrpBranch::Dwc: return "dwc";
    case LrpBranch::Nc: return "nc";
    case LrpBranch::Ap: return "ap";
    case LrpBranch::Mp: return "mp";
    case LrpBranch::Dfc: return "dfc";
  }
  fail_config("unknown downsampler branch");
}

// Parses a composite selector such as "dfc+dwc" or "none".
inline std::vector<LrpBranch> parse_lrp_branches(const std::string& text) {
  std::vector<LrpBranch> out;
  std::string token;
  const auto flush = [&] {
    if (token.empty()) fail_parse("empty downsampler branch in '" + text + "'");
    if (token == "none") out.push_back(LrpBranch::None);
    else if (token == "dwc") out.push_back(LrpBranch::Dwc);
    else if (token == "nc") out.push_back(LrpBranch::Nc);
    else if (token == "ap") out.push_back(LrpBranch::Ap);
    else if (token == "mp") out.push_back(LrpBranch::Mp);
    else if (token == "dfc") out.push_back(LrpBranch::Dfc);
    else fail_config("unknown downsampler branch '" + token + "'");
    token.clear();
  };
  for (char c : text) {
    if (c == '+') flush();
    else if (c != ' ') token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  flush();
  if (out.empty()) fail_parse("no downsampler branches in '" + text + "'");
  for (LrpBranch b : out)
    if (b == LrpBranch::None && out.size() > 1) fail_config("'none' cannot be combined with other branches");
  return out;
}

// 3x3 kernels, stride 2, padding 1 throughout: every branch lands on the
// (ceil(h/2), ceil(w/2)) grid, which the fusion upsampler inverts exactly.
inline constexpr int kLrpKernel = 3;
inline constexpr int kLrpStride = 2;
inline constexpr int kLrpPad = 1;

template <typename T>
struct LrpParams {
  std::vector<LrpBranch> branches{LrpBranch::Dfc, LrpBranch::Dwc};
  // Deformable branch: offset predictor (weights and bias, zero-initialized
  // so training starts at the plain-convolution degeneracy) plus the main
  // kernel. Offset channel 2t is the y shift and 2t+1 the x shift of tap t.
  Tensor<T> offset_w;  // [2·3·3, d, 3, 3]
  Tensor<T> offset_b;  // [2·3·3]
  Tensor<T> deform_w;  // [d, d/groups, 3, 3]
  int deform_groups = 1;
  Tensor<T> dw_w;  // [d, 1, 3, 3] depthwise branch
  Tensor<T> nc_w;  // [d, d, 3, 3] normal-conv branch (comparison runs only)
};

// Turns predicted offsets [B, 2K, h', w'] into absolute sample coordinates
// [B, h'·w'·K, 2] for the K taps of a kh×kw kernel anchored at each strided
// output position. Point index = (oy·w' + ox)·K + (ky·kw + kx).
template <typename T>
Tensor<T> offsets_to_coords(const Tensor<T>& offsets, int kh, int kw, int stride, int pad) {
  if (offsets.dim() != 4) fail_dim("offsets_to_coords expects [B, 2K, h, w], got " + shape_str(offsets.shape()));
  const int B = offsets.extent(0), twoK = offsets.extent(1), Ho = offsets.extent(2), Wo = offsets.extent(3);
  const int K = kh * kw;
  if (twoK != 2 * K)
    fail_dim("offset channel count " + std::to_string(twoK) + " != 2 kernel taps (" + std::to_string(2 * K) + ")");
  const int P = Ho * Wo * K;
  std::vector<T> out(static_cast<std::size_t>(B) * P * 2);
  const T* po = offsets.data();
  for (int b = 0; b < B; ++b)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        for (int t = 0; t < K; ++t) {
          const int ky = t / kw, kx = t % kw;
          const std::int64_t base = (static_cast<std::int64_t>(b) * P + (oy * Wo + ox) * K + t) * 2;
          const std::int64_t obase = ((static_cast<std::int64_t>(b) * twoK + 2 * t) * Ho + oy) * Wo + ox;
          const std::int64_t hw = static_cast<std::int64_t>(Ho) * Wo;
          out[static_cast<std::size_t>(base + 0)] = static_cast<T>(oy * stride - pad + ky) + po[obase];
          out[static_cast<std::size_t>(base + 1)] = static_cast<T>(ox * stride - pad + kx) + po[obase + hw];
        }
  return Tensor<T>::make_op({B, P, 2}, std::move(out), {offsets}, [offsets, B, twoK, Ho, Wo, K, P](detail::Node<T>& n) {
    if (!offsets.requires_grad()) return;
    auto& go = offsets.grad();
    const T* g = n.grad.data();
    const std::int64_t hw = static_cast<std::int64_t>(Ho) * Wo;
    for (int b = 0; b < B; ++b)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox)
          for (int t = 0; t < K; ++t) {
            const std::int64_t base = (static_cast<std::int64_t>(b) * P + (oy * Wo + ox) * K + t) * 2;
            const std::int64_t obase = ((static_cast<std::int64_t>(b) * twoK + 2 * t) * Ho + oy) * Wo + ox;
            go[static_cast<std::size_t>(obase)] += g[base + 0];
            go[static_cast<std::size_t>(obase + hw)] += g[base + 1];
          }
  });
}

// Lays a grouped kernel [O, C/g, kh, kw] out as the dense row matrix
// [O, C·kh·kw] the sampled-tap contraction multiplies against; channels
// outside a filter's group stay zero.
template <typename T>
Tensor<T> expand_grouped_weight(const Tensor<T>& w, int groups, int C) {
  if (w.dim() != 4) fail_dim("expand_grouped_weight expects [O, C/g, kh, kw], got " + shape_str(w.shape()));
  const int O = w.extent(0), Cg = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  const int K = kh * kw;
  if (groups < 1 || C % groups != 0 || O % groups != 0 || Cg != C / groups)
    fail_config("grouped kernel " + shape_str(w.shape()) + " does not split " + std::to_string(C) + " channels into " +
                std::to_string(groups) + " groups");
  if (groups == 1) return reshape(w, {O, C * K});
  const int ocg = O / groups;
  std::vector<T> out(static_cast<std::size_t>(O) * C * K, T(0));
  const T* pw = w.data();
  for (int oc = 0; oc < O; ++oc) {
    const int g = oc / ocg;
    for (int ic = 0; ic < Cg; ++ic)
      for (int t = 0; t < K; ++t)
        out[static_cast<std::size_t>(oc) * C * K + (g * Cg + ic) * K + t] = pw[(static_cast<std::int64_t>(oc) * Cg + ic) * K + t];
  }
  return Tensor<T>::make_op({O, C * K}, std::move(out), {w}, [w, O, C, Cg, K, ocg](detail::Node<T>& n) {
    if (!w.requires_grad()) return;
    auto& gw = w.grad();
    const T* g = n.grad.data();
    for (int oc = 0; oc < O; ++oc) {
      const int grp = oc / ocg;
      for (int ic = 0; ic < Cg; ++ic)
        for (int t = 0; t < K; ++t)
          gw[static_cast<std::size_t>((static_cast<std::int64_t>(oc) * Cg + ic) * K + t)] +=
              g[static_cast<std::size_t>(oc) * C * K + (grp * Cg + ic) * K + t];
    }
  });
}

// Deformable stride-2 convolution: a plain convolution over x predicts a
// (dy, dx) shift per kernel tap and output position; taps are then read off
// the shifted locations bilinearly and contracted with the main kernel.
// With zero offsets this equals conv2d(x, deform_w, stride 2, pad 1) exactly.
template <typename T>
Tensor<T> deform_branch(const Tensor<T>& x, const LrpParams<T>& p) {
  const int C = x.extent(1);
  auto offsets = bias_channels(conv2d(x, p.offset_w, kLrpStride, kLrpPad), p.offset_b);
  const int Ho = offsets.extent(2), Wo = offsets.extent(3);
  auto coords = offsets_to_coords(offsets, kLrpKernel, kLrpKernel, kLrpStride, kLrpPad);
  auto rows = samples_to_rows(bilinear_sample(x, coords), kLrpKernel * kLrpKernel);
  auto w2 = expand_grouped_weight(p.deform_w, p.deform_groups, C);
  return tokens_to_grid(matmul_nt(rows, w2), Ho, Wo);
}

// One downsampling branch on a feature grid [B, d, h, w].
template <typename T>
Tensor<T> variant_branch(const Tensor<T>& x, LrpBranch kind, const LrpParams<T>& p) {
  switch (kind) {
    case LrpBranch::None: return x;
    case LrpBranch::Dwc: return conv2d(x, p.dw_w, kLrpStride, kLrpPad, x.extent(1));
    case LrpBranch::Nc: return conv2d(x, p.nc_w, kLrpStride, kLrpPad);
    case LrpBranch::Ap: return avg_pool2d(x, kLrpKernel, kLrpStride, kLrpPad);
    case LrpBranch::Mp: return max_pool2d(x, kLrpKernel, kLrpStride, kLrpPad);
    case LrpBranch::Dfc: return deform_branch(x, p);
  }
  fail_config("unknown downsampler branch");
}

// Sum of the selected branches; 'none' passes the grid through at full
// resolution. Class tokens must be stripped before entering (spatial only).
template <typename T>
Tensor<T> lrp(const Tensor<T>& x, const LrpParams<T>& p) {
  if (x.dim() != 4) fail_dim("lrp expects a spatial grid [B, d, h, w], got " + shape_str(x.shape()));
  if (p.branches.empty()) fail_config("no downsampler branches selected");
  Tensor<T> acc = variant_branch(x, p.branches[0], p);
  for (std::size_t i = 1; i < p.branches.size(); ++i) acc = add(acc, variant_branch(x, p.branches[i], p));
  return acc;
}

// Token-sequence entry point: reshapes [B, h·w, d] to the grid, runs the
// selected branches, and flattens back row-major.
template <typename T>
Tensor<T> lrp_tokens(const Tensor<T>& x, int h, int w, const LrpParams<T>& p) {
  if (x.dim() != 3) fail_dim("lrp_tokens expects [B, T, d], got " + shape_str(x.shape()));
  if (x.extent(1) == h * w + 1)
    fail_contract("token sequence still carries a class token; strip it before downsampling");
  return grid_to_tokens(lrp(tokens_to_grid(x, h, w), p));
}

}  // namespace ohf
