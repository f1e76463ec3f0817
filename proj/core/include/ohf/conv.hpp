#pragma once

// Spatial operations on [B, C, H, W] tensors: cross-correlation style
// convolution, pooling, nearest upsampling, and bilinear point sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ohf/errors.hpp"
#include "ohf/parallel.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

namespace detail {

inline int conv_out_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace detail

// Grouped 2D convolution (cross-correlation, zero padding, no bias).
// x[B, C, H, W] * w[O, C/g, kh, kw] -> [B, O, Ho, Wo].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad, int groups = 1) {
  if (x.dim() != 4) fail_dim("conv2d input must be [B, C, H, W], got " + shape_str(x.shape()));
  if (w.dim() != 4) fail_dim("conv2d weights must be [O, C/g, kh, kw], got " + shape_str(w.shape()));
  const int B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const int O = w.extent(0), Cg = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  if (groups < 1 || C % groups != 0 || O % groups != 0)
    fail_config("conv2d groups " + std::to_string(groups) + " must divide channels " + std::to_string(C) + " and " + std::to_string(O));
  if (Cg != C / groups)
    fail_dim("conv2d weight channel extent " + std::to_string(Cg) + " != C/groups = " + std::to_string(C / groups));
  if (stride < 1) fail_config("conv2d stride must be >= 1");
  const int Ho = detail::conv_out_extent(H, kh, stride, pad);
  const int Wo = detail::conv_out_extent(W, kw, stride, pad);
  if (Ho < 1 || Wo < 1)
    fail_config("conv2d output extent " + std::to_string(Ho) + "x" + std::to_string(Wo) + " is empty for input " +
                std::to_string(H) + "x" + std::to_string(W) + ", kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
  const int ocg = O / groups;
  std::vector<T> out(static_cast<std::size_t>(B) * O * Ho * Wo);
  {
    const T* px = x.data();
    const T* pw = w.data();
    T* po = out.data();
    parallel_for(B, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t b = lo; b < hi; ++b)
        for (int oc = 0; oc < O; ++oc) {
          const int g = oc / ocg;
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
              double acc = 0.0;
              for (int ic = 0; ic < Cg; ++ic) {
                const T* xc = px + ((b * C + g * Cg + ic) * static_cast<std::int64_t>(H)) * W;
                const T* wc = pw + ((static_cast<std::int64_t>(oc) * Cg + ic) * kh) * kw;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= H) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= W) continue;
                    acc += static_cast<double>(xc[iy * W + ix]) * wc[ky * kw + kx];
                  }
                }
              }
              po[((b * O + oc) * static_cast<std::int64_t>(Ho) + oy) * Wo + ox] = static_cast<T>(acc);
            }
        }
    });
  }
  return Tensor<T>::make_op(
      {B, O, Ho, Wo}, std::move(out), {x, w},
      [x, w, B, C, H, W, O, Cg, kh, kw, stride, pad, Ho, Wo, ocg](detail::Node<T>& n) {
        const T* g = n.grad.data();
        const T* px = x.data();
        const T* pw = w.data();
        T* gx = x.requires_grad() ? x.grad().data() : nullptr;
        T* gw = w.requires_grad() ? w.grad().data() : nullptr;
        for (std::int64_t b = 0; b < B; ++b)
          for (int oc = 0; oc < O; ++oc) {
            const int grp = oc / ocg;
            for (int oy = 0; oy < Ho; ++oy)
              for (int ox = 0; ox < Wo; ++ox) {
                const T gv = g[((b * O + oc) * static_cast<std::int64_t>(Ho) + oy) * Wo + ox];
                if (gv == T(0)) continue;
                for (int ic = 0; ic < Cg; ++ic) {
                  const std::int64_t xbase = ((b * C + grp * Cg + ic) * static_cast<std::int64_t>(H)) * W;
                  const std::int64_t wbase = ((static_cast<std::int64_t>(oc) * Cg + ic) * kh) * kw;
                  for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                      const int ix = ox * stride - pad + kx;
                      if (ix < 0 || ix >= W) continue;
                      if (gx) gx[xbase + iy * W + ix] += gv * pw[wbase + ky * kw + kx];
                      if (gw) gw[wbase + ky * kw + kx] += gv * px[xbase + iy * W + ix];
                    }
                  }
                }
              }
          }
      });
}

// Adds a per-channel bias to x[B, C, H, W].
template <typename T>
Tensor<T> bias_channels(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.dim() != 4) fail_dim("bias_channels expects [B, C, H, W], got " + shape_str(x.shape()));
  const int B = x.extent(0), C = x.extent(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.extent(2)) * x.extent(3);
  if (b.numel() != C) fail_dim("bias extent " + std::to_string(b.numel()) + " != channel count " + std::to_string(C));
  std::vector<T> out(x.values());
  const T* pb = b.data();
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(B) * C; ++i) {
    const T bv = pb[i % C];
    T* row = out.data() + i * hw;
    for (std::int64_t j = 0; j < hw; ++j) row[j] += bv;
  }
  return Tensor<T>::make_op(x.shape(), std::move(out), {x, b}, [x, b, B, C, hw](detail::Node<T>& n) {
    if (x.requires_grad()) detail::axpy(x.grad(), n.grad);
    if (b.requires_grad()) {
      auto& gb = b.grad();
      const T* g = n.grad.data();
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(B) * C; ++i) {
        double acc = 0.0;
        const T* row = g + i * hw;
        for (std::int64_t j = 0; j < hw; ++j) acc += row[j];
        gb[static_cast<std::size_t>(i % C)] += static_cast<T>(acc);
      }
    }
  });
}

// Average pooling; padded positions are excluded from the divisor, so a
// constant input stays constant everywhere.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride, int pad) {
  if (x.dim() != 4) fail_dim("avg_pool2d expects [B, C, H, W], got " + shape_str(x.shape()));
  const int B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const int Ho = detail::conv_out_extent(H, kernel, stride, pad);
  const int Wo = detail::conv_out_extent(W, kernel, stride, pad);
  if (Ho < 1 || Wo < 1) fail_config("avg_pool2d output extent is empty");
  std::vector<T> out(static_cast<std::size_t>(B) * C * Ho * Wo);
  const T* px = x.data();
  for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
    const T* in = px + bc * H * W;
    T* o = out.data() + bc * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = 0.0;
        int cnt = 0;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            acc += in[iy * W + ix];
            ++cnt;
          }
        }
        if (cnt == 0) fail_contract("avg_pool2d window fully inside padding");
        o[oy * Wo + ox] = static_cast<T>(acc / cnt);
      }
  }
  return Tensor<T>::make_op({B, C, Ho, Wo}, std::move(out), {x}, [x, B, C, H, W, Ho, Wo, kernel, stride, pad](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* g = n.grad.data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          int cnt = 0;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) ++cnt;
            }
          }
          const T gv = g[bc * Ho * Wo + oy * Wo + ox] / static_cast<T>(cnt);
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              gx[static_cast<std::size_t>(bc * H * W + iy * W + ix)] += gv;
            }
          }
        }
  });
}

// Max pooling over in-bounds positions; ties resolve to the first position in
// row-major window order, and the gradient flows only to that winner.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride, int pad) {
  if (x.dim() != 4) fail_dim("max_pool2d expects [B, C, H, W], got " + shape_str(x.shape()));
  const int B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const int Ho = detail::conv_out_extent(H, kernel, stride, pad);
  const int Wo = detail::conv_out_extent(W, kernel, stride, pad);
  if (Ho < 1 || Wo < 1) fail_config("max_pool2d output extent is empty");
  std::vector<T> out(static_cast<std::size_t>(B) * C * Ho * Wo);
  std::vector<std::int64_t> argmax(out.size());
  const T* px = x.data();
  for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
    const T* in = px + bc * H * W;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        bool seen = false;
        T best = T(0);
        std::int64_t best_idx = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            const T v = in[iy * W + ix];
            if (!seen || v > best) {
              seen = true;
              best = v;
              best_idx = bc * H * W + iy * W + ix;
            }
          }
        }
        if (!seen) fail_contract("max_pool2d window fully inside padding");
        const std::size_t oi = static_cast<std::size_t>(bc * Ho * Wo + oy * Wo + ox);
        out[oi] = best;
        argmax[oi] = best_idx;
      }
  }
  return Tensor<T>::make_op({B, C, Ho, Wo}, std::move(out), {x}, [x, argmax = std::move(argmax)](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[static_cast<std::size_t>(argmax[i])] += n.grad[i];
  });
}

// Nearest-neighbor upsampling: out[i, j] = x[floor(i·h/H), floor(j·w/W)].
template <typename T>
Tensor<T> nearest_upsample2d(const Tensor<T>& x, int H, int W) {
  if (x.dim() != 4) fail_dim("nearest_upsample2d expects [B, C, h, w], got " + shape_str(x.shape()));
  const int B = x.extent(0), C = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (H < h || W < w)
    fail_config("nearest_upsample2d target " + std::to_string(H) + "x" + std::to_string(W) + " smaller than source " +
                std::to_string(h) + "x" + std::to_string(w));
  std::vector<T> out(static_cast<std::size_t>(B) * C * H * W);
  const T* px = x.data();
  for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
    const T* in = px + bc * h * w;
    T* o = out.data() + bc * static_cast<std::int64_t>(H) * W;
    for (int i = 0; i < H; ++i) {
      const int sy = static_cast<int>((static_cast<std::int64_t>(i) * h) / H);
      for (int j = 0; j < W; ++j) o[i * W + j] = in[sy * w + (static_cast<std::int64_t>(j) * w) / W];
    }
  }
  return Tensor<T>::make_op({B, C, H, W}, std::move(out), {x}, [x, B, C, h, w, H, W](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* g = n.grad.data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc)
      for (int i = 0; i < H; ++i) {
        const int sy = static_cast<int>((static_cast<std::int64_t>(i) * h) / H);
        for (int j = 0; j < W; ++j)
          gx[static_cast<std::size_t>(bc * h * w + sy * w + (static_cast<std::int64_t>(j) * w) / W)] +=
              g[bc * static_cast<std::int64_t>(H) * W + i * W + j];
      }
  });
}

// Bilinear point sampling at real-valued (y, x) coordinates. Corners falling
// outside the grid contribute zero (zero-padding semantics), which keeps the
// zero-offset deformable path exactly equal to a zero-padded convolution.
// x[B, C, H, W], coords[B, P, 2] -> [B, C, P].
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& x, const Tensor<T>& coords) {
  if (x.dim() != 4) fail_dim("bilinear_sample expects [B, C, H, W], got " + shape_str(x.shape()));
  if (coords.dim() != 3 || coords.extent(2) != 2)
    fail_dim("bilinear_sample coords must be [B, P, 2], got " + shape_str(coords.shape()));
  const int B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (coords.extent(0) != B) fail_dim("bilinear_sample batch extents differ");
  const int P = coords.extent(1);
  std::vector<T> out(static_cast<std::size_t>(B) * C * P);
  const T* px = x.data();
  const T* pc = coords.data();
  const auto in_bounds = [H, W](int y, int xx) { return y >= 0 && y < H && xx >= 0 && xx < W; };
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < P; ++p) {
      const T y = pc[(static_cast<std::int64_t>(b) * P + p) * 2 + 0];
      const T xc = pc[(static_cast<std::int64_t>(b) * P + p) * 2 + 1];
      const int y0 = static_cast<int>(std::floor(static_cast<double>(y)));
      const int x0 = static_cast<int>(std::floor(static_cast<double>(xc)));
      const T wy1 = y - static_cast<T>(y0), wy0 = T(1) - wy1;
      const T wx1 = xc - static_cast<T>(x0), wx0 = T(1) - wx1;
      const T w00 = in_bounds(y0, x0) ? wy0 * wx0 : T(0);
      const T w01 = in_bounds(y0, x0 + 1) ? wy0 * wx1 : T(0);
      const T w10 = in_bounds(y0 + 1, x0) ? wy1 * wx0 : T(0);
      const T w11 = in_bounds(y0 + 1, x0 + 1) ? wy1 * wx1 : T(0);
      for (int c = 0; c < C; ++c) {
        const T* ch = px + (static_cast<std::int64_t>(b) * C + c) * H * W;
        T acc = T(0);
        if (w00 != T(0)) acc += w00 * ch[y0 * W + x0];
        if (w01 != T(0)) acc += w01 * ch[y0 * W + x0 + 1];
        if (w10 != T(0)) acc += w10 * ch[(y0 + 1) * W + x0];
        if (w11 != T(0)) acc += w11 * ch[(y0 + 1) * W + x0 + 1];
        out[(static_cast<std::size_t>(b) * C + c) * P + p] = acc;
      }
    }
  return Tensor<T>::make_op({B, C, P}, std::move(out), {x, coords}, [x, coords, B, C, H, W, P](detail::Node<T>& n) {
    const T* g = n.grad.data();
    const T* px = x.data();
    const T* pc = coords.data();
    T* gx = x.requires_grad() ? x.grad().data() : nullptr;
    T* gc = coords.requires_grad() ? coords.grad().data() : nullptr;
    const auto in_bounds = [H, W](int y, int xx) { return y >= 0 && y < H && xx >= 0 && xx < W; };
    for (int b = 0; b < B; ++b)
      for (int p = 0; p < P; ++p) {
        const T y = pc[(static_cast<std::int64_t>(b) * P + p) * 2 + 0];
        const T xc = pc[(static_cast<std::int64_t>(b) * P + p) * 2 + 1];
        const int y0 = static_cast<int>(std::floor(static_cast<double>(y)));
        const int x0 = static_cast<int>(std::floor(static_cast<double>(xc)));
        const T wy1 = y - static_cast<T>(y0), wy0 = T(1) - wy1;
        const T wx1 = xc - static_cast<T>(x0), wx0 = T(1) - wx1;
        const bool b00 = in_bounds(y0, x0), b01 = in_bounds(y0, x0 + 1);
        const bool b10 = in_bounds(y0 + 1, x0), b11 = in_bounds(y0 + 1, x0 + 1);
        double dy_acc = 0.0, dx_acc = 0.0;
        for (int c = 0; c < C; ++c) {
          const T gv = g[(static_cast<std::int64_t>(b) * C + c) * P + p];
          if (gv == T(0)) continue;
          const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * H * W;
          const T v00 = b00 ? px[base + y0 * W + x0] : T(0);
          const T v01 = b01 ? px[base + y0 * W + x0 + 1] : T(0);
          const T v10 = b10 ? px[base + (y0 + 1) * W + x0] : T(0);
          const T v11 = b11 ? px[base + (y0 + 1) * W + x0 + 1] : T(0);
          if (gx) {
            if (b00) gx[base + y0 * W + x0] += gv * wy0 * wx0;
            if (b01) gx[base + y0 * W + x0 + 1] += gv * wy0 * wx1;
            if (b10) gx[base + (y0 + 1) * W + x0] += gv * wy1 * wx0;
            if (b11) gx[base + (y0 + 1) * W + x0 + 1] += gv * wy1 * wx1;
          }
          if (gc) {
            dy_acc += static_cast<double>(gv) * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
            dx_acc += static_cast<double>(gv) * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
          }
        }
        if (gc) {
          gc[(static_cast<std::int64_t>(b) * P + p) * 2 + 0] += static_cast<T>(dy_acc);
          gc[(static_cast<std::int64_t>(b) * P + p) * 2 + 1] += static_cast<T>(dx_acc);
        }
      }
  });
}

}  // namespace ohf
