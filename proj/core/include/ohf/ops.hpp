#pragma once

// Differentiable operations on dense tensors. Each op computes its forward
// value eagerly and, when gradients are wanted, records a closure that
// accumulates adjoints into its parents.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "ohf/errors.hpp"
#include "ohf/flops.hpp"
#include "ohf/parallel.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

namespace detail {

// c[m,n] = a[m,k] * b[k,n]
template <typename T>
inline void gemm_nn(const T* a, const T* b, T* c, int m, int n, int k) {
  std::fill(c, c + static_cast<std::size_t>(m) * n, T(0));
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const T av = arow[l];
      const T* brow = b + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] = a[m,k] * b[n,k]^T
template <typename T>
inline void gemm_nt(const T* a, const T* b, T* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] = acc;
    }
  }
}

// c[m,n] += a[m,k] * b[k,n] (accumulating)
template <typename T>
inline void gemm_nn_acc(const T* a, const T* b, T* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const T av = arow[l];
      const T* brow = b + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[k,m]^T * b[k,n]  (accumulating; caller zero-fills)
template <typename T>
inline void gemm_tn_acc(const T* a, const T* b, T* c, int m, int n, int k) {
  for (int l = 0; l < k; ++l) {
    const T* arow = a + static_cast<std::size_t>(l) * m;
    const T* brow = b + static_cast<std::size_t>(l) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T (accumulating)
template <typename T>
inline void gemm_nt_acc(const T* a, const T* b, T* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

struct MatmulPlan {
  std::vector<int> out_shape;
  std::int64_t batches = 1;
  bool a_broadcast = false;  // a is rank-2, shared across batches
  bool b_broadcast = false;
  int m = 0, k = 0, n = 0;
};

inline MatmulPlan plan_matmul(const std::vector<int>& as, const std::vector<int>& bs, bool b_transposed) {
  if (as.size() < 2 || bs.size() < 2) fail_dim("matmul requires rank >= 2, got " + shape_str(as) + " x " + shape_str(bs));
  MatmulPlan p;
  p.m = as[as.size() - 2];
  p.k = as[as.size() - 1];
  const int bk = b_transposed ? bs[bs.size() - 1] : bs[bs.size() - 2];
  p.n = b_transposed ? bs[bs.size() - 2] : bs[bs.size() - 1];
  if (p.k != bk) fail_dim("matmul inner extents differ: " + shape_str(as) + " x " + shape_str(bs));
  const std::vector<int> lead_a(as.begin(), as.end() - 2);
  const std::vector<int> lead_b(bs.begin(), bs.end() - 2);
  std::vector<int> lead;
  if (lead_a == lead_b) {
    lead = lead_a;
  } else if (lead_b.empty()) {
    lead = lead_a;
    p.b_broadcast = true;
  } else if (lead_a.empty()) {
    lead = lead_b;
    p.a_broadcast = true;
  } else {
    fail_dim("matmul batch extents incompatible: " + shape_str(as) + " x " + shape_str(bs));
  }
  for (int e : lead) p.batches *= e;
  p.out_shape = lead;
  p.out_shape.push_back(p.m);
  p.out_shape.push_back(p.n);
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> matmul_impl(const Tensor<T>& a, const Tensor<T>& b, bool b_transposed) {
  const auto p = plan_matmul(a.shape(), b.shape(), b_transposed);
  const std::int64_t a_step = p.a_broadcast ? 0 : static_cast<std::int64_t>(p.m) * p.k;
  const std::int64_t b_step = p.b_broadcast ? 0 : static_cast<std::int64_t>(p.k) * p.n;
  const std::int64_t c_step = static_cast<std::int64_t>(p.m) * p.n;
  std::vector<T> out(static_cast<std::size_t>(p.batches * c_step));
  count_madds(p.batches * p.m * p.n * p.k);
  {
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = out.data();
    parallel_for(p.batches, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t t = lo; t < hi; ++t) {
        if (b_transposed)
          gemm_nt(pa + t * a_step, pb + t * b_step, pc + t * c_step, p.m, p.n, p.k);
        else
          gemm_nn(pa + t * a_step, pb + t * b_step, pc + t * c_step, p.m, p.n, p.k);
      }
    });
  }
  return Tensor<T>::make_op(p.out_shape, std::move(out), {a, b}, [a, b, p, b_transposed, a_step, b_step, c_step](detail::Node<T>& node) {
    const T* g = node.grad.data();
    if (a.requires_grad()) {
      T* ga = a.grad().data();
      const T* pb = b.data();
      for (std::int64_t t = 0; t < p.batches; ++t) {
        if (b_transposed)
          gemm_nn_acc(g + t * c_step, pb + t * b_step, ga + t * a_step, p.m, p.k, p.n);  // dA = dC * B
        else
          gemm_nt_acc(g + t * c_step, pb + t * b_step, ga + t * a_step, p.m, p.k, p.n);  // dA = dC * B^T
      }
    }
    if (b.requires_grad()) {
      T* gb = b.grad().data();
      const T* pa = a.data();
      for (std::int64_t t = 0; t < p.batches; ++t) {
        if (b_transposed)
          gemm_tn_acc(g + t * c_step, pa + t * a_step, gb + t * b_step, p.n, p.k, p.m);  // dB = dC^T * A
        else
          gemm_tn_acc(pa + t * a_step, g + t * c_step, gb + t * b_step, p.k, p.n, p.m);  // dB = A^T * dC
      }
    }
  });
}

}  // namespace detail

// Standard batched matrix product a[..., m, k] x b[..., k, n] -> [..., m, n].
// Leading extents must match exactly, or one operand may be rank-2 and is
// then shared across the batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::matmul_impl(a, b, /*b_transposed=*/false);
}

// a[..., m, k] x b[..., n, k]^T -> [..., m, n] without materializing the
// transpose (used for attention scores).
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::matmul_impl(a, b, /*b_transposed=*/true);
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) fail_dim("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.values());
  const T* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [a, b](detail::Node<T>& n) {
    if (a.requires_grad()) detail::axpy(a.grad(), n.grad);
    if (b.requires_grad()) detail::axpy(b.grad(), n.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) fail_dim("sub shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.values());
  const T* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [a, b](detail::Node<T>& n) {
    if (a.requires_grad()) detail::axpy(a.grad(), n.grad);
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) fail_dim("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [a, b](detail::Node<T>& n) {
    if (a.requires_grad()) {
      auto& ga = a.grad();
      const T* vb = b.data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * vb[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      const T* va = a.data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i] * va[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.values());
  for (auto& v : out) v *= c;
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x, c](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * n.grad[i];
  });
}

// x + b where b's shape is a trailing suffix of x's shape; b is broadcast
// over the leading extents (bias add, position embedding add).
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<std::ptrdiff_t>(bs.size())))
    fail_dim("add_broadcast: " + shape_str(bs) + " is not a trailing suffix of " + shape_str(xs));
  const std::int64_t inner = shape_numel(bs);
  const std::int64_t outer = x.numel() / inner;
  std::vector<T> out(x.values());
  const T* pb = b.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    T* row = out.data() + o * inner;
    for (std::int64_t i = 0; i < inner; ++i) row[i] += pb[i];
  }
  return Tensor<T>::make_op(xs, std::move(out), {x, b}, [x, b, outer, inner](detail::Node<T>& n) {
    if (x.requires_grad()) detail::axpy(x.grad(), n.grad);
    if (b.requires_grad()) {
      auto& gb = b.grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        const T* row = n.grad.data() + o * inner;
        for (std::int64_t i = 0; i < inner; ++i) gb[static_cast<std::size_t>(i)] += row[i];
      }
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* vx = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (vx[i] > T(0)) gx[i] += n.grad[i];
  });
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  std::vector<T> out(x.numel());
  const T* vx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(vx[i]);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    auto& gx = x.grad();
    const T* vx = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = static_cast<double>(vx[i]);
      const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      gx[i] += n.grad[i] * static_cast<T>(cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalizations and softmax
// ---------------------------------------------------------------------------

// Numerically stabilized softmax over the last dimension.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.dim() < 1) fail_dim("softmax_lastdim requires rank >= 1");
  const int d = x.shape().back();
  const std::int64_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const T* px = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = px + r * d;
    T* o = out.data() + r * d;
    T mx = in[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (int i = 0; i < d; ++i) {
      const double e = std::exp(static_cast<double>(in[i] - mx));
      o[i] = static_cast<T>(e);
      sum += e;
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (int i = 0; i < d; ++i) o[i] *= inv;
  }
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x, d, rows](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* y = n.value.data();
    const T* gy = n.grad.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::int64_t base = r * d;
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += static_cast<double>(gy[base + i]) * y[base + i];
      for (int i = 0; i < d; ++i)
        gx[static_cast<std::size_t>(base + i)] += y[base + i] * (gy[base + i] - static_cast<T>(dot));
    }
  });
}

// Per-slice normalization over the last dimension followed by the gamma/beta
// affine map.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.dim() < 1) fail_dim("layer_norm requires rank >= 1");
  const int d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    fail_dim("layer_norm affine extents must equal the last extent " + std::to_string(d));
  if (!(eps > T(0))) fail_contract("layer_norm eps must be positive");
  const std::int64_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = px + r * d;
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += in[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      const double c = in[i] - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    inv_std[static_cast<std::size_t>(r)] = static_cast<T>(inv);
    for (int i = 0; i < d; ++i) {
      const T h = static_cast<T>((in[i] - mean) * inv);
      xhat[static_cast<std::size_t>(r * d + i)] = h;
      out[static_cast<std::size_t>(r * d + i)] = pg[i] * h + pb[i];
    }
  }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& n) {
        const T* gy = n.grad.data();
        const T* pg = gamma.data();
        if (gamma.requires_grad() || beta.requires_grad()) {
          auto& gg = gamma.grad();
          auto& gb = beta.grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (int i = 0; i < d; ++i) {
              const std::size_t idx = static_cast<std::size_t>(r * d + i);
              if (gamma.requires_grad()) gg[static_cast<std::size_t>(i)] += gy[idx] * xhat[idx];
              if (beta.requires_grad()) gb[static_cast<std::size_t>(i)] += gy[idx];
            }
        }
        if (x.requires_grad()) {
          auto& gx = x.grad();
          for (std::int64_t r = 0; r < rows; ++r) {
            const std::int64_t base = r * d;
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (int i = 0; i < d; ++i) {
              const double dh = static_cast<double>(gy[base + i]) * pg[i];
              mean_dh += dh;
              mean_dh_h += dh * xhat[static_cast<std::size_t>(base + i)];
            }
            mean_dh /= d;
            mean_dh_h /= d;
            const T inv = inv_std[static_cast<std::size_t>(r)];
            for (int i = 0; i < d; ++i) {
              const double dh = static_cast<double>(gy[base + i]) * pg[i];
              gx[static_cast<std::size_t>(base + i)] +=
                  inv * static_cast<T>(dh - mean_dh - xhat[static_cast<std::size_t>(base + i)] * mean_dh_h);
            }
          }
        }
      });
}

// Batch normalization over the batch axis of x[B, d]. Train mode normalizes
// by batch statistics and updates the running buffers in place (exponential
// moving average, unbiased variance); eval mode uses the running buffers.
template <typename T>
Tensor<T> batch_norm_1d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                        Tensor<T>& running_var, bool training, T momentum, T eps) {
  if (x.dim() != 2) fail_dim("batch_norm_1d expects [B, d], got " + shape_str(x.shape()));
  const int B = x.extent(0);
  const int d = x.extent(1);
  if (gamma.numel() != d || beta.numel() != d || running_mean.numel() != d || running_var.numel() != d)
    fail_dim("batch_norm_1d parameter extents must equal feature width " + std::to_string(d));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();

  if (!training) {
    std::vector<T> out(x.numel());
    const T* rm = running_mean.data();
    const T* rv = running_var.data();
    std::vector<T> inv(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) inv[static_cast<std::size_t>(j)] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[j]) + eps));
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < d; ++j)
        out[static_cast<std::size_t>(b * d + j)] = pg[j] * (px[b * d + j] - rm[j]) * inv[static_cast<std::size_t>(j)] + pb[j];
    return Tensor<T>::make_op(x.shape(), std::move(out), {x, gamma, beta},
                              [x, gamma, beta, running_mean, running_var, B, d, inv = std::move(inv)](detail::Node<T>& n) {
                                const T* gy = n.grad.data();
                                const T* rm = running_mean.data();
                                const T* px = x.data();
                                const T* pg = gamma.data();
                                for (int b = 0; b < B; ++b)
                                  for (int j = 0; j < d; ++j) {
                                    const std::size_t idx = static_cast<std::size_t>(b * d + j);
                                    const T h = (px[idx] - rm[j]) * inv[static_cast<std::size_t>(j)];
                                    if (x.requires_grad()) x.grad()[idx] += gy[idx] * pg[j] * inv[static_cast<std::size_t>(j)];
                                    if (gamma.requires_grad()) gamma.grad()[static_cast<std::size_t>(j)] += gy[idx] * h;
                                    if (beta.requires_grad()) beta.grad()[static_cast<std::size_t>(j)] += gy[idx];
                                  }
                              });
  }

  if (B < 2) fail_config("batch_norm_1d train mode requires a batch of at least 2, got " + std::to_string(B));
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(static_cast<std::size_t>(d));
  {
    auto& rm = running_mean.mutable_values();
    auto& rv = running_var.mutable_values();
    for (int j = 0; j < d; ++j) {
      double mean = 0.0;
      for (int b = 0; b < B; ++b) mean += px[b * d + j];
      mean /= B;
      double var = 0.0;
      for (int b = 0; b < B; ++b) {
        const double c = px[b * d + j] - mean;
        var += c * c;
      }
      var /= B;
      const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
      inv_std[static_cast<std::size_t>(j)] = static_cast<T>(inv);
      for (int b = 0; b < B; ++b) {
        const std::size_t idx = static_cast<std::size_t>(b * d + j);
        xhat[idx] = static_cast<T>((px[idx] - mean) * inv);
        out[idx] = pg[j] * xhat[idx] + pb[j];
      }
      rm[static_cast<std::size_t>(j)] =
          static_cast<T>((1.0 - momentum) * rm[static_cast<std::size_t>(j)] + momentum * mean);
      rv[static_cast<std::size_t>(j)] =
          static_cast<T>((1.0 - momentum) * rv[static_cast<std::size_t>(j)] + momentum * var * B / (B - 1.0));
    }
  }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, B, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& n) {
        const T* gy = n.grad.data();
        const T* pg = gamma.data();
        if (gamma.requires_grad() || beta.requires_grad()) {
          auto& gg = gamma.grad();
          auto& gb = beta.grad();
          for (int b = 0; b < B; ++b)
            for (int j = 0; j < d; ++j) {
              const std::size_t idx = static_cast<std::size_t>(b * d + j);
              if (gamma.requires_grad()) gg[static_cast<std::size_t>(j)] += gy[idx] * xhat[idx];
              if (beta.requires_grad()) gb[static_cast<std::size_t>(j)] += gy[idx];
            }
        }
        if (x.requires_grad()) {
          auto& gx = x.grad();
          for (int j = 0; j < d; ++j) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (int b = 0; b < B; ++b) {
              const std::size_t idx = static_cast<std::size_t>(b * d + j);
              const double dh = static_cast<double>(gy[idx]) * pg[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[idx];
            }
            mean_dh /= B;
            mean_dh_h /= B;
            for (int b = 0; b < B; ++b) {
              const std::size_t idx = static_cast<std::size_t>(b * d + j);
              const double dh = static_cast<double>(gy[idx]) * pg[j];
              gx[idx] += inv_std[static_cast<std::size_t>(j)] * static_cast<T>(dh - mean_dh - xhat[idx] * mean_dh_h);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape movement (pure reorderings; adjoints are inverse reorderings)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
  if (shape_numel(shape) != x.numel())
    fail_dim("reshape to " + shape_str(shape) + " changes element count of " + shape_str(x.shape()));
  std::vector<T> out(x.values());
  return Tensor<T>::make_op(std::move(shape), std::move(out), {x}, [x](detail::Node<T>& n) {
    if (x.requires_grad()) detail::axpy(x.grad(), n.grad);
  });
}

// [B, T, h*dh] -> [B, h, T, dh]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
  if (x.dim() != 3) fail_dim("split_heads expects [B, T, d], got " + shape_str(x.shape()));
  const int B = x.extent(0), t = x.extent(1), d = x.extent(2);
  if (d % heads != 0) fail_config("width " + std::to_string(d) + " not divisible by head count " + std::to_string(heads));
  const int dh = d / heads;
  std::vector<T> out(x.numel());
  const T* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < t; ++i)
      for (int hh = 0; hh < heads; ++hh)
        for (int j = 0; j < dh; ++j)
          out[static_cast<std::size_t>(((b * heads + hh) * t + i) * dh + j)] = px[(b * t + i) * d + hh * dh + j];
  return Tensor<T>::make_op({B, heads, t, dh}, std::move(out), {x}, [x, B, t, heads, dh, d](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* g = n.grad.data();
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < t; ++i)
        for (int hh = 0; hh < heads; ++hh)
          for (int j = 0; j < dh; ++j)
            gx[static_cast<std::size_t>((b * t + i) * d + hh * dh + j)] += g[((b * heads + hh) * t + i) * dh + j];
  });
}

// [B, h, T, dh] -> [B, T, h*dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  if (x.dim() != 4) fail_dim("merge_heads expects [B, h, T, dh], got " + shape_str(x.shape()));
  const int B = x.extent(0), heads = x.extent(1), t = x.extent(2), dh = x.extent(3);
  const int d = heads * dh;
  std::vector<T> out(x.numel());
  const T* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int hh = 0; hh < heads; ++hh)
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < dh; ++j)
          out[static_cast<std::size_t>((b * t + i) * d + hh * dh + j)] = px[((b * heads + hh) * t + i) * dh + j];
  return Tensor<T>::make_op({B, t, d}, std::move(out), {x}, [x, B, t, heads, dh, d](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* g = n.grad.data();
    for (int b = 0; b < B; ++b)
      for (int hh = 0; hh < heads; ++hh)
        for (int i = 0; i < t; ++i)
          for (int j = 0; j < dh; ++j)
            gx[static_cast<std::size_t>(((b * heads + hh) * t + i) * dh + j)] += g[(b * t + i) * d + hh * dh + j];
  });
}

// Row-major token sequence [B, h*w, d] -> spatial layout [B, d, h, w].
template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& x, int h, int w) {
  if (x.dim() != 3) fail_dim("tokens_to_grid expects [B, T, d], got " + shape_str(x.shape()));
  const int B = x.extent(0), t = x.extent(1), d = x.extent(2);
  if (t != h * w) fail_dim("token count " + std::to_string(t) + " does not match grid " + std::to_string(h) + "x" + std::to_string(w));
  std::vector<T> out(x.numel());
  const T* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < t; ++i)
      for (int c = 0; c < d; ++c) out[static_cast<std::size_t>((b * d + c) * t + i)] = px[(b * t + i) * d + c];
  return Tensor<T>::make_op({B, d, h, w}, std::move(out), {x}, [x, B, t, d](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* g = n.grad.data();
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < t; ++i)
        for (int c = 0; c < d; ++c) gx[static_cast<std::size_t>((b * t + i) * d + c)] += g[(b * d + c) * t + i];
  });
}

// [B, d, h, w] -> [B, h*w, d]
template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& x) {
  if (x.dim() != 4) fail_dim("grid_to_tokens expects [B, d, h, w], got " + shape_str(x.shape()));
  const int B = x.extent(0), d = x.extent(1), t = x.extent(2) * x.extent(3);
  std::vector<T> out(x.numel());
  const T* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < d; ++c)
      for (int i = 0; i < t; ++i) out[static_cast<std::size_t>((b * t + i) * d + c)] = px[(b * d + c) * t + i];
  return Tensor<T>::make_op({B, t, d}, std::move(out), {x}, [x, B, t, d](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* g = n.grad.data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < d; ++c)
        for (int i = 0; i < t; ++i) gx[static_cast<std::size_t>((b * d + c) * t + i)] += g[(b * t + i) * d + c];
  });
}

// Concatenation along axis 1 of rank-3 tensors (token axis).
template <typename T>
Tensor<T> concat_tokens(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() != 3 || b.dim() != 3 || a.extent(0) != b.extent(0) || a.extent(2) != b.extent(2))
    fail_dim("concat_tokens shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int B = a.extent(0), ta = a.extent(1), tb = b.extent(1), d = a.extent(2);
  std::vector<T> out(static_cast<std::size_t>(B) * (ta + tb) * d);
  const T* pa = a.data();
  const T* pb = b.data();
  for (int bb = 0; bb < B; ++bb) {
    std::copy(pa + static_cast<std::size_t>(bb) * ta * d, pa + static_cast<std::size_t>(bb + 1) * ta * d,
              out.begin() + static_cast<std::ptrdiff_t>(bb) * (ta + tb) * d);
    std::copy(pb + static_cast<std::size_t>(bb) * tb * d, pb + static_cast<std::size_t>(bb + 1) * tb * d,
              out.begin() + static_cast<std::ptrdiff_t>(bb) * (ta + tb) * d + static_cast<std::ptrdiff_t>(ta) * d);
  }
  return Tensor<T>::make_op({B, ta + tb, d}, std::move(out), {a, b}, [a, b, B, ta, tb, d](detail::Node<T>& n) {
    const T* g = n.grad.data();
    for (int bb = 0; bb < B; ++bb) {
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(ta) * d; ++i)
          ga[static_cast<std::size_t>(bb) * ta * d + static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(bb) * (ta + tb) * d + i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(tb) * d; ++i)
          gb[static_cast<std::size_t>(bb) * tb * d + static_cast<std::size_t>(i)] +=
              g[static_cast<std::size_t>(bb) * (ta + tb) * d + static_cast<std::size_t>(ta) * d + i];
      }
    }
  });
}

// Token slice [B, T, d] -> [B, t1-t0, d].
template <typename T>
Tensor<T> slice_tokens(const Tensor<T>& x, int t0, int t1) {
  if (x.dim() != 3) fail_dim("slice_tokens expects [B, T, d], got " + shape_str(x.shape()));
  const int B = x.extent(0), t = x.extent(1), d = x.extent(2);
  if (t0 < 0 || t1 > t || t0 >= t1) fail_contract("slice_tokens range [" + std::to_string(t0) + "," + std::to_string(t1) + ") invalid for T=" + std::to_string(t));
  const int m = t1 - t0;
  std::vector<T> out(static_cast<std::size_t>(B) * m * d);
  const T* px = x.data();
  for (int b = 0; b < B; ++b)
    std::copy(px + (static_cast<std::size_t>(b) * t + t0) * d, px + (static_cast<std::size_t>(b) * t + t1) * d,
              out.begin() + static_cast<std::ptrdiff_t>(b) * m * d);
  return Tensor<T>::make_op({B, m, d}, std::move(out), {x}, [x, B, t, d, t0, m](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* g = n.grad.data();
    for (int b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(m) * d; ++i)
        gx[(static_cast<std::size_t>(b) * t + t0) * d + static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(b) * m * d + i];
  });
}

// Replicates x[1, ...] along a new leading batch of size B.
template <typename T>
Tensor<T> repeat_batch(const Tensor<T>& x, int B) {
  if (x.dim() < 1 || x.extent(0) != 1) fail_dim("repeat_batch expects leading extent 1, got " + shape_str(x.shape()));
  const std::int64_t inner = x.numel();
  std::vector<T> out(static_cast<std::size_t>(B) * inner);
  for (int b = 0; b < B; ++b) std::copy(x.data(), x.data() + inner, out.begin() + static_cast<std::ptrdiff_t>(b) * inner);
  std::vector<int> shape = x.shape();
  shape[0] = B;
  return Tensor<T>::make_op(std::move(shape), std::move(out), {x}, [x, B, inner](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* g = n.grad.data();
    for (int b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < inner; ++i) gx[static_cast<std::size_t>(i)] += g[b * inner + i];
  });
}

// Stacks p tensors of shape [B, d] into [B, p, d].
template <typename T>
Tensor<T> stack_axis1(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) fail_contract("stack_axis1 needs at least one tensor");
  const int B = xs[0].extent(0), d = xs[0].extent(1);
  const int p = static_cast<int>(xs.size());
  for (const auto& t : xs)
    if (t.dim() != 2 || t.extent(0) != B || t.extent(1) != d) fail_dim("stack_axis1 shape mismatch");
  std::vector<T> out(static_cast<std::size_t>(B) * p * d);
  for (int i = 0; i < p; ++i) {
    const T* px = xs[static_cast<std::size_t>(i)].data();
    for (int b = 0; b < B; ++b)
      std::copy(px + static_cast<std::size_t>(b) * d, px + static_cast<std::size_t>(b + 1) * d,
                out.begin() + (static_cast<std::ptrdiff_t>(b) * p + i) * d);
  }
  return Tensor<T>::make_op({B, p, d}, std::move(out), xs, [xs, B, p, d](detail::Node<T>& n) {
    const T* g = n.grad.data();
    for (int i = 0; i < p; ++i) {
      const auto& xi = xs[static_cast<std::size_t>(i)];
      if (!xi.requires_grad()) continue;
      auto& gx = xi.grad();
      for (int b = 0; b < B; ++b)
        for (int j = 0; j < d; ++j) gx[static_cast<std::size_t>(b * d + j)] += g[(b * p + i) * d + j];
    }
  });
}

// Mean over the token range [t0, t1) of x[B, T, d] -> [B, d].
template <typename T>
Tensor<T> mean_tokens(const Tensor<T>& x, int t0, int t1) {
  if (x.dim() != 3) fail_dim("mean_tokens expects [B, T, d], got " + shape_str(x.shape()));
  const int B = x.extent(0), t = x.extent(1), d = x.extent(2);
  if (t0 < 0 || t1 > t || t0 >= t1) fail_contract("mean_tokens range invalid");
  const int m = t1 - t0;
  std::vector<T> out(static_cast<std::size_t>(B) * d);
  const T* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (int i = t0; i < t1; ++i) acc += px[(static_cast<std::size_t>(b) * t + i) * d + c];
      out[static_cast<std::size_t>(b * d + c)] = static_cast<T>(acc / m);
    }
  return Tensor<T>::make_op({B, d}, std::move(out), {x}, [x, B, t, d, t0, t1, m](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* g = n.grad.data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < d; ++c) {
        const T gv = g[b * d + c] / static_cast<T>(m);
        for (int i = t0; i < t1; ++i) gx[(static_cast<std::size_t>(b) * t + i) * d + c] += gv;
      }
  });
}

// Rectangular slice of the last two axes of x[B, H, R, C].
template <typename T>
Tensor<T> slice_last2(const Tensor<T>& x, int r0, int r1, int c0, int c1) {
  if (x.dim() != 4) fail_dim("slice_last2 expects rank 4, got " + shape_str(x.shape()));
  const int B = x.extent(0), Hh = x.extent(1), R = x.extent(2), C = x.extent(3);
  if (r0 < 0 || r1 > R || r0 >= r1 || c0 < 0 || c1 > C || c0 >= c1)
    fail_contract("slice_last2 window [" + std::to_string(r0) + "," + std::to_string(r1) + ")x[" + std::to_string(c0) +
                  "," + std::to_string(c1) + ") invalid for " + shape_str(x.shape()));
  const int m = r1 - r0, n = c1 - c0;
  std::vector<T> out(static_cast<std::size_t>(B) * Hh * m * n);
  const T* px = x.data();
  for (std::int64_t bh = 0; bh < static_cast<std::int64_t>(B) * Hh; ++bh)
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < n; ++c)
        out[static_cast<std::size_t>((bh * m + r) * n + c)] = px[(bh * R + r0 + r) * C + c0 + c];
  return Tensor<T>::make_op({B, Hh, m, n}, std::move(out), {x}, [x, B, Hh, R, C, r0, c0, m, n](detail::Node<T>& nd) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T* g = nd.grad.data();
    for (std::int64_t bh = 0; bh < static_cast<std::int64_t>(B) * Hh; ++bh)
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c)
          gx[static_cast<std::size_t>((bh * R + r0 + r) * C + c0 + c)] += g[(bh * m + r) * n + c];
  });
}

// Point samples grouped per kernel tap [B, C, P·K] -> rows [B, P, C·K],
// the layout a weight matrix [O, C·K] contracts against.
template <typename T>
Tensor<T> samples_to_rows(const Tensor<T>& s, int K) {
  if (s.dim() != 3) fail_dim("samples_to_rows expects [B, C, P*K], got " + shape_str(s.shape()));
  const int B = s.extent(0), C = s.extent(1), PK = s.extent(2);
  if (K < 1 || PK % K != 0) fail_dim("samples_to_rows: last extent " + std::to_string(PK) + " not divisible by " + std::to_string(K));
  const int P = PK / K;
  std::vector<T> out(s.numel());
  const T* ps = s.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < P; ++p)
        for (int k = 0; k < K; ++k)
          out[static_cast<std::size_t>(((b * P + p) * C + c) * K + k)] =
              ps[(static_cast<std::int64_t>(b) * C + c) * PK + p * K + k];
  return Tensor<T>::make_op({B, P, C * K}, std::move(out), {s}, [s, B, C, P, K, PK](detail::Node<T>& nd) {
    if (!s.requires_grad()) return;
    auto& gs = s.grad();
    const T* g = nd.grad.data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < P; ++p)
          for (int k = 0; k < K; ++k)
            gs[static_cast<std::size_t>((static_cast<std::int64_t>(b) * C + c) * PK + p * K + k)] +=
                g[((b * P + p) * C + c) * K + k];
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  double acc = 0.0;
  for (const T v : x.values()) acc += v;
  return Tensor<T>::make_op({}, {static_cast<T>(acc)}, {x}, [x](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T g = n.grad[0];
    for (auto& v : gx) v += g;
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  const std::int64_t m = x.numel();
  double acc = 0.0;
  for (const T v : x.values()) acc += v;
  return Tensor<T>::make_op({}, {static_cast<T>(acc / m)}, {x}, [x, m](detail::Node<T>& n) {
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    const T g = n.grad[0] / static_cast<T>(m);
    for (auto& v : gx) v += g;
  });
}

}  // namespace ohf
