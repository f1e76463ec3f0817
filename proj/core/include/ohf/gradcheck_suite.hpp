#pragma once

// Named finite-difference checks for every differentiable operation, plus a
// composite three-order layer with deformable offsets and a learned score
// prior. All checks run in double precision on desk-scale shapes; each
// returns the worst relative error between analytic and numeric gradients.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ohf/gradcheck.hpp"
#include "ohf/losses.hpp"
#include "ohf/lrp.hpp"
#include "ohf/model.hpp"
#include "ohf/oh_layer.hpp"
#include "ohf/rng.hpp"

namespace ohf {

namespace detail {

inline Tensor<double> gc_rand(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                              bool leaf = true) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = rng.uniform(lo, hi);
  return Tensor<double>::from_values(std::move(shape), std::move(v), leaf);
}

// Values bounded away from zero, for kinked activations.
inline Tensor<double> gc_rand_nonzero(std::vector<int> shape, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.2, 1.0);
  return Tensor<double>::from_values(std::move(shape), std::move(v), true);
}

// Offsets must sit off the integer sampling lattice: bilinear interpolation
// has kinks exactly on lattice lines where central differences are undefined.
inline void gc_fractional_offsets(LrpParams<double>& p, Rng& rng) {
  auto& b = p.offset_b.mutable_values();
  for (std::size_t t = 0; 2 * t + 1 < b.size(); ++t) {
    b[2 * t] = (t % 2 == 0) ? 0.3 : -0.4;
    b[2 * t + 1] = (t % 2 == 0) ? -0.35 : 0.45;
  }
  auto& w = p.offset_w.mutable_values();
  for (auto& e : w) e = rng.uniform(-0.005, 0.005);
}

inline LrpParams<double> gc_lrp_params(int d, Rng& rng, int groups = 1) {
  LrpParams<double> p;
  p.offset_w = gc_rand({2 * 9, d, 3, 3}, rng, -0.005, 0.005);
  p.offset_b = Tensor<double>::zeros({2 * 9}, true);
  p.deform_w = gc_rand({d, d / groups, 3, 3}, rng, -0.4, 0.4);
  p.deform_groups = groups;
  p.dw_w = gc_rand({d, 1, 3, 3}, rng, -0.4, 0.4);
  p.nc_w = gc_rand({d, d, 3, 3}, rng, -0.4, 0.4);
  gc_fractional_offsets(p, rng);
  return p;
}

template <typename F>
double gc_masked(const F& make_output, const std::vector<Tensor<double>>& leaves, Rng& rng, double eps) {
  auto probe = make_output();
  auto mask = gc_rand(probe.shape(), rng, -1.0, 1.0, false);
  return finite_diff_check<double>([&]() { return sum_all(mul(make_output(), mask)); }, leaves, eps);
}

}  // namespace detail

struct GradcheckCase {
  std::string name;
  std::function<double(std::uint64_t)> run;  // returns max relative error
};

inline const std::vector<GradcheckCase>& gradcheck_suite() {
  using detail::gc_lrp_params;
  using detail::gc_masked;
  using detail::gc_rand;
  using detail::gc_rand_nonzero;

  static const std::vector<GradcheckCase> cases = {
      {"matmul",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto a = gc_rand({2, 3, 4}, rng), b = gc_rand({4, 5}, rng);
         return gc_masked([&] { return matmul(a, b); }, {a, b}, rng, 1e-3);
       }},
      {"add",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto a = gc_rand({2, 3, 4}, rng), b = gc_rand({2, 3, 4}, rng);
         return gc_masked([&] { return add(a, b); }, {a, b}, rng, 1e-3);
       }},
      {"mul",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto a = gc_rand({2, 3, 4}, rng), b = gc_rand({2, 3, 4}, rng);
         return gc_masked([&] { return mul(a, b); }, {a, b}, rng, 1e-3);
       }},
      {"scale",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto a = gc_rand({3, 5}, rng);
         return gc_masked([&] { return scale(a, 0.73); }, {a}, rng, 1e-3);
       }},
      {"add_broadcast",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto a = gc_rand({2, 3, 4}, rng), b = gc_rand({4}, rng);
         return gc_masked([&] { return add_broadcast(a, b); }, {a, b}, rng, 1e-3);
       }},
      {"relu",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto a = gc_rand_nonzero({3, 7}, rng);
         return gc_masked([&] { return relu(a); }, {a}, rng, 1e-3);
       }},
      {"gelu",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto a = gc_rand({3, 7}, rng);
         return gc_masked([&] { return gelu(a); }, {a}, rng, 1e-3);
       }},
      {"softmax",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto a = gc_rand({2, 3, 5}, rng, -2.0, 2.0);
         return gc_masked([&] { return softmax_lastdim(a); }, {a}, rng, 1e-3);
       }},
      {"layer_norm",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({2, 4, 6}, rng);
         auto g = gc_rand({6}, rng, 0.5, 1.5), b = gc_rand({6}, rng, -0.3, 0.3);
         return gc_masked([&] { return layer_norm(x, g, b, 1e-6); }, {x, g, b}, rng, 3e-4);
       }},
      {"attention",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({2, 5, 8}, rng, -0.5, 0.5);
         ProjectionSet<double> proj{gc_rand({8, 8}, rng, -0.4, 0.4), gc_rand({8, 8}, rng, -0.4, 0.4),
                                    gc_rand({8, 8}, rng, -0.4, 0.4), gc_rand({8, 8}, rng, -0.4, 0.4), 2};
         return gc_masked([&] { return mhsa(x, proj); }, {x, proj.w_q, proj.w_k, proj.w_v, proj.w_o}, rng, 3e-4);
       }},
      {"conv",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({2, 3, 7, 6}, rng);
         auto w = gc_rand({4, 3, 3, 3}, rng, -0.4, 0.4);
         return gc_masked([&] { return conv2d(x, w, 2, 1); }, {x, w}, rng, 1e-3);
       }},
      {"avg_pool",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({2, 3, 6, 5}, rng);
         return gc_masked([&] { return avg_pool2d(x, 3, 2, 1); }, {x}, rng, 1e-3);
       }},
      {"max_pool",
       [](std::uint64_t seed) {
         Rng rng(seed);
         // A shuffled ramp keeps every pairwise gap above the probe width, so
         // no finite-difference step can flip a window's argmax.
         std::vector<double> v(2 * 3 * 6 * 5);
         for (std::size_t i = 0; i < v.size(); ++i) v[i] = -0.9 + 0.011 * static_cast<double>(i);
         rng.shuffle(v);
         auto x = Tensor<double>::from_values({2, 3, 6, 5}, std::move(v), true);
         return gc_masked([&] { return max_pool2d(x, 3, 2, 1); }, {x}, rng, 1e-3);
       }},
      {"upsample",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({1, 3, 2, 2}, rng);
         return gc_masked([&] { return nearest_upsample2d(x, 4, 3); }, {x}, rng, 1e-3);
       }},
      {"dwc_branch",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({2, 4, 6, 5}, rng);
         auto p = gc_lrp_params(4, rng);
         return gc_masked([&] { return variant_branch(x, LrpBranch::Dwc, p); }, {x, p.dw_w}, rng, 1e-3);
       }},
      {"deform_branch",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({1, 4, 6, 5}, rng);
         auto p = gc_lrp_params(4, rng);
         return gc_masked([&] { return deform_branch(x, p); }, {x, p.offset_w, p.offset_b, p.deform_w}, rng, 3e-4);
       }},
      {"deform_grouped",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({1, 4, 6, 5}, rng);
         auto p = gc_lrp_params(4, rng, /*groups=*/2);
         return gc_masked([&] { return deform_branch(x, p); }, {x, p.offset_w, p.offset_b, p.deform_w}, rng, 3e-4);
       }},
      {"lrp",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({1, 16, 4}, rng);  // 4x4 grid of width-4 tokens
         auto p = gc_lrp_params(4, rng);
         return gc_masked([&] { return lrp_tokens(x, 4, 4, p); },
                          {x, p.offset_w, p.offset_b, p.deform_w, p.dw_w}, rng, 3e-4);
       }},
      {"share_scores",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto s = gc_rand({1, 2, 6, 6}, rng);  // 3x2 spatial grid
         return gc_masked([&] { return share_scores(s, 3, 2, 2, 1); }, {s}, rng, 1e-3);
       }},
      {"prior_mix",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto s = gc_rand({1, 2, 4, 4}, rng);
         auto w = gc_rand({4, 4}, rng, -0.5, 0.5);
         return gc_masked(
             [&] { return add(prior_mix(s, w, PriorAxis::Key), prior_mix(s, w, PriorAxis::Query)); }, {s, w}, rng,
             1e-3);
       }},
      {"part_pool",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({2, 12, 5}, rng);  // 4x3 grid
         return gc_masked([&] { return part_pool(x, 4, 3, 3); }, {x}, rng, 1e-3);
       }},
      {"batch_norm",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({6, 5}, rng);
         auto g = gc_rand({5}, rng, 0.5, 1.5), b = gc_rand({5}, rng, -0.3, 0.3);
         auto rm = Tensor<double>::zeros({5});
         auto rv = Tensor<double>::full({5}, 1.0);
         // Training mode normalizes with batch statistics; the running
         // buffers drift across probe evaluations but never enter the output.
         return gc_masked([&] { return batch_norm_1d(x, g, b, rm, rv, true, 0.1, 1e-5); }, {x, g, b}, rng, 3e-4);
       }},
      {"ffn",
       [](std::uint64_t seed) {
         Rng rng(seed);
         FfnParams<double> p{gc_rand({6, 12}, rng, -0.4, 0.4), gc_rand({12}, rng, -0.2, 0.2),
                             gc_rand({12, 6}, rng, -0.4, 0.4), gc_rand({6}, rng, -0.2, 0.2)};
         auto x = gc_rand({2, 3, 6}, rng);
         return gc_masked([&] { return ffn(x, p); }, {x, p.w1, p.b1, p.w2, p.b2}, rng, 3e-4);
       }},
      {"stem",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({1, 3, 12, 10}, rng, 0.0, 1.0);
         auto w1 = gc_rand({4, 3, 5, 5}, rng, -0.3, 0.3);
         auto w2 = gc_rand({4, 4, 3, 3}, rng, -0.3, 0.3);
         return gc_masked([&] { return conv2d(gelu(conv2d(x, w1, 5, 1)), w2, 2, 1); }, {x, w1, w2}, rng, 3e-4);
       }},
      {"cross_entropy",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto logits = gc_rand({4, 5}, rng, -2.0, 2.0);
         std::vector<int> labels = {1, 4, 0, 2};
         return finite_diff_check<double>([&]() { return cross_entropy_mean(logits, labels); }, {logits}, 1e-3);
       }},
      {"pairwise_distance",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({5, 3}, rng);
         return gc_masked([&] { return pairwise_euclidean(x); }, {x}, rng, 1e-3);
       }},
      {"triplet",
       [](std::uint64_t seed) {
         Rng rng(seed);
         auto x = gc_rand({6, 3}, rng);
         const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
         return finite_diff_check<double>([&]() { return batch_hard_triplet(x, labels, 0.3); }, {x}, 1e-3);
       }},
      {"full_layer",
       [](std::uint64_t seed) {
         // Three attention orders in shared score mode: the layer owns
         // deformable offsets (via both LRP hops) and a learned prior per
         // high order, the exact composite the ticket-level check calls for.
         Rng rng(seed);
         const int d = 4, h = 4, w = 4;
         OhLayerParams<double> p;
         p.mode = ShareMode::Shared;
         p.prior_axis = PriorAxis::Key;
         p.first = {gc_rand({d, d}, rng, -0.4, 0.4), gc_rand({d, d}, rng, -0.4, 0.4),
                    gc_rand({d, d}, rng, -0.4, 0.4), gc_rand({d, d}, rng, -0.4, 0.4), 2};
         p.ln1_g = gc_rand({d}, rng, 0.5, 1.5);
         p.ln1_b = gc_rand({d}, rng, -0.2, 0.2);
         p.ln2_g = gc_rand({d}, rng, 0.5, 1.5);
         p.ln2_b = gc_rand({d}, rng, -0.2, 0.2);
         p.ffn = {gc_rand({d, 2 * d}, rng, -0.4, 0.4), gc_rand({2 * d}, rng, -0.2, 0.2),
                  gc_rand({2 * d, d}, rng, -0.4, 0.4), gc_rand({d}, rng, -0.2, 0.2)};
         OrderParams<double> o2{gc_lrp_params(d, rng), {}, {}, gc_rand({d, d}, rng, -0.4, 0.4),
                                gc_rand({4, 4}, rng, -0.5, 0.5)};
         OrderParams<double> o3{gc_lrp_params(d, rng), {}, {}, gc_rand({d, d}, rng, -0.4, 0.4),
                                gc_rand({1, 1}, rng, 0.5, 1.5)};
         p.high = {o2, o3};
         auto x = gc_rand({1, 1 + h * w, d}, rng, -0.5, 0.5);

         std::vector<Tensor<double>> leaves = {x,
                                               p.first.w_q,
                                               p.first.w_k,
                                               p.first.w_v,
                                               p.first.w_o,
                                               p.ln1_g,
                                               p.ln1_b,
                                               p.ln2_g,
                                               p.ln2_b,
                                               p.ffn.w1,
                                               p.ffn.b1,
                                               p.ffn.w2,
                                               p.ffn.b2};
         for (auto& o : p.high) {
           leaves.push_back(o.lrp.offset_w);
           leaves.push_back(o.lrp.offset_b);
           leaves.push_back(o.lrp.deform_w);
           leaves.push_back(o.lrp.dw_w);
           leaves.push_back(o.w_v);
           leaves.push_back(o.w_prior);
         }
         return finite_diff_check<double>(
             [&]() {
               auto y = oh_layer<double>(x, p, h, w);
               return sum_all(mul(y, y));
             },
             leaves, 3e-4);
       }},
  };
  return cases;
}

inline std::vector<std::string> gradcheck_names() {
  std::vector<std::string> names;
  for (const auto& c : gradcheck_suite()) names.push_back(c.name);
  return names;
}

// Runs one named check; unknown names are configuration errors.
inline double run_gradcheck(const std::string& name, std::uint64_t seed) {
  for (const auto& c : gradcheck_suite())
    if (c.name == name) return c.run(seed);
  std::string all;
  for (const auto& c : gradcheck_suite()) all += (all.empty() ? "" : ", ") + c.name;
  fail_config("unknown gradcheck '" + name + "'; available: " + all);
}

}  // namespace ohf
