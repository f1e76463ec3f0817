// The omni-relational layer: score pooling and prior mixing, high-order
// steps in both score modes, fusion, plain-block degeneracy, FLOP accounting,
// and the full-layer finite-difference gradient.

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ohf/flops.hpp"
#include "ohf/gradcheck.hpp"
#include "ohf/oh_layer.hpp"
#include "ohf/rng.hpp"
#include "ohf/tensor.hpp"
#include "test_util.hpp"

namespace {

using ohf::Tensor;

template <typename T>
ohf::ProjectionSet<T> random_projections(int d, int heads, ohf::Rng& rng, bool rg = false) {
  return {ohftest::random_tensor<T>({d, d}, rng, T(-1), T(1), rg),
          ohftest::random_tensor<T>({d, d}, rng, T(-1), T(1), rg),
          ohftest::random_tensor<T>({d, d}, rng, T(-1), T(1), rg),
          ohftest::random_tensor<T>({d, d}, rng, T(-1), T(1), rg), heads};
}

// One high order's parameters: fractional offsets (so sampling stays off the
// bilinear lattice), random kernels and projections, identity prior of the
// given extent.
template <typename T>
ohf::OrderParams<T> random_order(int d, int prior_n, ohf::Rng& rng, bool rg = false) {
  ohf::OrderParams<T> op;
  op.lrp.offset_w = ohftest::random_tensor<T>({18, d, 3, 3}, rng, T(-0.005), T(0.005), rg);
  std::vector<T> bv(18);
  for (int t = 0; t < 9; ++t) {
    bv[static_cast<std::size_t>(2 * t)] = (t % 2 == 0) ? T(0.3) : T(-0.4);
    bv[static_cast<std::size_t>(2 * t + 1)] = (t % 2 == 0) ? T(-0.35) : T(0.45);
  }
  op.lrp.offset_b = Tensor<T>::from_values({18}, bv, rg);
  op.lrp.deform_w = ohftest::random_tensor<T>({d, d, 3, 3}, rng, T(-0.5), T(0.5), rg);
  op.lrp.dw_w = ohftest::random_tensor<T>({d, 1, 3, 3}, rng, T(-0.5), T(0.5), rg);
  op.w_q = ohftest::random_tensor<T>({d, d}, rng, T(-1), T(1), rg);
  op.w_k = ohftest::random_tensor<T>({d, d}, rng, T(-1), T(1), rg);
  op.w_v = ohftest::random_tensor<T>({d, d}, rng, T(-1), T(1), rg);
  std::vector<T> eye(static_cast<std::size_t>(prior_n) * prior_n, T(0));
  for (int i = 0; i < prior_n; ++i) eye[static_cast<std::size_t>(i) * prior_n + i] = T(1);
  op.w_prior = Tensor<T>::from_values({prior_n, prior_n}, eye, rg);
  return op;
}

// Token counts of the halving chain below an h×w first-order grid.
inline std::vector<int> chain_tokens(int h, int w, int orders_above_first) {
  std::vector<int> out;
  int ch = h, cw = w;
  for (int i = 0; i < orders_above_first; ++i) {
    ch = (ch + 1) / 2;
    cw = (cw + 1) / 2;
    out.push_back(ch * cw);
  }
  return out;
}

template <typename T>
ohf::OhLayerParams<T> random_layer(int d, int heads, int h, int w, int m, ohf::ShareMode mode, ohf::Rng& rng,
                                   bool rg = false) {
  ohf::OhLayerParams<T> p;
  p.first = random_projections<T>(d, heads, rng, rg);
  p.ln1_g = Tensor<T>::full({d}, T(1), rg);
  p.ln1_b = Tensor<T>::zeros({d}, rg);
  p.ln2_g = Tensor<T>::full({d}, T(1), rg);
  p.ln2_b = Tensor<T>::zeros({d}, rg);
  p.ffn.w1 = ohftest::random_tensor<T>({d, 4 * d}, rng, T(-0.5), T(0.5), rg);
  p.ffn.b1 = Tensor<T>::zeros({4 * d}, rg);
  p.ffn.w2 = ohftest::random_tensor<T>({4 * d, d}, rng, T(-0.5), T(0.5), rg);
  p.ffn.b2 = Tensor<T>::zeros({d}, rg);
  const auto tokens = chain_tokens(h, w, m - 1);
  for (int i = 0; i < m - 1; ++i) p.high.push_back(random_order<T>(d, tokens[static_cast<std::size_t>(i)], rng, rg));
  p.mode = mode;
  return p;
}

}  // namespace

TEST_CASE("score pooling with matching grids is the identity") {
  ohf::Rng rng(601);
  auto s = ohftest::random_tensor<float>({1, 2, 6, 6}, rng);
  auto pooled = ohf::share_scores(s, 3, 2, 3, 2);
  CHECK(ohftest::max_abs_diff(pooled, s) == 0.0f);
}

TEST_CASE("pooling a 2x2 grid to a point averages the whole score matrix") {
  ohf::Rng rng(602);
  auto s = ohftest::random_tensor<float>({1, 1, 4, 4}, rng);
  auto pooled = ohf::share_scores(s, 2, 2, 1, 1);
  REQUIRE(pooled.shape() == std::vector<int>({1, 1, 1, 1}));
  double mean = 0.0;
  for (float v : s.values()) mean += v;
  mean /= 16.0;
  CHECK(pooled.values()[0] == doctest::Approx(mean).epsilon(1e-6));
}

TEST_CASE("constant scores pool to the same constant") {
  auto pooled = ohf::share_scores(Tensor<float>::full({2, 3, 16, 16}, 0.875f), 4, 4, 2, 2);
  REQUIRE(pooled.shape() == std::vector<int>({2, 3, 4, 4}));
  for (float v : pooled.values()) CHECK(v == doctest::Approx(0.875f).epsilon(1e-6));
}

TEST_CASE("score pooling averages over the query-by-key blocks of the index map") {
  ohf::Rng rng(603);
  const int src_h = 3, src_w = 2, dst_h = 2, dst_w = 1;
  const int n1 = src_h * src_w, n2 = dst_h * dst_w;
  auto s = ohftest::random_tensor<float>({2, 2, n1, n1}, rng);
  auto pooled = ohf::share_scores(s, src_h, src_w, dst_h, dst_w);

  // Independent oracle: map each fine token through the same floor rule the
  // upsampler uses, then average each coarse (query, key) block.
  std::vector<int> tmap(static_cast<std::size_t>(n1));
  for (int r = 0; r < src_h; ++r)
    for (int c = 0; c < src_w; ++c)
      tmap[static_cast<std::size_t>(r * src_w + c)] = (r * dst_h / src_h) * dst_w + (c * dst_w / src_w);

  for (int bh = 0; bh < 4; ++bh)
    for (int q2 = 0; q2 < n2; ++q2)
      for (int k2 = 0; k2 < n2; ++k2) {
        double acc = 0.0;
        int count = 0;
        for (int q = 0; q < n1; ++q)
          for (int k = 0; k < n1; ++k)
            if (tmap[static_cast<std::size_t>(q)] == q2 && tmap[static_cast<std::size_t>(k)] == k2) {
              acc += s.values()[(static_cast<std::size_t>(bh) * n1 + q) * n1 + k];
              ++count;
            }
        REQUIRE(count > 0);
        CHECK(pooled.values()[(static_cast<std::size_t>(bh) * n2 + q2) * n2 + k2] ==
              doctest::Approx(acc / count).epsilon(1e-6));
      }
}

TEST_CASE("score pooling rejects grids off the halving chain") {
  auto s = Tensor<float>::zeros({1, 1, 6, 6});
  try {
    ohf::share_scores(s, 3, 2, 2, 2);
    FAIL("expected a configuration error");
  } catch (const ohf::Error& e) {
    CHECK(e.kind() == ohf::ErrorKind::Config);
    CHECK(std::string(e.what()).find("halving") != std::string::npos);
  }
  // A matrix that does not cover the declared grid is a dimension error.
  CHECK_THROWS_AS(ohf::share_scores(Tensor<float>::zeros({1, 1, 5, 5}), 3, 2, 2, 1), ohf::Error);
}

TEST_CASE("score pooling gradients agree with finite differences") {
  ohf::Rng rng(604);
  auto s = ohftest::random_tensor<double>({1, 2, 6, 6}, rng, -1.0, 1.0, true);
  const double err = ohf::finite_diff_check<double>(
      [&]() {
        auto y = ohf::share_scores(s, 3, 2, 2, 1);
        return ohf::sum_all(ohf::mul(y, y));
      },
      {s});
  CHECK(err < 1e-4);
}

TEST_CASE("an identity prior passes shared scores through bitwise") {
  ohf::Rng rng(605);
  const int n = 6;
  auto s = ohftest::random_tensor<float>({2, 2, n, n}, rng);
  std::vector<float> eye(static_cast<std::size_t>(n) * n, 0.0f);
  for (int i = 0; i < n; ++i) eye[static_cast<std::size_t>(i) * n + i] = 1.0f;
  auto mixed = ohf::prior_mix(s, Tensor<float>::from_values({n, n}, eye));
  CHECK(ohftest::max_abs_diff(mixed, s) == 0.0f);
}

TEST_CASE("a zero prior collapses shared attention to uniform") {
  ohf::Rng rng(606);
  const int n = 5;
  auto s = ohftest::random_tensor<float>({1, 2, n, n}, rng);
  auto probs = ohf::softmax_lastdim(ohf::prior_mix(s, Tensor<float>::zeros({n, n})));
  for (float v : probs.values()) CHECK(v == doctest::Approx(1.0f / n).epsilon(1e-6));
}

TEST_CASE("a permutation prior permutes score columns on the key axis and rows on the query axis") {
  ohf::Rng rng(607);
  const int n = 4;
  auto s = ohftest::random_tensor<float>({1, 1, n, n}, rng);

  // P[k][perm[k]] = 1.
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<float> pv(static_cast<std::size_t>(n) * n, 0.0f);
  for (int k = 0; k < n; ++k) pv[static_cast<std::size_t>(k) * n + perm[static_cast<std::size_t>(k)]] = 1.0f;
  auto P = Tensor<float>::from_values({n, n}, pv);

  auto key_mixed = ohf::prior_mix(s, P, ohf::PriorAxis::Key);
  for (int q = 0; q < n; ++q)
    for (int k = 0; k < n; ++k)
      CHECK(key_mixed.values()[static_cast<std::size_t>(q) * n + perm[static_cast<std::size_t>(k)]] ==
            s.values()[static_cast<std::size_t>(q) * n + k]);

  auto query_mixed = ohf::prior_mix(s, P, ohf::PriorAxis::Query);
  for (int q = 0; q < n; ++q)
    for (int k = 0; k < n; ++k)
      CHECK(query_mixed.values()[static_cast<std::size_t>(q) * n + k] ==
            s.values()[static_cast<std::size_t>(perm[static_cast<std::size_t>(q)]) * n + k]);

  CHECK_THROWS_AS(ohf::prior_mix(s, Tensor<float>::zeros({n + 1, n + 1})), ohf::Error);
  CHECK_THROWS_AS(ohf::prior_mix(s, Tensor<float>::zeros({n, n + 1})), ohf::Error);
}

TEST_CASE("a one-order layer equals a plain pre-norm transformer block") {
  ohf::Rng rng(608);
  const int B = 2, h = 3, w = 2, d = 4, heads = 2;
  auto params = random_layer<float>(d, heads, h, w, /*m=*/1, ohf::ShareMode::Full, rng);
  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);

  auto got = ohf::oh_layer(x, params, h, w);

  // The reference block, assembled from the public pieces.
  const float eps = static_cast<float>(ohf::kNormEps);
  auto a1 = ohf::add(x, ohf::mhsa(ohf::layer_norm(x, params.ln1_g, params.ln1_b, eps), params.first));
  auto expect = ohf::add(a1, ohf::ffn(ohf::layer_norm(a1, params.ln2_g, params.ln2_b, eps), params.ffn));
  CHECK(ohftest::max_abs_diff(got, expect) <= 1e-6f);
}

TEST_CASE("layer output shape always matches its input") {
  ohf::Rng rng(609);
  const int B = 2, h = 6, w = 3, d = 8, heads = 2;
  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);
  for (auto mode : {ohf::ShareMode::Full, ohf::ShareMode::Shared})
    for (int m : {1, 2, 3}) {
      auto params = random_layer<float>(d, heads, h, w, m, mode, rng);
      auto y = ohf::oh_layer(x, params, h, w);
      CHECK(y.shape() == x.shape());
    }
}

TEST_CASE("a full-mode high-order step matches a hand-rolled oracle") {
  ohf::Rng rng(610);
  const int B = 1, h = 2, w = 2, d = 4;
  auto params = random_layer<float>(d, /*heads=*/1, h, w, /*m=*/2, ohf::ShareMode::Full, rng);
  auto& op = params.high[0];
  // Zero offsets so the deformable branch is a plain strided convolution the
  // oracle can reproduce with loops.
  op.lrp.offset_w = Tensor<float>::zeros({18, d, 3, 3});
  op.lrp.offset_b = Tensor<float>::zeros({18});

  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);
  auto first = ohf::first_order(x, params, h, w);
  auto st = ohf::high_order_step(first, op, params, Tensor<float>(), h, w);
  REQUIRE(st.order == 2);
  REQUIRE(st.h == 1);
  REQUIRE(st.w == 1);
  REQUIRE(st.feature.shape() == std::vector<int>({B, 1, d}));

  // Oracle: strip the class token, run both 3x3 stride-2 pad-1 convolutions
  // by hand on the 2x2 grid, then single-token attention (softmax of a 1x1
  // score is 1, so the result is just the value projection).
  const auto& a1 = first.feature.values();
  auto grid = [&](int c, int y, int xx) -> double {
    if (y < 0 || y >= h || xx < 0 || xx >= w) return 0.0;
    return a1[(static_cast<std::size_t>(1 + y * w + xx)) * d + c];
  };
  std::vector<double> tok(d, 0.0);
  for (int o = 0; o < d; ++o) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx)
          acc += grid(c, ky - 1, kx - 1) *
                 op.lrp.deform_w.values()[((static_cast<std::size_t>(o) * d + c) * 3 + ky) * 3 + kx];
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx)
        acc += grid(o, ky - 1, kx - 1) * op.lrp.dw_w.values()[(static_cast<std::size_t>(o) * 3 + ky) * 3 + kx];
    tok[static_cast<std::size_t>(o)] = acc;
  }
  for (int j = 0; j < d; ++j) {
    double v = 0.0;
    for (int i = 0; i < d; ++i) v += tok[static_cast<std::size_t>(i)] * op.w_v.values()[static_cast<std::size_t>(i) * d + j];
    CHECK(std::abs(st.feature.values()[static_cast<std::size_t>(j)] - v) < 1e-5);
  }
}

TEST_CASE("orders whose grid cannot halve are rejected by name") {
  ohf::Rng rng(611);
  const int B = 1, h = 2, w = 2, d = 4;
  auto params = random_layer<float>(d, 2, h, w, /*m=*/3, ohf::ShareMode::Full, rng);
  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);
  try {
    ohf::oh_layer(x, params, h, w);  // order 2 lands on 1x1; order 3 cannot follow
    FAIL("expected a configuration error");
  } catch (const ohf::Error& e) {
    CHECK(e.kind() == ohf::ErrorKind::Config);
    CHECK(std::string(e.what()).find("order 2") != std::string::npos);
    CHECK(std::string(e.what()).find("too small") != std::string::npos);
  }
}

TEST_CASE("shared mode with an identity prior literally reuses the pooled first-order scores") {
  ohf::Rng rng(612);
  const int B = 2, h = 4, w = 4, d = 4, heads = 2;
  auto params = random_layer<float>(d, heads, h, w, /*m=*/2, ohf::ShareMode::Shared, rng);
  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);

  auto first = ohf::first_order(x, params, h, w);
  auto s1_spatial = ohf::slice_last2(first.scores, 1, 1 + h * w, 1, 1 + h * w);
  auto st = ohf::high_order_step(first, params.high[0], params, s1_spatial, h, w);

  // Literal Eq.-7-style reuse: pooled scores straight into softmax, applied
  // to the downsampled value projection.
  auto spatial = ohf::slice_tokens(first.feature, 1, first.feature.extent(1));
  auto tok = ohf::lrp_tokens(spatial, h, w, params.high[0].lrp);
  auto probs = ohf::softmax_lastdim(ohf::share_scores(s1_spatial, h, w, 2, 2));
  auto v = ohf::split_heads(ohf::matmul(tok, params.high[0].w_v), heads);
  auto expect = ohf::merge_heads(ohf::matmul(probs, v));
  CHECK(ohftest::max_abs_diff(st.feature, expect) == 0.0f);
}

TEST_CASE("a zero prior yields uniform high-order attention weights") {
  ohf::Rng rng(613);
  const int B = 1, h = 6, w = 3, d = 8, heads = 2;
  auto params = random_layer<float>(d, heads, h, w, /*m=*/2, ohf::ShareMode::Shared, rng);
  const int n2 = 3 * 2;  // order-2 grid under 6x3
  params.high[0].w_prior = Tensor<float>::zeros({n2, n2});

  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);
  std::vector<ohf::AttentionRecord<float>> sink;
  ohf::oh_layer(x, params, h, w, &sink);

  int seen = 0;
  for (const auto& rec : sink)
    if (rec.order == 2) {
      ++seen;
      REQUIRE(rec.weights.shape() == std::vector<int>({n2, n2}));
      for (float v : rec.weights.values()) CHECK(v == doctest::Approx(1.0f / n2).epsilon(1e-6));
    }
  CHECK(seen == heads);
}

TEST_CASE("tying the value projection to the key projection reproduces the literal equation") {
  ohf::Rng rng(614);
  const int B = 1, h = 4, w = 4, d = 4, heads = 2;
  auto tied = random_layer<float>(d, heads, h, w, /*m=*/2, ohf::ShareMode::Full, rng);
  tied.tie_vk = true;

  auto untied = tied;
  untied.tie_vk = false;
  untied.high[0].w_v = Tensor<float>::from_values({d, d}, tied.high[0].w_k.values());

  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);
  CHECK(ohftest::max_abs_diff(ohf::oh_layer(x, tied, h, w), ohf::oh_layer(x, untied, h, w)) == 0.0f);

  // With distinct projections the tied and untied layers genuinely differ.
  auto distinct = tied;
  distinct.tie_vk = false;
  CHECK(ohftest::max_abs_diff(ohf::oh_layer(x, tied, h, w), ohf::oh_layer(x, distinct, h, w)) > 1e-4f);
}

TEST_CASE("fusion adds a zero class row: the class token passes through untouched") {
  ohf::Rng rng(615);
  const int B = 2, h = 4, w = 4, d = 4, heads = 2;
  auto params = random_layer<float>(d, heads, h, w, /*m=*/2, ohf::ShareMode::Full, rng);
  // Zero FFN: the layer output is exactly the fused pre-norm accumulator.
  params.ffn.w1 = Tensor<float>::zeros({d, 4 * d});
  params.ffn.w2 = Tensor<float>::zeros({4 * d, d});

  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);
  auto out = ohf::oh_layer(x, params, h, w);
  auto a1 = ohf::first_order(x, params, h, w).feature;

  for (int b = 0; b < B; ++b)
    for (int j = 0; j < d; ++j)
      CHECK(out.values()[static_cast<std::size_t>(b) * (1 + h * w) * d + j] ==
            a1.values()[static_cast<std::size_t>(b) * (1 + h * w) * d + j]);

  // Spatial rows did receive the upsampled second order: they must differ.
  CHECK(ohftest::max_abs_diff(out, a1) > 1e-4f);
}

TEST_CASE("a zero high-order feature fuses to the one-order result") {
  ohf::Rng rng(616);
  const int B = 1, h = 3, w = 2, d = 4, heads = 2;
  auto params = random_layer<float>(d, heads, h, w, /*m=*/1, ohf::ShareMode::Full, rng);
  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);

  auto first = ohf::first_order(x, params, h, w);
  auto alone = ohf::fuse(std::vector<ohf::OrderState<float>>{first}, params);

  ohf::OrderState<float> dead{2, Tensor<float>::zeros({B, 2 * 1, d}), 2, 1, Tensor<float>()};
  auto with_zero = ohf::fuse(std::vector<ohf::OrderState<float>>{first, dead}, params);
  CHECK(ohftest::max_abs_diff(alone, with_zero) == 0.0f);

  // A feature that disagrees with its recorded grid is a contract violation.
  ohf::OrderState<float> bad{2, Tensor<float>::zeros({B, 3, d}), 2, 1, Tensor<float>()};
  try {
    ohf::fuse(std::vector<ohf::OrderState<float>>{first, bad}, params);
    FAIL("expected a contract error");
  } catch (const ohf::Error& e) {
    CHECK(e.kind() == ohf::ErrorKind::Contract);
  }
}

TEST_CASE("captured records cover every order with normalized rows") {
  ohf::Rng rng(617);
  const int B = 2, h = 6, w = 3, d = 8, heads = 2;
  auto params = random_layer<float>(d, heads, h, w, /*m=*/3, ohf::ShareMode::Shared, rng);
  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);

  std::vector<ohf::AttentionRecord<float>> sink;
  ohf::oh_layer(x, params, h, w, &sink, nullptr, /*layer_index=*/3);
  REQUIRE(sink.size() == static_cast<std::size_t>(3 * heads));

  const int expected_tokens[3] = {1 + h * w, 6, 2};  // order 1 keeps the class token
  for (int ord = 1; ord <= 3; ++ord)
    for (int hd = 0; hd < heads; ++hd) {
      const auto& rec = sink[static_cast<std::size_t>((ord - 1) * heads + hd)];
      CHECK(rec.layer == 3);
      CHECK(rec.order == ord);
      CHECK(rec.head == hd);
      const int n = expected_tokens[ord - 1];
      REQUIRE(rec.weights.shape() == std::vector<int>({n, n}));
      for (int q = 0; q < n; ++q) {
        double sum = 0.0;
        for (int k = 0; k < n; ++k) sum += rec.weights.values()[static_cast<std::size_t>(q) * n + k];
        CHECK(std::abs(sum - 1.0) < 1e-5);
      }
    }
}

TEST_CASE("the score profiler matches closed-form counts and shared mode costs less") {
  ohf::Rng rng(618);
  const int B = 2, h = 6, w = 3, d = 64, heads = 4;
  auto x = ohftest::random_tensor<float>({B, 1 + h * w, d}, rng);

  const int n1 = h * w;
  const std::vector<int> high_tokens = chain_tokens(h, w, 2);  // orders 2 and 3

  std::int64_t full_expected = 0, shared_expected = 0;
  for (int nj : high_tokens) {
    full_expected += static_cast<std::int64_t>(B) * (2LL * nj * d * d + static_cast<std::int64_t>(nj) * nj * d);
    shared_expected += static_cast<std::int64_t>(B) * heads *
                       (static_cast<std::int64_t>(n1) * n1 + static_cast<std::int64_t>(nj) * n1 +
                        static_cast<std::int64_t>(nj) * nj * nj);
  }

  auto full_params = random_layer<float>(d, heads, h, w, /*m=*/3, ohf::ShareMode::Full, rng);
  ohf::OhLayerStats full_stats;
  ohf::oh_layer<float>(x, full_params, h, w, nullptr, &full_stats);

  auto shared_params = random_layer<float>(d, heads, h, w, /*m=*/3, ohf::ShareMode::Shared, rng);
  ohf::OhLayerStats shared_stats;
  ohf::oh_layer<float>(x, shared_params, h, w, nullptr, &shared_stats);

  CHECK(full_stats.score_madds == full_expected);
  CHECK(shared_stats.score_madds == shared_expected);
  CHECK(shared_stats.score_madds < full_stats.score_madds);

  // The acceptance tolerance is 1%; the counter is exact, so this is slack.
  CHECK(std::abs(static_cast<double>(full_stats.score_madds - full_expected)) <= 0.01 * full_expected);
  CHECK(std::abs(static_cast<double>(shared_stats.score_madds - shared_expected)) <= 0.01 * shared_expected);

  // One-order layers spend nothing on high-order scores in either mode.
  auto plain = random_layer<float>(d, heads, h, w, /*m=*/1, ohf::ShareMode::Full, rng);
  ohf::OhLayerStats plain_stats;
  ohf::oh_layer<float>(x, plain, h, w, nullptr, &plain_stats);
  CHECK(plain_stats.score_madds == 0);
}

TEST_CASE("a three-order shared layer passes finite-difference checks on every parameter group") {
  ohf::Rng rng(619);
  const int B = 1, h = 4, w = 4, d = 4, heads = 2;
  auto params = random_layer<double>(d, heads, h, w, /*m=*/3, ohf::ShareMode::Shared, rng, /*rg=*/true);
  auto x = ohftest::random_tensor<double>({B, 1 + h * w, d}, rng, -1.0, 1.0, true);

  std::vector<Tensor<double>> leaves = {x,
                                        params.first.w_q,
                                        params.first.w_k,
                                        params.first.w_v,
                                        params.first.w_o,
                                        params.ln1_g,
                                        params.ln1_b,
                                        params.ln2_g,
                                        params.ln2_b,
                                        params.ffn.w1,
                                        params.ffn.b1,
                                        params.ffn.w2,
                                        params.ffn.b2};
  for (const auto& op : params.high) {
    leaves.push_back(op.lrp.offset_w);
    leaves.push_back(op.lrp.offset_b);
    leaves.push_back(op.lrp.deform_w);
    leaves.push_back(op.lrp.dw_w);
    leaves.push_back(op.w_v);
    leaves.push_back(op.w_prior);
  }

  const double err = ohf::finite_diff_check<double>(
      [&]() {
        auto y = ohf::oh_layer(x, params, h, w);
        return ohf::sum_all(ohf::mul(y, y));
      },
      leaves);
  CHECK(err < 1e-4);
}

TEST_CASE("a full-mode high-order layer passes finite-difference checks on its projections") {
  ohf::Rng rng(620);
  const int B = 1, h = 4, w = 4, d = 4, heads = 2;
  auto params = random_layer<double>(d, heads, h, w, /*m=*/2, ohf::ShareMode::Full, rng, /*rg=*/true);
  auto x = ohftest::random_tensor<double>({B, 1 + h * w, d}, rng, -1.0, 1.0, true);

  const std::vector<Tensor<double>> leaves = {x, params.high[0].w_q, params.high[0].w_k, params.high[0].w_v,
                                              params.high[0].lrp.offset_b};
  const double err = ohf::finite_diff_check<double>(
      [&]() {
        auto y = ohf::oh_layer(x, params, h, w);
        return ohf::sum_all(ohf::mul(y, y));
      },
      leaves);
  CHECK(err < 1e-4);
}
