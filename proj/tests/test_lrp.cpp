// Local relation downsampling: zero-offset degeneracy of the deformable
// branch, shift oracles through the offset path, variant shapes and
// semantics, branch additivity, parsing, and full finite-difference gradients.

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ohf/gradcheck.hpp"
#include "ohf/lrp.hpp"
#include "ohf/rng.hpp"
#include "ohf/tensor.hpp"
#include "test_util.hpp"

namespace {

using ohf::Tensor;

// Reference strided cross-correlation with zero padding, written as direct
// loops so it shares nothing with the library implementation.
template <typename T>
std::vector<T> conv_loop_oracle(const std::vector<T>& x, int B, int C, int H, int W, const std::vector<T>& w, int O,
                                int kh, int kw, int stride, int pad, int groups) {
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const int Cg = C / groups, Og = O / groups;
  std::vector<T> out(static_cast<std::size_t>(B) * O * Ho * Wo, T(0));
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o) {
      const int g = o / Og;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = 0.0;
          for (int ic = 0; ic < Cg; ++ic)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int y = oy * stride - pad + ky;
                const int xx = ox * stride - pad + kx;
                if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
                acc += static_cast<double>(
                           x[((static_cast<std::size_t>(b) * C + g * Cg + ic) * H + y) * W + xx]) *
                       static_cast<double>(w[((static_cast<std::size_t>(o) * Cg + ic) * kh + ky) * kw + kx]);
              }
          out[((static_cast<std::size_t>(b) * O + o) * Ho + oy) * Wo + ox] = static_cast<T>(acc);
        }
    }
  return out;
}

// Parameters with a zero-initialized offset predictor (the trained starting
// point) and random kernels everywhere else.
template <typename T>
ohf::LrpParams<T> make_params(int d, ohf::Rng& rng, int groups = 1, bool requires_grad = false) {
  ohf::LrpParams<T> p;
  p.offset_w = Tensor<T>::zeros({18, d, 3, 3}, requires_grad);
  p.offset_b = Tensor<T>::zeros({18}, requires_grad);
  p.deform_w = ohftest::random_tensor<T>({d, d / groups, 3, 3}, rng, T(-1), T(1), requires_grad);
  p.deform_groups = groups;
  p.dw_w = ohftest::random_tensor<T>({d, 1, 3, 3}, rng, T(-1), T(1), requires_grad);
  p.nc_w = ohftest::random_tensor<T>({d, d, 3, 3}, rng, T(-1), T(1), requires_grad);
  return p;
}

}  // namespace

TEST_CASE("zero offsets reduce the deformable branch to plain strided convolution") {
  ohf::Rng rng(501);
  const int B = 2, d = 3, H = 6, W = 5;
  auto x = ohftest::random_tensor<float>({B, d, H, W}, rng);
  auto p = make_params<float>(d, rng);

  auto got = ohf::deform_branch(x, p);
  auto expect = ohf::conv2d(x, p.deform_w, ohf::kLrpStride, ohf::kLrpPad);
  REQUIRE(got.shape() == expect.shape());
  CHECK(ohftest::max_abs_diff(got, expect) <= 1e-6f);

  // Same degeneracy with a grouped main kernel.
  const int d4 = 4;
  auto x4 = ohftest::random_tensor<float>({1, d4, 5, 7}, rng);
  auto pg = make_params<float>(d4, rng, /*groups=*/2);
  auto got_g = ohf::deform_branch(x4, pg);
  auto expect_g = ohf::conv2d(x4, pg.deform_w, ohf::kLrpStride, ohf::kLrpPad, 2);
  CHECK(ohftest::max_abs_diff(got_g, expect_g) <= 1e-6f);
}

TEST_CASE("constant offsets shift the sampled rows of a center-tap kernel") {
  ohf::Rng rng(502);
  const int B = 1, d = 3, H = 5, W = 5;
  auto x = ohftest::random_tensor<float>({B, d, H, W}, rng);

  // Keep only the center tap of the main kernel and push every tap one row
  // down; the output must read x[2·oy+1, 2·ox] and zero past the bottom edge.
  auto p = make_params<float>(d, rng);
  std::vector<float> wv(static_cast<std::size_t>(d) * d * 9, 0.0f);
  for (int o = 0; o < d; ++o)
    for (int c = 0; c < d; ++c) wv[(static_cast<std::size_t>(o) * d + c) * 9 + 4] = rng.uniform(-1.0f, 1.0f);
  p.deform_w = Tensor<float>::from_values({d, d, 3, 3}, wv);
  std::vector<float> bv(18, 0.0f);
  for (int t = 0; t < 9; ++t) bv[static_cast<std::size_t>(2 * t)] = 1.0f;  // dy = +1, dx = 0
  p.offset_b = Tensor<float>::from_values({18}, bv);

  auto out = ohf::deform_branch(x, p);
  const int Ho = out.extent(2), Wo = out.extent(3);
  REQUIRE(Ho == 3);
  REQUIRE(Wo == 3);
  for (int o = 0; o < d; ++o)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double expect = 0.0;
        const int y = 2 * oy + 1, xx = 2 * ox;
        if (y < H && xx < W)
          for (int c = 0; c < d; ++c)
            expect += static_cast<double>(wv[(static_cast<std::size_t>(o) * d + c) * 9 + 4]) *
                      static_cast<double>(x.values()[(static_cast<std::size_t>(c) * H + y) * W + xx]);
        CHECK(std::abs(out.values()[(static_cast<std::size_t>(o) * Ho + oy) * Wo + ox] - expect) < 1e-5);
      }
}

TEST_CASE("shifting along a vertical stripe pattern is invisible at interior rows") {
  ohf::Rng rng(503);
  const int B = 1, d = 2, H = 8, W = 6;

  // Columns vary, rows do not: x[b,c,y,x] = f(c, x).
  std::vector<float> xv(static_cast<std::size_t>(B) * d * H * W);
  for (int c = 0; c < d; ++c)
    for (int xx = 0; xx < W; ++xx) {
      const float f = rng.uniform(-1.0f, 1.0f);
      for (int y = 0; y < H; ++y) xv[(static_cast<std::size_t>(c) * H + y) * W + xx] = f;
    }
  auto x = Tensor<float>::from_values({B, d, H, W}, xv);

  auto p = make_params<float>(d, rng);
  auto base = ohf::deform_branch(x, p);

  std::vector<float> bv(18, 0.0f);
  for (int t = 0; t < 9; ++t) bv[static_cast<std::size_t>(2 * t)] = 1.0f;
  p.offset_b = Tensor<float>::from_values({18}, bv);
  auto shifted = ohf::deform_branch(x, p);

  // Interior output rows sample fully in-bounds windows before and after the
  // shift, and the stripe pattern makes those windows identical.
  const int Ho = base.extent(2), Wo = base.extent(3);
  REQUIRE(Ho == 4);
  for (int o = 0; o < d; ++o)
    for (int oy = 1; oy + 1 < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        const std::size_t i = (static_cast<std::size_t>(o) * Ho + oy) * Wo + ox;
        CHECK(std::abs(shifted.values()[i] - base.values()[i]) < 1e-5f);
      }
}

TEST_CASE("every downsampling variant rounds odd extents up") {
  ohf::Rng rng(504);
  const int d = 2;
  auto x = ohftest::random_tensor<float>({1, d, 5, 7}, rng);
  auto p = make_params<float>(d, rng);

  for (auto kind : {ohf::LrpBranch::Dwc, ohf::LrpBranch::Nc, ohf::LrpBranch::Ap, ohf::LrpBranch::Mp,
                    ohf::LrpBranch::Dfc}) {
    auto y = ohf::variant_branch(x, kind, p);
    CHECK(y.shape() == std::vector<int>({1, d, 3, 4}));
  }

  // The identity variant keeps the grid (and the exact values).
  auto none = ohf::variant_branch(x, ohf::LrpBranch::None, p);
  CHECK(none.shape() == x.shape());
  CHECK(ohftest::max_abs_diff(none, x) == 0.0f);

  // Even extents halve exactly.
  auto even = ohf::lrp(ohftest::random_tensor<float>({2, d, 6, 4}, rng), p);
  CHECK(even.shape() == std::vector<int>({2, d, 3, 2}));
}

TEST_CASE("the composite downsampler is the sum of its branches") {
  ohf::Rng rng(505);
  const int d = 3;
  auto x = ohftest::random_tensor<float>({2, d, 6, 5}, rng);
  auto p = make_params<float>(d, rng);
  // Give the offsets something to do so additivity is tested off the
  // degenerate point.
  p.offset_w = ohftest::random_tensor<float>({18, d, 3, 3}, rng, -0.05f, 0.05f);

  auto together = ohf::lrp(x, p);
  auto by_hand = ohf::add(ohf::deform_branch(x, p), ohf::variant_branch(x, ohf::LrpBranch::Dwc, p));
  CHECK(ohftest::max_abs_diff(together, by_hand) <= 1e-6f);
}

TEST_CASE("kernels that sum to one double a constant input at interior positions") {
  ohf::Rng rng(506);
  const int d = 3, H = 6, W = 6;
  const float c0 = 0.7f;
  auto x = Tensor<float>::full({1, d, H, W}, c0);

  auto p = make_params<float>(d, rng);
  // Positive kernels normalized to unit mass per output filter.
  auto unit_mass = [&rng](std::vector<int> shape, int per) {
    const int filters = static_cast<int>(ohf::shape_numel(shape) / per);
    std::vector<float> wv(static_cast<std::size_t>(filters) * per);
    for (int o = 0; o < filters; ++o) {
      double s = 0.0;
      for (int i = 0; i < per; ++i) {
        const float v = rng.uniform(0.1f, 1.0f);
        wv[static_cast<std::size_t>(o) * per + i] = v;
        s += v;
      }
      for (int i = 0; i < per; ++i) wv[static_cast<std::size_t>(o) * per + i] /= static_cast<float>(s);
    }
    return Tensor<float>::from_values(shape, wv);
  };
  p.deform_w = unit_mass({d, d, 3, 3}, d * 9);
  p.dw_w = unit_mass({d, 1, 3, 3}, 9);

  auto y = ohf::lrp(x, p);  // 3×3 output; position (1,1) reads no padding
  for (int o = 0; o < d; ++o)
    CHECK(y.values()[(static_cast<std::size_t>(o) * 3 + 1) * 3 + 1] == doctest::Approx(2.0f * c0).epsilon(1e-5));
}

TEST_CASE("pooling variants preserve constants everywhere") {
  ohf::Rng rng(507);
  const int d = 2;
  auto x = Tensor<float>::full({1, d, 5, 6}, -1.25f);
  auto p = make_params<float>(d, rng);
  auto ap = ohf::variant_branch(x, ohf::LrpBranch::Ap, p);
  auto mp = ohf::variant_branch(x, ohf::LrpBranch::Mp, p);
  for (float v : ap.values()) CHECK(v == doctest::Approx(-1.25f).epsilon(1e-6));
  for (float v : mp.values()) CHECK(v == doctest::Approx(-1.25f).epsilon(1e-6));
}

TEST_CASE("a one-hot center kernel turns the normal-conv branch into strided subsampling") {
  ohf::Rng rng(508);
  const int d = 3, H = 6, W = 5;
  auto x = ohftest::random_tensor<float>({1, d, H, W}, rng);
  auto p = make_params<float>(d, rng);
  std::vector<float> wv(static_cast<std::size_t>(d) * d * 9, 0.0f);
  for (int o = 0; o < d; ++o) wv[(static_cast<std::size_t>(o) * d + o) * 9 + 4] = 1.0f;
  p.nc_w = Tensor<float>::from_values({d, d, 3, 3}, wv);

  auto y = ohf::variant_branch(x, ohf::LrpBranch::Nc, p);
  const int Ho = y.extent(2), Wo = y.extent(3);
  for (int c = 0; c < d; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        CHECK(y.values()[(static_cast<std::size_t>(c) * Ho + oy) * Wo + ox] ==
              x.values()[(static_cast<std::size_t>(c) * H + 2 * oy) * W + 2 * ox]);
}

TEST_CASE("the depthwise branch matches the loop oracle") {
  ohf::Rng rng(509);
  const int B = 2, d = 3, H = 7, W = 4;
  auto x = ohftest::random_tensor<float>({B, d, H, W}, rng);
  auto p = make_params<float>(d, rng);
  auto y = ohf::variant_branch(x, ohf::LrpBranch::Dwc, p);
  auto expect = conv_loop_oracle(x.values(), B, d, H, W, p.dw_w.values(), d, 3, 3, 2, 1, d);
  CHECK(ohftest::max_abs_diff(y.values(), expect) < 1e-5f);
}

TEST_CASE("token sequences must have the class token stripped before downsampling") {
  ohf::Rng rng(510);
  const int h = 3, w = 2, dch = 4;
  auto p = make_params<float>(dch, rng);

  auto with_class = ohftest::random_tensor<float>({1, 1 + h * w, dch}, rng);
  try {
    ohf::lrp_tokens(with_class, h, w, p);
    FAIL("expected a contract error");
  } catch (const ohf::Error& e) {
    CHECK(e.kind() == ohf::ErrorKind::Contract);
    CHECK(std::string(e.what()).find("class token") != std::string::npos);
  }

  // Stripped sequences downsample and re-flatten row-major.
  auto tokens = ohftest::random_tensor<float>({1, h * w, dch}, rng);
  auto y = ohf::lrp_tokens(tokens, h, w, p);
  CHECK(y.shape() == std::vector<int>({1, 2 * 1, dch}));
  auto grid_path = ohf::grid_to_tokens(ohf::lrp(ohf::tokens_to_grid(tokens, h, w), p));
  CHECK(ohftest::max_abs_diff(y, grid_path) == 0.0f);
}

TEST_CASE("branch lists parse from plus-separated names") {
  using ohf::LrpBranch;
  CHECK(ohf::parse_lrp_branches("dfc+dwc") == std::vector<LrpBranch>({LrpBranch::Dfc, LrpBranch::Dwc}));
  CHECK(ohf::parse_lrp_branches("none") == std::vector<LrpBranch>({LrpBranch::None}));
  CHECK(ohf::parse_lrp_branches("ap+mp+nc") ==
        std::vector<LrpBranch>({LrpBranch::Ap, LrpBranch::Mp, LrpBranch::Nc}));

  for (auto kind : {LrpBranch::None, LrpBranch::Dwc, LrpBranch::Nc, LrpBranch::Ap, LrpBranch::Mp, LrpBranch::Dfc})
    CHECK(ohf::parse_lrp_branches(ohf::lrp_branch_name(kind)) == std::vector<LrpBranch>({kind}));

  CHECK_THROWS_AS(ohf::parse_lrp_branches("none+dwc"), ohf::Error);
  CHECK_THROWS_AS(ohf::parse_lrp_branches("bogus"), ohf::Error);
  CHECK_THROWS_AS(ohf::parse_lrp_branches(""), ohf::Error);
  CHECK_THROWS_AS(ohf::parse_lrp_branches("dwc+"), ohf::Error);
}

TEST_CASE("offset channels map to kernel taps row-major") {
  const int Ho = 2, Wo = 2, K = 9;
  auto coords = ohf::offsets_to_coords(Tensor<float>::zeros({1, 18, Ho, Wo}), 3, 3, 2, 1);
  REQUIRE(coords.shape() == std::vector<int>({1, Ho * Wo * K, 2}));
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox)
      for (int t = 0; t < K; ++t) {
        const std::size_t i = static_cast<std::size_t>((oy * Wo + ox) * K + t) * 2;
        CHECK(coords.values()[i + 0] == static_cast<float>(oy * 2 - 1 + t / 3));
        CHECK(coords.values()[i + 1] == static_cast<float>(ox * 2 - 1 + t % 3));
      }

  CHECK_THROWS_AS(ohf::offsets_to_coords(Tensor<float>::zeros({1, 17, Ho, Wo}), 3, 3, 2, 1), ohf::Error);
}

TEST_CASE("grouped kernels expand to block-diagonal weight rows") {
  ohf::Rng rng(511);
  const int O = 4, C = 4, groups = 2, Cg = C / groups;
  auto w = ohftest::random_tensor<float>({O, Cg, 1, 1}, rng);
  auto dense = ohf::expand_grouped_weight(w, groups, C);
  REQUIRE(dense.shape() == std::vector<int>({O, C}));
  for (int o = 0; o < O; ++o) {
    const int g = o / (O / groups);
    for (int c = 0; c < C; ++c) {
      const float v = dense.values()[static_cast<std::size_t>(o) * C + c];
      if (c / Cg == g)
        CHECK(v == w.values()[static_cast<std::size_t>(o) * Cg + (c % Cg)]);
      else
        CHECK(v == 0.0f);
    }
  }

  CHECK_THROWS_AS(ohf::expand_grouped_weight(w, 2, 5), ohf::Error);
  // groups == 1 is a plain reshape.
  auto flat = ohf::expand_grouped_weight(ohftest::random_tensor<float>({2, 3, 3, 3}, rng), 1, 3);
  CHECK(flat.shape() == std::vector<int>({2, 27}));
}

TEST_CASE("the full downsampler gradient agrees with finite differences") {
  ohf::Rng rng(512);
  const int B = 1, d = 4, H = 6, W = 6;
  auto x = ohftest::random_tensor<double>({B, d, H, W}, rng, -1.0, 1.0, true);

  ohf::LrpParams<double> p;
  // Fractional offsets keep every sample point away from the bilinear lattice
  // kinks that would poison central differences.
  p.offset_w = ohftest::random_tensor<double>({18, d, 3, 3}, rng, -0.005, 0.005, true);
  std::vector<double> bv(18);
  for (int t = 0; t < 9; ++t) {
    bv[static_cast<std::size_t>(2 * t)] = (t % 2 == 0) ? 0.3 : -0.4;
    bv[static_cast<std::size_t>(2 * t + 1)] = (t % 2 == 0) ? -0.35 : 0.45;
  }
  p.offset_b = Tensor<double>::from_values({18}, bv, true);
  p.deform_w = ohftest::random_tensor<double>({d, d, 3, 3}, rng, -1.0, 1.0, true);
  p.dw_w = ohftest::random_tensor<double>({d, 1, 3, 3}, rng, -1.0, 1.0, true);

  const std::vector<Tensor<double>> leaves = {x, p.offset_w, p.offset_b, p.deform_w, p.dw_w};
  const double err = ohf::finite_diff_check<double>(
      [&]() {
        auto y = ohf::lrp(x, p);
        return ohf::sum_all(ohf::mul(y, y));
      },
      leaves);
  CHECK(err < 1e-4);
}
