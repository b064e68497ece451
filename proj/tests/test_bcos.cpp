#include "helpers.hpp"

using namespace bcosvit;
using namespace bcosvit::testing;

namespace {

BcosLinear<double> layer(std::initializer_list<std::initializer_list<double>> w, double b, std::size_t maxout = 1,
                         double gamma = 1) {
  return BcosLinear<double>(Tensor<double>::from_rows(w), b, maxout, gamma);
}

double out1(const BcosLinear<double>& l, std::vector<double> a) {
  const std::size_t n = a.size();
  return bcos_forward(l, Tensor<double>(Dims{n}, std::move(a))).out[0];
}

double norm(const Tensor<double>& a) {
  double s = 0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(BcosLayer, AlignedInputReturnsItsNorm) { EXPECT_DOUBLE_EQ(out1(layer({{1, 0}}, 2), {1, 0}), 1.0); }

TEST(BcosLayer, OrthogonalInputIsSuppressed) { EXPECT_DOUBLE_EQ(out1(layer({{1, 0}}, 2), {0, 1}), 0.0); }

TEST(BcosLayer, DiagonalInputAtBTwo) { EXPECT_NEAR(out1(layer({{1, 0}}, 2), {1, 1}), 1.0 / std::sqrt(2.0), 1e-12); }

TEST(BcosLayer, BOneIsLinearInNormalisedWeights) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    auto a = randn(Dims{5}, rng);
    auto w = randn(Dims{3, 5}, rng);
    BcosLinear<double> l(w, 1.0, 1, 1.0);
    auto r = bcos_forward(l, a);
    for (std::size_t j = 0; j < 3; ++j) {
      double n = 0, dot = 0;
      for (std::size_t i = 0; i < 5; ++i) n += w(j, i) * w(j, i), dot += w(j, i) * a[i];
      EXPECT_NEAR(r.out[j], dot / std::sqrt(n), 1e-12);
    }
  }
  EXPECT_DOUBLE_EQ(out1(layer({{1, 0}}, 1), {0.3, -7}), 0.3);
}

TEST(BcosLayer, EffectiveMatrixReproducesOutput) {
  std::mt19937_64 rng(8);
  for (double b : {1.0, 1.5, 2.0, 2.5})
    for (std::size_t mo : {1u, 2u}) {
      auto a = randn(Dims{7}, rng);
      BcosLinear<double> l(randn(Dims{4 * mo, 7}, rng), b, mo, 1.3);
      auto r = bcos_forward(l, a);
      EXPECT_LE(max_abs_diff(matmul(r.linmap, a.reshaped(Dims{7, 1})).reshaped(Dims{4}), r.out), 1e-12);
    }
}

TEST(BcosLayer, MaxOutPicksLargerUnitAndLowerIndexOnTies) {
  // Units 0 and 1 are identical, so the tie resolves to unit 0.
  auto l = layer({{1, 0}, {1, 0}, {0, 1}, {1, 1}}, 1, 2);
  auto r = bcos_forward(l, Tensor<double>(Dims{2}, std::vector<double>{2, 1}));
  EXPECT_DOUBLE_EQ(r.out[0], 2.0);
  EXPECT_NEAR(r.out[1], 3.0 / std::sqrt(2.0), 1e-12);
}

TEST(BcosLayer, RejectsInvalidConfiguration) {
  EXPECT_THROW(layer({{1, 0}}, 0.5), ConfigError);
  EXPECT_THROW(layer({{0, 0}}, 2), ConfigError);
  EXPECT_THROW(layer({{1, 0}}, 2, 2), ConfigError);
  EXPECT_THROW(bcos_forward(layer({{1, 0}}, 2), Tensor<double>(Dims{3})), ShapeError);
}

TEST(BcosLayer, ZeroInputGivesZeroOutput) {
  std::mt19937_64 rng(1);
  BcosLinear<double> l(randn(Dims{4, 6}, rng), 2.0, 2, 1.0);
  auto r = bcos_forward(l, Tensor<double>(Dims{6}));
  EXPECT_EQ(r.out.max_abs(), 0.0);
  EXPECT_TRUE(r.linmap.all_finite());
}

TEST(BcosProperty, OutputsBoundedByGammaTimesInputNorm) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> g(0.1, 4.0);
  for (int t = 0; t < 2000; ++t) {
    const double b = 1.0 + 0.5 * double(t % 4);
    const std::size_t mo = 1 + t % 2;
    const double gamma = g(rng);
    auto a = randn(Dims{6}, rng, 3.0);
    BcosLinear<double> l(randn(Dims{5 * mo, 6}, rng), b, mo, gamma);
    auto r = bcos_forward(l, a);
    for (std::size_t j = 0; j < 5; ++j) ASSERT_LE(std::abs(r.out[j]), gamma * norm(a) + 1e-5);
  }
}

TEST(BcosProperty, MaximumAttainedOnlyForPositivelyAlignedInputs) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> s(0.01, 10.0);
  for (int t = 0; t < 500; ++t) {
    const double b = 1.0 + 0.5 * double(t % 4);
    auto w = randn(Dims{2, 5}, rng);
    BcosLinear<double> l(w, b, 1, 2.0);
    Tensor<double> a(Dims{5});
    const double f = s(rng);
    for (std::size_t i = 0; i < 5; ++i) a[i] = f * w(0, i);
    EXPECT_NEAR(bcos_forward(l, a).out[0], 2.0 * norm(a), 1e-9 * (1 + norm(a)));
    Tensor<double> neg = a * -1.0;
    EXPECT_LT(bcos_forward(l, neg).out[0], 0.0);
    if (b > 1) {
      auto other = a + randn(Dims{5}, rng, 0.5);
      EXPECT_LT(bcos_forward(l, other).out[0], 2.0 * norm(other));
    }
  }
}

TEST(BcosProperty, LayerFollowsFormulaAtNonIntegerExponent) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 100; ++t) {
    auto a = randn(Dims{4}, rng);
    auto w = randn(Dims{1, 4}, rng);
    BcosLinear<double> l(w, 2.5, 1, 0.7);
    double nw = 0, dot = 0;
    for (std::size_t i = 0; i < 4; ++i) nw += w(0, i) * w(0, i), dot += w(0, i) * a[i];
    nw = std::sqrt(nw);
    const double c = dot / (nw * norm(a));
    EXPECT_NEAR(bcos_forward(l, a).out[0], 0.7 * std::pow(std::abs(c), 1.5) * dot / nw, 1e-12);
  }
}

// ---------------------------------------------------------------------------

TEST(Encoding, RedPixel) {
  auto e = encode_image(Tensor<double>(Dims{3, 1, 1}, std::vector<double>{1, 0, 0}));
  EXPECT_EQ(e.pixels.vec(), (std::vector<double>{1, 0, 0, 0, 1, 1}));
}

TEST(Encoding, MidGreyIsSymmetric) {
  auto e = encode_image(Tensor<double>(Dims{3, 1, 1}, 0.5));
  EXPECT_EQ(e.pixels.vec(), std::vector<double>(6, 0.5));
}

TEST(Encoding, BlackPixel) {
  auto e = encode_image(Tensor<double>(Dims{3, 1, 1}));
  EXPECT_EQ(e.pixels.vec(), (std::vector<double>{0, 0, 0, 1, 1, 1}));
}

TEST(Encoding, ComplementChannelsAndNormBounds) {
  std::mt19937_64 rng(2);
  auto rgb = random_rgb<double>(9, rng);
  auto e = encode_image(rgb);
  const std::size_t hw = 81;
  for (std::size_t p = 0; p < hw; ++p) {
    double n = 0;
    for (std::size_t c = 0; c < 6; ++c) n += e.pixels[c * hw + p] * e.pixels[c * hw + p];
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(e.pixels[(c + 3) * hw + p], 1.0 - e.pixels[c * hw + p]);
    EXPECT_GE(std::sqrt(n), std::sqrt(1.5) - 1e-12);
    EXPECT_LE(std::sqrt(n), std::sqrt(3.0) + 1e-12);
  }
  EXPECT_EQ(decode_image(e), rgb);
}

TEST(Encoding, DistinctColoursAreNeverParallel) {
  std::vector<std::array<double, 6>> v;
  for (int r = 0; r <= 4; ++r)
    for (int g = 0; g <= 4; ++g)
      for (int b = 0; b <= 4; ++b) {
        const double c[3] = {r / 4.0, g / 4.0, b / 4.0};
        v.push_back({c[0], c[1], c[2], 1 - c[0], 1 - c[1], 1 - c[2]});
      }
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = i + 1; j < v.size(); ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (int k = 0; k < 6; ++k) dot += v[i][k] * v[j][k], ni += v[i][k] * v[i][k], nj += v[j][k] * v[j][k];
      ASSERT_LT(dot / std::sqrt(ni * nj), 1.0 - 1e-9) << i << " " << j;
    }
}

TEST(Encoding, RejectsOutOfRangeColours) {
  EXPECT_THROW(encode_image(Tensor<double>(Dims{3, 1, 1}, 1.5)), Error);
  EXPECT_THROW(encode_image(Tensor<double>(Dims{4, 1, 1})), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(LayerNorm, TwoValueExample) {
  LayerNormParams<double> p{Tensor<double>(Dims{2}, 1.0), Tensor<double>(Dims{2}), 1e-12};
  auto y = layernorm(Tensor<double>(Dims{2}, std::vector<double>{1, -1}), p);
  EXPECT_NEAR(y[0], 1.0, 1e-9);
  EXPECT_NEAR(y[1], -1.0, 1e-9);
}

TEST(LayerNorm, ConstantInputGivesBias) {
  LayerNormParams<double> p{Tensor<double>(Dims{3}, 2.0), Tensor<double>(Dims{3}, std::vector<double>{0.1, 0.2, 0.3})};
  EXPECT_LE(max_abs_diff(layernorm(Tensor<double>(Dims{3}, 4.0), p), p.bias), 1e-12);
}

TEST(LayerNorm, ZeroScaleGivesBias) {
  std::mt19937_64 rng(1);
  LayerNormParams<double> p{Tensor<double>(Dims{5}), randn(Dims{5}, rng)};
  EXPECT_LE(max_abs_diff(layernorm(randn(Dims{5}, rng), p), p.bias), 1e-15);
}

// ---------------------------------------------------------------------------

TEST(BcosConv, OneByOneKernelIsNormalisedChannelMix) {
  auto l = layer({{1, 0, 0}, {0, 3, 4}}, 1);
  std::mt19937_64 rng(3);
  auto img = randn(Dims{3, 2, 2}, rng);
  auto out = bcos_conv(l, img, 1, 1);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) {
      EXPECT_NEAR(out(0, y, x), img(0, y, x), 1e-12);
      EXPECT_NEAR(out(1, y, x), 0.6 * img(1, y, x) + 0.8 * img(2, y, x), 1e-12);
    }
}

TEST(BcosConv, MatchingPatchAttainsPatchNorm) {
  std::mt19937_64 rng(5);
  auto w = randn(Dims{2, 2 * 2 * 3}, rng);
  BcosLinear<double> l(w, 2, 1, 1);
  Tensor<double> img(Dims{3, 4, 4});
  double n = 0;
  for (std::size_t ky = 0; ky < 2; ++ky)
    for (std::size_t kx = 0; kx < 2; ++kx)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = w(0, (ky * 2 + kx) * 3 + c);
        img(c, 2 + ky, 0 + kx) = v;
        n += v * v;
      }
  auto out = bcos_conv(l, img, 2, 2);
  EXPECT_NEAR(out(0, 1, 0), std::sqrt(n), 1e-12);
}

TEST(BcosConv, StridedOutputMatchesPatchOracleAndGraphKernel) {
  std::mt19937_64 rng(6);
  auto w = randn(Dims{4, 2 * 2 * 3}, rng);
  BcosLinear<double> l(w, 2, 2, 0.8);
  auto img = randn(Dims{3, 4, 4}, rng);
  auto out = bcos_conv(l, img, 2, 2);
  ASSERT_EQ(out.dims(), (Dims{2, 2, 2}));
  Graph<double> g;
  Var h = ag::chw_to_hwc(g, g.constant(img.reshaped(Dims{1, 48})), 3, 4, 4);
  Var p = ag::im2col(g, h, ag::ConvGeometry{4, 4, 3, 2, 2});
  const auto& y = g.value(ag::bcos_linear(g, p, g.constant(w), BcosSpec{2, 0.8, 2, false}));
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox) {
      Tensor<double> patch(Dims{12});
      std::size_t i = 0;
      for (std::size_t ky = 0; ky < 2; ++ky)
        for (std::size_t kx = 0; kx < 2; ++kx)
          for (std::size_t c = 0; c < 3; ++c) patch[i++] = img(c, 2 * oy + ky, 2 * ox + kx);
      auto r = bcos_forward(l, patch);
      for (std::size_t j = 0; j < 2; ++j) {
        EXPECT_NEAR(out(j, oy, ox), r.out[j], 1e-12);
        EXPECT_NEAR(y(oy * 2 + ox, j), r.out[j], 1e-12);
      }
    }
}
