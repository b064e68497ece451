#include "helpers.hpp"

using namespace bcosvit;
using namespace bcosvit::testing;

namespace {

/// Micro network with a 2 x 2 token grid (N = 4).
BcosViTConfig four_tokens(Positional p = Positional::none) {
  auto c = micro(p);
  c.token_kernel = 2;
  c.token_stride = 2;
  return c;
}

template <class T>
Tensor<T> random_tokens(const BcosViTConfig& c, std::mt19937_64& rng, double sd = 20.0) {
  return randn(Dims{c.tokens(), c.dim}, rng, sd).cast<T>();
}

template <class T>
Tensor<T> apply(const Tensor<T>& map, const Tensor<T>& P) {
  return matmul(map, P.reshaped(Dims{P.numel(), 1})).reshaped(P.dims());
}

}  // namespace

TEST(Tokeniser, ZeroImageGivesZeroTokens) {
  BcosViT<double> m(micro(), 1);
  auto t = tokenise(m, EncodedImage<double>{Tensor<double>(Dims{6, 32, 32})});
  EXPECT_EQ(t.tokens.max_abs(), 0.0);
}

TEST(Tokeniser, RecordedMapsReproduceTokens) {
  std::mt19937_64 rng(2);
  BcosViT<float> m(micro(), 3);
  auto x = encode_image(random_rgb<float>(32, rng));
  ForwardTrace<float> tr;
  auto t = tokenise(m, x, &tr);
  auto again = tokeniser_apply(m, tr, x.pixels);
  EXPECT_LE(max_abs_diff(t.tokens, again), 1e-4f * (1 + t.tokens.max_abs()));
}

TEST(Tokeniser, FeatureScaleMultipliesTokens) {
  std::mt19937_64 rng(4);
  auto c = micro();
  BcosViT<double> big(c, 5);
  c.feature_scale = 1;
  BcosViT<double> unit(c, 5);
  auto x = encode_image(random_rgb<double>(32, rng));
  auto a = tokenise(big, x).tokens, b = tokenise(unit, x).tokens;
  EXPECT_LE(max_abs_diff(a, b * 1000.0), 1e-9 * a.max_abs());
}

TEST(Tokeniser, RejectsWrongExtent) {
  BcosViT<float> m(micro(), 1);
  EXPECT_THROW(tokenise(m, EncodedImage<float>{Tensor<float>(Dims{6, 16, 16})}), ShapeError);
  EXPECT_THROW(forward(m, Tensor<float>(Dims{1, 100})), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(Attention, ZeroLogitsGiveUniformWeights) {
  BcosViT<double> m(four_tokens(), 1);
  m.params()["block0.att.query"] = Tensor<double>(Dims{64, 64});
  std::mt19937_64 rng(1);
  auto a = attention_matrix(m, 0, random_tokens<double>(m.config(), rng));
  for (double v : a.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Attention, ZeroAdditivePriorMatchesNoPrior) {
  std::mt19937_64 rng(2);
  BcosViT<double> plain(four_tokens(), 7), add(four_tokens(Positional::additive), 7);
  for (auto& [k, t] : plain.params()) add.params()[k] = t;
  add.params()["block0.att.prior"] = Tensor<double>(Dims{4, 4, 4});
  auto P = random_tokens<double>(plain.config(), rng);
  EXPECT_EQ(attention_matrix(plain, 0, P), attention_matrix(add, 0, P));
}

TEST(Attention, MultiplicativeUniformFactorsGiveSixteenth) {
  BcosViT<double> m(four_tokens(Positional::multiplicative), 1);
  m.params()["block0.att.query"] = Tensor<double>(Dims{64, 64});
  m.params()["block0.att.prior"] = Tensor<double>(Dims{4, 4, 4});
  std::mt19937_64 rng(3);
  auto a = attention_matrix(m, 0, random_tokens<double>(m.config(), rng));
  for (double v : a.values()) EXPECT_DOUBLE_EQ(v, 0.0625);
}

TEST(Attention, RowsAreStochasticWithoutMultiplicativePrior) {
  std::mt19937_64 rng(4);
  for (auto p : {Positional::none, Positional::additive, Positional::embedding}) {
    auto m = random_model<double>(micro(p), 11);
    auto a = attention_matrix(m, 2, random_tokens<double>(m.config(), rng));
    const std::size_t n = m.config().tokens();
    for (std::size_t r = 0; r < a.numel() / n; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_GE(a[r * n + j], 0.0);
        s += a[r * n + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Attention, MultiplicativeEntriesBoundedByBothFactors) {
  std::mt19937_64 rng(5);
  auto m = random_model<double>(micro(Positional::multiplicative), 12);
  auto P = random_tokens<double>(m.config(), rng);
  auto a = attention_matrix(m, 1, P);
  const auto& prior = m.params()["block1.att.prior"];
  const std::size_t n = m.config().tokens();
  double total = 0;
  for (std::size_t r = 0; r < a.numel() / n; ++r) {
    double z = 0, mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, prior[r * n + j]);
    for (std::size_t j = 0; j < n; ++j) z += std::exp(prior[r * n + j] - mx);
    double row = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double pf = std::exp(prior[r * n + j] - mx) / z;
      EXPECT_GE(a[r * n + j], 0.0);
      EXPECT_LE(a[r * n + j], pf + 1e-15);
      row += a[r * n + j];
    }
    EXPECT_LE(row, 1.0 + 1e-12);
    total += row;
  }
  EXPECT_LT(total, double(a.numel() / n));
}

// ---------------------------------------------------------------------------

TEST(AttentionBlock, ZeroValueWeightsLeaveSkipOnly) {
  std::mt19937_64 rng(6);
  auto m = random_model<double>(micro(Positional::additive), 2);
  m.params()["block0.att.value"] = Tensor<double>(m.params()["block0.att.value"].dims());
  auto P = random_tokens<double>(m.config(), rng);
  EXPECT_LE(max_abs_diff(attention_block_forward(m, 0, P).tokens, P), 1e-12);
}

TEST(AttentionBlock, LinearMapReproducesOutput) {
  std::mt19937_64 rng(7);
  for (auto p : kVariants) {
    auto m = random_model<float>(micro(p), 3);
    auto P = random_tokens<float>(m.config(), rng);
    auto r = attention_block_forward(m, 1, P);
    ASSERT_TRUE(r.map);
    EXPECT_LE(max_abs_diff(apply(*r.map, P), r.tokens), 1e-4f * (1 + r.tokens.max_abs())) << to_string(p);
  }
}

TEST(AttentionBlock, IdentityAttentionAndValuesDoubleTokens) {
  auto c = four_tokens(Positional::additive);
  c.heads = 1;
  c.maxout_enabled = false;
  c.b_attention = 1;
  c.gamma_f = std::sqrt(double(c.dim));  // gamma = 1
  BcosViT<double> m(c, 1);
  Tensor<double> prior(Dims{1, 4, 4}, -1e4);
  for (std::size_t i = 0; i < 4; ++i) prior(0, i, i) = 0;
  m.params()["block0.att.prior"] = prior;
  m.params()["block0.att.value"] = Tensor<double>::identity(c.dim);
  m.params()["block0.att.proj"] = Tensor<double>::identity(c.dim);
  std::mt19937_64 rng(8);
  auto P = random_tokens<double>(c, rng);
  EXPECT_LE(max_abs_diff(attention_block_forward(m, 0, P).tokens, P * 2.0), 1e-9 * P.max_abs());
}

TEST(AttentionBlock, TokenContributionScalesWithToken) {
  // Attention sees tokens through LayerNorm, which ignores a token's scale,
  // and the value path is linear here, so token t's share is linear in its scale.
  auto c = four_tokens();
  c.maxout_enabled = false;
  c.b_attention = 1;
  auto m = random_model<double>(c, 4);
  std::mt19937_64 rng(9);
  auto P = random_tokens<double>(c, rng, 50.0);
  auto share = [&](double s) {
    Tensor<double> Q = P;
    for (std::size_t j = 0; j < c.dim; ++j) Q(2, j) *= s;
    auto out = attention_block_forward(m, 0, Q).tokens;
    Tensor<double> d(Dims{c.tokens(), c.dim});
    for (std::size_t i = 0; i < out.numel(); ++i) d[i] = out[i] - Q[i];
    return d;
  };
  const auto f1 = share(1), f2 = share(2), f3 = share(3);
  double err = 0, scale = 0;
  for (std::size_t i = 0; i < f1.numel(); ++i) {
    err = std::max(err, std::abs((f3[i] - f1[i]) - 2 * (f2[i] - f1[i])));
    scale = std::max(scale, std::abs(f2[i] - f1[i]));
  }
  EXPECT_GT(scale, 1e-3);
  EXPECT_LE(err, 1e-6 * scale);

  // The standard block normalises the value path, so the share ignores the scale.
  c.standard_attention = true;
  BcosViT<double> s(c, 4);
  auto std_share = [&](double f) {
    Tensor<double> Q = P;
    for (std::size_t j = 0; j < c.dim; ++j) Q(2, j) *= f;
    auto out = attention_block_forward(s, 0, Q).tokens;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= Q[i];
    return out;
  };
  const auto g1 = std_share(1), g3 = std_share(3);
  EXPECT_GT(g1.max_abs(), 1e-3);
  EXPECT_LE(max_abs_diff(g3, g1), 1e-6 * g1.max_abs());
}

// ---------------------------------------------------------------------------

TEST(MlpBlock, ZeroWeightsLeaveSkipOnly) {
  std::mt19937_64 rng(10);
  BcosViT<double> m(micro(), 2);
  m.params()["block3.mlp.fc2"] = Tensor<double>(m.params()["block3.mlp.fc2"].dims());
  auto P = random_tokens<double>(m.config(), rng);
  EXPECT_LE(max_abs_diff(mlp_block_forward(m, 3, P).tokens, P), 1e-12);
}

TEST(MlpBlock, LinearMapReproducesOutput) {
  std::mt19937_64 rng(11);
  BcosViT<float> m(micro(), 5);
  auto P = random_tokens<float>(m.config(), rng);
  auto r = mlp_block_forward(m, 0, P);
  EXPECT_LE(max_abs_diff(apply(*r.map, P), r.tokens), 1e-4f * (1 + r.tokens.max_abs()));
}

TEST(MlpBlock, MaxOutDoublesParameterCount) {
  auto c = micro();
  const std::size_t with = BcosViT<float>(c, 1).params().numel("block0.mlp.");
  c.maxout_enabled = false;
  const std::size_t without = BcosViT<float>(c, 1).params().numel("block0.mlp.");
  EXPECT_EQ(with, 2 * without);
}

// ---------------------------------------------------------------------------

TEST(Classifier, EqualTokensPoolToThatToken) {
  std::mt19937_64 rng(12);
  auto c = micro();
  BcosViT<double> m(c, 3);
  auto p = randn(Dims{c.dim}, rng, 5.0);
  Tensor<double> P(Dims{c.tokens(), c.dim});
  for (std::size_t t = 0; t < c.tokens(); ++t)
    for (std::size_t j = 0; j < c.dim; ++j) P(t, j) = p[j];
  BcosLinear<double> head(m.params()["classifier.weight"], c.b_exponent, 1, c.gamma(c.dim));
  auto expect = bcos_forward(head, p).out;
  auto logits = classify(m, P);
  for (std::size_t k = 0; k < c.classes; ++k)
    EXPECT_NEAR(logits[k], expect[k] / c.output_scale + c.logit_bias, 1e-12);
}

TEST(Classifier, ZeroTokensGiveLogitBias) {
  BcosViT<double> m(micro(), 3);
  auto logits = classify(m, Tensor<double>(Dims{16, 64}));
  for (double v : logits.values()) EXPECT_NEAR(v, -4.59512, 1e-5);
  EXPECT_DOUBLE_EQ(m.config().logit_bias, std::log(0.01 / 0.99));
}

TEST(Classifier, OutputScaleDividesLogitOffsets) {
  std::mt19937_64 rng(13);
  auto c = micro();
  c.output_scale = 1;
  BcosViT<double> one(c, 3);
  c.output_scale = 1000;
  BcosViT<double> thousand(c, 3);
  auto P = random_tokens<double>(c, rng);
  auto a = classify(one, P), b = classify(thousand, P);
  for (std::size_t k = 0; k < c.classes; ++k)
    EXPECT_NEAR(b[k] - c.logit_bias, (a[k] - c.logit_bias) / 1000.0, 1e-12 * std::abs(a[k]));
}

// ---------------------------------------------------------------------------

TEST(Model, LogitsAreLinearInInputForEveryVariant) {
  std::mt19937_64 rng(14);
  for (auto p : kVariants) {
    auto c = micro(p);
    c.output_scale = 1;
    auto m = random_model<double>(c, 15);
    for (int i = 0; i < 3; ++i) {
      auto s = extract_explicit(m, random_input<double>(c, rng));
      EXPECT_LE(linearity_error(s), 1e-8) << to_string(p);
    }
  }
}

TEST(Model, FrozenMapIsHomogeneous) {
  std::mt19937_64 rng(15);
  auto m = random_model<double>(micro(Positional::multiplicative), 16);
  auto x = random_input<double>(m.config(), rng);
  auto s = extract_explicit(m, x);
  auto wx = matmul(s.W, x.reshaped(Dims{x.numel(), 1}));
  auto w3x = matmul(s.W, (x * 3.0).reshaped(Dims{x.numel(), 1}));
  EXPECT_LE(max_abs_diff(w3x, wx * 3.0), 1e-12 * (1 + wx.max_abs()));
}

TEST(Model, TokenOrderIrrelevantWithoutPositionalInformation) {
  std::mt19937_64 rng(16);
  auto c = micro();
  c.output_scale = 1;
  auto m = random_model<double>(c, 17);
  for (int i = 0; i < 5; ++i) {
    auto P = random_tokens<double>(c, rng);
    EXPECT_LE(permutation_gap(m, P, rng), 1e-10 * (1 + forward_tokens(m, P).max_abs()));
  }
}

TEST(Model, MultiplicativePriorMakesTokenOrderMatter) {
  std::mt19937_64 rng(17);
  auto c = micro(Positional::multiplicative);
  c.output_scale = 1;
  auto m = random_model<double>(c, 18);
  EXPECT_GT(permutation_gap(m, random_tokens<double>(c, rng), rng), 1e-3);
}

TEST(Model, StandardAttentionIsNotExactlyLinear) {
  std::mt19937_64 rng(18);
  auto c = micro();
  c.standard_attention = true;
  c.output_scale = 1;
  auto m = random_model<double>(c, 19);
  auto x = random_input<double>(c, rng);
  EXPECT_THROW(extract_explicit(m, x), Error);
  EXPECT_THROW(AdjointExtractor<double>(m, x), Error);
  // The frozen gradient is still available but no longer reproduces the logit.
  Graph<double> g;
  ForwardOptions opt;
  opt.frozen = true;
  opt.input_grad = true;
  auto fg = build_forward(g, m, x.reshaped(Dims{1, x.numel()}), opt);
  g.backward(ag::pick(g, fg.logits, 0));
  auto row = g.grad(fg.x);
  double wx = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) wx += row[i] * x[i];
  const double logit = g.value(fg.logits)[0];
  EXPECT_GT(std::abs(logit - c.logit_bias - wx) / (1 + std::abs(logit)), 1e-3);
}

TEST(Model, ParametersMustMatchConfiguration) {
  BcosViT<float> m(micro(), 1);
  auto other = micro(Positional::additive);
  EXPECT_THROW(BcosViT<float>(other, m.params()), FormatError);
  auto bad = m.params();
  bad["classifier.weight"] = Tensor<float>(Dims{3, 64});
  EXPECT_THROW(BcosViT<float>(micro(), bad), FormatError);
}

TEST(Config, RoundTripsThroughKeyValues) {
  auto c = micro(Positional::multiplicative);
  c.cnn_maxout = false;
  c.gamma_f = 20;
  auto back = BcosViTConfig::from_kv(c.to_kv());
  EXPECT_EQ(back.to_kv().to_text(), c.to_kv().to_text());
}

TEST(Config, ParsesFileSyntaxAndRejectsUnknownKeys) {
  auto kv = KeyValues::parse("# comment\nmodel.dim = 32  # trailing\n\nmodel.heads=2\n");
  auto c = BcosViTConfig::from_kv(kv);
  EXPECT_EQ(c.dim, 32u);
  EXPECT_EQ(c.heads, 2u);
  kv.require_all_used();
  auto extra = KeyValues::parse("model.dims = 32\n");
  BcosViTConfig::from_kv(extra);
  EXPECT_THROW(extra.require_all_used(), ConfigError);
  EXPECT_THROW(KeyValues::parse("no equals sign\n"), ConfigError);
  EXPECT_THROW(BcosViTConfig::from_kv(KeyValues::parse("model.dim = abc\n")), ConfigError);
}
