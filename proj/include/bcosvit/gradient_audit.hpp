// Finite-difference audit cases, one per trainable layer type, shared by the
// selfcheck command and the test suite.
#pragma once

#include "bcosvit/grad_check.hpp"
#include "bcosvit/model.hpp"

namespace bcosvit {

struct GradCase {
  std::string name;
  std::function<ParamMap(std::mt19937_64&)> sample;
  std::function<Var(Graph<double>&, const VarMap&)> loss;
};

namespace detail {

inline Tensor<double> randn(Dims d, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor<double> t(std::move(d));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

/// Reduces a tensor node to a scalar through fixed random weights so every
/// output entry carries a distinct gradient.
inline Var probe_loss(Graph<double>& g, Var y, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  return ag::sum(g, ag::mul(g, y, g.constant(randn(g.value(y).dims(), rng))));
}

inline BcosViTConfig tiny_config(Positional p) {
  BcosViTConfig c;
  c.preset = "tiny";
  c.image_size = 8;
  c.cnn = {{4, 2, 2}};
  c.token_kernel = 2;
  c.token_stride = 2;
  c.dim = 8;
  c.heads = 2;
  c.blocks = 1;
  c.classes = 3;
  c.mlp_ratio = 2;
  c.positional = p;
  c.output_scale = 1;
  c.feature_scale = 1;
  return c;
}

}  // namespace detail

/// Small configuration for audits: 8 x 8 input, 4 tokens, one block.
inline BcosViTConfig tiny_config(Positional p = Positional::none) { return detail::tiny_config(p); }

inline std::vector<GradCase> gradient_cases() {
  using detail::probe_loss;
  using detail::randn;
  std::vector<GradCase> cases;

  auto bcos_case = [&](std::string name, double b, std::size_t maxout) {
    cases.push_back({std::move(name),
                     [maxout](std::mt19937_64& r) {
                       return ParamMap{{"x", randn(Dims{3, 5}, r)}, {"w", randn(Dims{4 * maxout, 5}, r)}};
                     },
                     [b, maxout](Graph<double>& g, const VarMap& v) {
                       BcosSpec s{b, 1.7, maxout, false};
                       return probe_loss(g, ag::bcos_linear(g, v.at("x"), v.at("w"), s));
                     }});
  };
  bcos_case("bcos_linear.B2.maxout", 2.0, 2);
  bcos_case("bcos_linear.B1.5", 1.5, 1);
  bcos_case("bcos_linear.B2.5.maxout", 2.5, 2);
  bcos_case("bcos_linear.B1", 1.0, 1);

  cases.push_back({"bcos_conv",
                   [](std::mt19937_64& r) {
                     return ParamMap{{"x", randn(Dims{1, 3 * 4 * 4}, r)}, {"w", randn(Dims{4, 2 * 2 * 3}, r)}};
                   },
                   [](Graph<double>& g, const VarMap& v) {
                     ag::ConvGeometry geo{4, 4, 3, 2, 2};
                     Var h = ag::chw_to_hwc(g, v.at("x"), 3, 4, 4);
                     Var p = ag::im2col(g, h, geo);
                     return probe_loss(g, ag::bcos_linear(g, p, v.at("w"), BcosSpec{2.0, 1.0, 2, false}));
                   }});

  cases.push_back({"layernorm",
                   [](std::mt19937_64& r) {
                     return ParamMap{{"x", randn(Dims{3, 6}, r)}, {"scale", randn(Dims{6}, r)}, {"bias", randn(Dims{6}, r)}};
                   },
                   [](Graph<double>& g, const VarMap& v) {
                     return probe_loss(g, ag::layernorm_rows(g, v.at("x"), v.at("scale"), v.at("bias"), 1e-5));
                   }});

  cases.push_back({"attention",
                   [](std::mt19937_64& r) {
                     return ParamMap{{"q", randn(Dims{3, 4}, r)}, {"k", randn(Dims{3, 4}, r)}, {"v", randn(Dims{3, 4}, r)}};
                   },
                   [](Graph<double>& g, const VarMap& v) {
                     Var a = ag::softmax_rows(g, ag::attention_logits(g, v.at("q"), v.at("k"), 2, 3, 0.7));
                     return probe_loss(g, ag::attention_apply(g, a, v.at("v"), 2, 3));
                   }});

  cases.push_back({"attention.additive_prior",
                   [](std::mt19937_64& r) {
                     return ParamMap{{"logits", randn(Dims{2 * 3, 3}, r)}, {"prior", randn(Dims{2, 3, 3}, r)}};
                   },
                   [](Graph<double>& g, const VarMap& v) {
                     Var p = ag::reshape(g, v.at("prior"), Dims{6, 3});
                     return probe_loss(g, ag::softmax_rows(g, ag::add_tiled(g, v.at("logits"), p)));
                   }});

  cases.push_back({"attention.multiplicative_prior",
                   [](std::mt19937_64& r) {
                     return ParamMap{{"logits", randn(Dims{2 * 3, 3}, r)}, {"prior", randn(Dims{2, 3, 3}, r)}};
                   },
                   [](Graph<double>& g, const VarMap& v) {
                     Var p = ag::softmax_rows(g, ag::reshape(g, v.at("prior"), Dims{6, 3}));
                     return probe_loss(g, ag::mul_tiled(g, ag::softmax_rows(g, v.at("logits")), p));
                   }});

  cases.push_back({"token_embedding",
                   [](std::mt19937_64& r) {
                     return ParamMap{{"tokens", randn(Dims{2 * 3, 4}, r)}, {"e", randn(Dims{3, 4}, r)}};
                   },
                   [](Graph<double>& g, const VarMap& v) {
                     return probe_loss(g, ag::add_tiled(g, v.at("tokens"), v.at("e")));
                   }});

  cases.push_back({"pooled_classifier_bce",
                   [](std::mt19937_64& r) {
                     return ParamMap{{"tokens", randn(Dims{2 * 3, 4}, r)}, {"w", randn(Dims{3, 4}, r)}};
                   },
                   [](Graph<double>& g, const VarMap& v) {
                     Var pooled = ag::mean_pool(g, v.at("tokens"), 3);
                     Var y = ag::bcos_linear(g, pooled, v.at("w"), BcosSpec{2.0, 2.0, 1, false});
                     Tensor<double> t(Dims{2, 3});
                     t(0, 1) = 1;
                     t(1, 2) = 1;
                     return ag::bce_with_logits(g, y, t);
                   }});

  for (Positional p : {Positional::none, Positional::embedding, Positional::additive, Positional::multiplicative}) {
    const auto cfg = detail::tiny_config(p);
    cases.push_back({"model." + to_string(p),
                     [cfg](std::mt19937_64& r) {
                       BcosViT<double> m(cfg, r());
                       ParamMap pm;
                       for (auto& [k, t] : m.params()) pm[k] = t;
                       for (auto& [k, t] : pm)
                         if (k.find("prior") != std::string::npos || k.find("ln.") != std::string::npos)
                           t = randn(t.dims(), r, 0.5) + Tensor<double>(t.dims(), k.find("scale") != std::string::npos);
                       std::uniform_real_distribution<double> u(0.0, 1.0);
                       Tensor<double> rgb(Dims{3, cfg.image_size, cfg.image_size});
                       for (auto& v : rgb.values()) v = u(r);
                       pm["input"] = encode_image(rgb).pixels.reshaped(Dims{1, cfg.input_size()});
                       return pm;
                     },
                     [cfg](Graph<double>& g, const VarMap& v) {
                       ParameterSet<double> ps;
                       BcosViT<double> shape(cfg, 0);
                       for (auto& [name, dims] : shape.layout()) ps.add(name, g.value(v.at(name)));
                       BcosViT<double> m(cfg, std::move(ps));
                       ForwardOptions opt;
                       VarMap bp;
                       for (auto& [name, dims] : shape.layout()) bp[name] = v.at(name);
                       Var t = tokenise_graph(g, m, bp, v.at("input"), opt, nullptr);
                       Var fin = transformer_graph(g, m, bp, t, opt, nullptr);
                       Var y = classify_graph(g, m, bp, fin, opt, nullptr);
                       return probe_loss(g, y);
                     }});
  }
  return cases;
}

}  // namespace bcosvit
