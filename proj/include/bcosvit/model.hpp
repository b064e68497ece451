// The B-cos vision transformer: B-cos CNN tokeniser, attention and MLP
// blocks, and a pooled B-cos classifier, all dynamic linear in the input.
//
// Layouts: an input batch is [B x (6*H*W)], channel-major per image. Token
// matrices are stored with one token per row, [(B*N) x D]; for a single image
// vec(P) therefore enumerates (token, feature) with the feature fastest.
#pragma once

#include "bcosvit/bcos.hpp"
#include "bcosvit/config.hpp"

#include <optional>
#include <type_traits>
#include <random>

namespace bcosvit {

/// Named parameter tensors in a fixed order.
template <class T>
class ParameterSet {
 public:
  void add(std::string name, Tensor<T> t) {
    if (contains(name)) throw Error("duplicate parameter '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(std::move(name), std::move(t));
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& operator[](const std::string& name) { return items_.at(lookup(name)).second; }
  const Tensor<T>& operator[](const std::string& name) const { return items_.at(lookup(name)).second; }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  std::size_t size() const { return items_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (auto& [k, t] : items_) n += t.numel();
    return n;
  }
  /// Number of scalars in parameters whose name starts with prefix.
  std::size_t numel(const std::string& prefix) const {
    std::size_t n = 0;
    for (auto& [k, t] : items_)
      if (k.rfind(prefix, 0) == 0) n += t.numel();
    return n;
  }
  template <class U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (auto& [k, t] : items_) out.add(k, t.template cast<U>());
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

inline std::string block_prefix(std::size_t l) { return "block" + std::to_string(l) + "."; }

template <class T>
class BcosViT {
 public:
  /// Randomly initialised model.
  BcosViT(BcosViTConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    for (auto& [name, dims] : layout()) params_.add(name, init(name, dims, rng));
  }

  /// Model from existing parameters; names and shapes must match the config.
  BcosViT(BcosViTConfig cfg, ParameterSet<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    auto expected = layout();
    if (expected.size() != params_.size()) throw FormatError("parameter count does not match the configuration");
    for (auto& [name, dims] : expected) {
      if (!params_.contains(name)) throw FormatError("missing parameter '" + name + "'");
      if (params_[name].dims() != dims)
        throw FormatError("parameter '" + name + "' has shape " + dims_str(params_[name].dims()) + ", expected " +
                          dims_str(dims));
    }
  }

  const BcosViTConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  template <class U>
  BcosViT<U> cast() const {
    return BcosViT<U>(cfg_, params_.template cast<U>());
  }

  /// Parameter names and shapes implied by the configuration.
  std::vector<std::pair<std::string, Dims>> layout() const {
    const auto& c = cfg_;
    std::vector<std::pair<std::string, Dims>> out;
    std::size_t in_ch = BcosViTConfig::in_channels;
    for (std::size_t i = 0; i < c.cnn.size(); ++i) {
      out.push_back({"cnn." + std::to_string(i) + ".weight",
                     Dims{c.cnn[i].channels * c.conv_maxout(), c.cnn[i].kernel * c.cnn[i].kernel * in_ch}});
      in_ch = c.cnn[i].channels;
    }
    out.push_back({"tokens.weight", Dims{c.dim * c.conv_maxout(), c.token_kernel * c.token_kernel * in_ch}});
    if (c.positional == Positional::embedding) out.push_back({"tokens.embedding", Dims{c.tokens(), c.dim}});
    const std::size_t mo = c.transformer_maxout();
    for (std::size_t l = 0; l < c.blocks; ++l) {
      const std::string p = block_prefix(l);
      out.push_back({p + "ln.scale", Dims{c.dim}});
      out.push_back({p + "ln.bias", Dims{c.dim}});
      out.push_back({p + "att.query", Dims{c.dim, c.dim}});
      out.push_back({p + "att.key", Dims{c.dim, c.dim}});
      if (c.standard_attention) {
        out.push_back({p + "att.value", Dims{c.dim, c.dim}});
        out.push_back({p + "att.proj", Dims{c.dim, c.dim}});
      } else {
        out.push_back({p + "att.value", Dims{c.dim * mo, c.dim}});
        out.push_back({p + "att.proj", Dims{c.dim * mo, c.dim}});
      }
      if (c.positional == Positional::additive || c.positional == Positional::multiplicative)
        out.push_back({p + "att.prior", Dims{c.heads, c.tokens(), c.tokens()}});
      out.push_back({p + "mlp.fc1", Dims{c.hidden() * mo, c.dim}});
      out.push_back({p + "mlp.fc2", Dims{c.dim * mo, c.hidden()}});
    }
    out.push_back({"classifier.weight", Dims{c.classes, c.dim}});
    return out;
  }

  // B-cos layer settings; `frozen` selects the frozen dynamic-linear adjoint.
  BcosSpec conv_spec(std::size_t fan_in, bool frozen) const {
    return {cfg_.b_exponent, cfg_.gamma(fan_in), cfg_.conv_maxout(), frozen};
  }
  BcosSpec value_spec(bool frozen) const {
    return {cfg_.b_attention, cfg_.gamma(cfg_.dim, true), cfg_.transformer_maxout(), frozen};
  }
  BcosSpec proj_spec(bool frozen) const {
    return {cfg_.b_attention, cfg_.gamma(cfg_.dim), cfg_.transformer_maxout(), frozen};
  }
  BcosSpec fc1_spec(bool frozen) const {
    return {cfg_.b_exponent, cfg_.gamma(cfg_.dim), cfg_.transformer_maxout(), frozen};
  }
  BcosSpec fc2_spec(bool frozen) const {
    return {cfg_.b_exponent, cfg_.gamma(cfg_.hidden()), cfg_.transformer_maxout(), frozen};
  }
  BcosSpec classifier_spec(bool frozen) const { return {cfg_.b_exponent, cfg_.gamma(cfg_.dim), 1, frozen}; }

  /// Geometry of CNN layer i, or of the tokenising conv for i == cnn.size().
  ag::ConvGeometry conv_geometry(std::size_t i) const {
    std::size_t s = cfg_.image_size, ch = BcosViTConfig::in_channels;
    for (std::size_t j = 0; j < i; ++j) {
      s = (s - cfg_.cnn[j].kernel) / cfg_.cnn[j].stride + 1;
      ch = cfg_.cnn[j].channels;
    }
    if (i < cfg_.cnn.size()) return {s, s, ch, cfg_.cnn[i].kernel, cfg_.cnn[i].stride};
    return {s, s, ch, cfg_.token_kernel, cfg_.token_stride};
  }

 private:
  Tensor<T> init(const std::string& name, const Dims& dims, std::mt19937_64& rng) const {
    Tensor<T> t(dims);
    auto ends_with = [&](const char* s) {
      std::string suf(s);
      return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends_with("ln.scale")) return Tensor<T>(dims, T(1));
    if (ends_with("ln.bias") || ends_with("att.prior")) return t;
    std::normal_distribution<double> normal(0.0, 1.0);
    const double sd = ends_with("embedding") ? 1.0 : 1.0 / std::sqrt(double(t.cols()));
    for (auto& v : t.values()) v = T(normal(rng) * sd);
    return t;
  }

  BcosViTConfig cfg_;
  ParameterSet<T> params_;
};

/// Dynamic factors recorded during a forward pass (meaningful per image when
/// the batch holds one image).
template <class T>
struct ForwardTrace {
  struct Conv {
    ag::ConvGeometry geometry;
    BcosRecord<T> record;
  };
  struct Block {
    Tensor<T> input;      // tokens entering the attention block
    Tensor<T> attention;  // (B*H*N) x N
    BcosRecord<T> value, proj, fc1, fc2;
    Tensor<T> mid;  // tokens between attention and MLP
  };
  std::vector<Conv> convs;  // CNN layers followed by the tokenising conv
  std::vector<Block> blocks;
  BcosRecord<T> classifier;
  Tensor<T> tokens;  // tokeniser output, including any embedding
  Tensor<T> final_tokens;
};

struct ForwardOptions {
  /// Detach attention matrices and freeze B-cos scalings and MaxOut choices,
  /// so that backward() differentiates the fixed linear map W(x).
  bool frozen = false;
  /// Register parameters as trainable leaves.
  bool trainable = false;
  /// Make the input a differentiable leaf.
  bool input_grad = false;
  /// Make the embedding a differentiable leaf even when not trainable.
  bool embedding_grad = false;
};

template <class T>
struct ForwardGraph {
  Var x, tokens, final_tokens, logits;
  std::vector<Var> attention;
  std::map<std::string, Var> params;
};

template <class T>
std::map<std::string, Var> bind_parameters(Graph<T>& g, const BcosViT<T>& m, const ForwardOptions& opt) {
  std::map<std::string, Var> out;
  for (const auto& [name, t] : m.params()) {
    if (opt.trainable)
      out[name] = g.parameter(name, t);
    else
      out[name] = g.input(t, opt.embedding_grad && name == "tokens.embedding");
  }
  return out;
}

/// x: [B x (6*H*W)] -> tokens [(B*N) x D].
template <class T>
Var tokenise_graph(Graph<T>& g, const BcosViT<T>& m, const std::map<std::string, Var>& bp, Var x,
                   const ForwardOptions& opt, std::type_identity_t<ForwardTrace<T>>* trace) {
  const auto& c = m.config();
  Var h = ag::chw_to_hwc(g, x, BcosViTConfig::in_channels, c.image_size, c.image_size);
  for (std::size_t i = 0; i <= c.cnn.size(); ++i) {
    if (i == c.cnn.size()) h = ag::scale(g, h, T(c.feature_scale));
    const auto geo = m.conv_geometry(i);
    Var patches = geo.kernel == 1 && geo.stride == 1 ? h : ag::im2col(g, h, geo);
    const std::string name = i < c.cnn.size() ? "cnn." + std::to_string(i) + ".weight" : "tokens.weight";
    BcosRecord<T>* rec = nullptr;
    if (trace) {
      trace->convs.push_back({geo, {}});
      rec = &trace->convs.back().record;
    }
    h = ag::bcos_linear(g, patches, bp.at(name), m.conv_spec(geo.patch_size(), opt.frozen), rec);
  }
  if (c.positional == Positional::embedding) h = ag::add_tiled(g, h, bp.at("tokens.embedding"));
  if (trace) trace->tokens = g.value(h);
  return h;
}

/// Attention matrices of block l for tokens P: [(B*H*N) x N].
template <class T>
Var attention_matrix_graph(Graph<T>& g, const BcosViT<T>& m, const std::map<std::string, Var>& bp, std::size_t l,
                           Var P, Var* normed_out = nullptr) {
  const auto& c = m.config();
  const std::string p = block_prefix(l);
  const std::size_t n = c.tokens();
  Var normed = ag::layernorm_rows(g, P, bp.at(p + "ln.scale"), bp.at(p + "ln.bias"), T(c.ln_eps));
  if (normed_out) *normed_out = normed;
  Var q = ag::matmul_nt(g, normed, bp.at(p + "att.query"));
  Var k = ag::matmul_nt(g, normed, bp.at(p + "att.key"));
  Var r = ag::attention_logits(g, q, k, c.heads, n, T(1) / std::sqrt(T(c.head_dim())));
  switch (c.positional) {
    case Positional::additive:
      return ag::softmax_rows(g, ag::add_tiled(g, r, ag::reshape(g, bp.at(p + "att.prior"), Dims{c.heads * n, n})));
    case Positional::multiplicative: {
      Var prior = ag::softmax_rows(g, ag::reshape(g, bp.at(p + "att.prior"), Dims{c.heads * n, n}));
      return ag::mul_tiled(g, ag::softmax_rows(g, r), prior);
    }
    default:
      return ag::softmax_rows(g, r);
  }
}

template <class T>
Var attention_block_graph(Graph<T>& g, const BcosViT<T>& m, const std::map<std::string, Var>& bp, std::size_t l,
                          Var P, const ForwardOptions& opt, typename ForwardTrace<T>::Block* trace,
                          Var* attention_out = nullptr) {
  const auto& c = m.config();
  const std::string p = block_prefix(l);
  Var normed;
  Var a = attention_matrix_graph(g, m, bp, l, P, &normed);
  if (opt.frozen) a = g.detach(a);
  if (attention_out) *attention_out = a;
  if (trace) {
    trace->input = g.value(P);
    trace->attention = g.value(a);
  }
  Var out;
  if (c.standard_attention) {
    Var v = ag::matmul_nt(g, normed, bp.at(p + "att.value"));
    Var z = ag::attention_apply(g, a, v, c.heads, c.tokens());
    out = ag::matmul_nt(g, z, bp.at(p + "att.proj"));
  } else {
    Var v = ag::bcos_linear(g, P, bp.at(p + "att.value"), m.value_spec(opt.frozen), trace ? &trace->value : nullptr);
    Var z = ag::attention_apply(g, a, v, c.heads, c.tokens());
    out = ag::bcos_linear(g, z, bp.at(p + "att.proj"), m.proj_spec(opt.frozen), trace ? &trace->proj : nullptr);
  }
  if (c.fault_drop_skip) return out;
  return ag::add(g, P, out);
}

template <class T>
Var mlp_block_graph(Graph<T>& g, const BcosViT<T>& m, const std::map<std::string, Var>& bp, std::size_t l, Var P,
                    const ForwardOptions& opt, typename ForwardTrace<T>::Block* trace) {
  const std::string p = block_prefix(l);
  if (trace) trace->mid = g.value(P);
  Var h = ag::bcos_linear(g, P, bp.at(p + "mlp.fc1"), m.fc1_spec(opt.frozen), trace ? &trace->fc1 : nullptr);
  h = ag::bcos_linear(g, h, bp.at(p + "mlp.fc2"), m.fc2_spec(opt.frozen), trace ? &trace->fc2 : nullptr);
  return ag::add(g, P, h);
}

/// Pooled B-cos classifier with output scaling and the fixed logit bias.
template <class T>
Var classify_graph(Graph<T>& g, const BcosViT<T>& m, const std::map<std::string, Var>& bp, Var P,
                   const ForwardOptions& opt, std::type_identity_t<ForwardTrace<T>>* trace) {
  const auto& c = m.config();
  Var pooled = ag::mean_pool(g, P, c.tokens());
  Var y = ag::bcos_linear(g, pooled, bp.at("classifier.weight"), m.classifier_spec(opt.frozen),
                          trace ? &trace->classifier : nullptr);
  y = ag::scale(g, y, T(1) / T(c.output_scale));
  return ag::add_tiled(g, y, g.constant(Tensor<T>(Dims{c.classes}, T(c.logit_bias))));
}

/// Transformer blocks and classifier on a token matrix.
template <class T>
Var transformer_graph(Graph<T>& g, const BcosViT<T>& m, const std::map<std::string, Var>& bp, Var P,
                      const ForwardOptions& opt, std::type_identity_t<ForwardTrace<T>>* trace, std::vector<Var>* attention = nullptr) {
  const auto& c = m.config();
  if (trace) trace->blocks.assign(c.blocks, {});
  for (std::size_t l = 0; l < c.blocks; ++l) {
    auto* bt = trace ? &trace->blocks[l] : nullptr;
    Var a;
    P = attention_block_graph(g, m, bp, l, P, opt, bt, &a);
    if (attention) attention->push_back(a);
    P = mlp_block_graph(g, m, bp, l, P, opt, bt);
  }
  if (trace) trace->final_tokens = g.value(P);
  return P;
}

template <class T>
void check_input_extent(const BcosViT<T>& m, const Tensor<T>& x) {
  if (x.numel() % m.config().input_size() != 0 || x.empty())
    throw ShapeError("input extent " + dims_str(x.dims()) + " does not match the model's " +
                     std::to_string(m.config().input_size()) + " values per image");
}

/// Builds the full forward graph for a batch x [B x (6*H*W)].
template <class T>
ForwardGraph<T> build_forward(Graph<T>& g, const BcosViT<T>& m, const Tensor<T>& x, const ForwardOptions& opt = {},
                              ForwardTrace<T>* trace = nullptr) {
  check_input_extent(m, x);
  ForwardGraph<T> fg;
  fg.params = bind_parameters(g, m, opt);
  const std::size_t batch = x.numel() / m.config().input_size();
  fg.x = g.input(x.reshaped(Dims{batch, m.config().input_size()}), opt.input_grad);
  fg.tokens = tokenise_graph(g, m, fg.params, fg.x, opt, trace);
  fg.final_tokens = transformer_graph(g, m, fg.params, fg.tokens, opt, trace, &fg.attention);
  fg.logits = classify_graph(g, m, fg.params, fg.final_tokens, opt, trace);
  return fg;
}

/// Logits [B x M] for a batch of encoded images.
template <class T>
Tensor<T> forward(const BcosViT<T>& m, const Tensor<T>& x, ForwardTrace<T>* trace = nullptr) {
  Graph<T> g;
  auto fg = build_forward(g, m, x, {}, trace);
  return g.value(fg.logits);
}

/// Logits [M] for one encoded image.
template <class T>
Tensor<T> forward(const BcosViT<T>& m, const EncodedImage<T>& x, ForwardTrace<T>* trace = nullptr) {
  return forward(m, x.pixels, trace).reshaped(Dims{m.config().classes});
}

// ---------------------------------------------------------------------------
// Stage-level entry points on single token matrices [N x D].

template <class T>
struct TokenMatrix {
  Tensor<T> tokens;  // N x D, one token per row
  std::string producer;
};

/// Tokens of one image; the trace holds the per-layer linear maps.
template <class T>
TokenMatrix<T> tokenise(const BcosViT<T>& m, const EncodedImage<T>& x, ForwardTrace<T>* trace = nullptr) {
  const auto& c = m.config();
  if (x.pixels.dims() != Dims{BcosViTConfig::in_channels, c.image_size, c.image_size})
    throw ShapeError("tokenise: image extent " + dims_str(x.pixels.dims()) + " does not match the model");
  Graph<T> g;
  auto bp = bind_parameters(g, m, {});
  Var xv = g.constant(x.pixels.reshaped(Dims{1, c.input_size()}));
  Var t = tokenise_graph(g, m, bp, xv, {}, trace);
  return {g.value(t), "tokens"};
}

template <class T>
void check_tokens(const BcosViT<T>& m, const Tensor<T>& P) {
  const auto& c = m.config();
  if (P.dims() != Dims{c.tokens(), c.dim})
    throw ShapeError("token matrix " + dims_str(P.dims()) + ", expected " + dims_str(Dims{c.tokens(), c.dim}));
}

/// Attention matrices of block l, [H x N x N]; rows are queries.
template <class T>
Tensor<T> attention_matrix(const BcosViT<T>& m, std::size_t l, const Tensor<T>& P) {
  check_tokens(m, P);
  Graph<T> g;
  auto bp = bind_parameters(g, m, {});
  Var a = attention_matrix_graph(g, m, bp, l, g.constant(P));
  const auto& c = m.config();
  return g.value(a).reshaped(Dims{c.heads, c.tokens(), c.tokens()});
}

/// Effective (DN x DN) matrix of an attention block, identity skip included.
template <class T>
Tensor<T> attention_linear_map(const BcosViT<T>& m, const typename ForwardTrace<T>::Block& b) {
  const auto& c = m.config();
  if (c.standard_attention) throw Error("standard attention has no exact linear map");
  const std::size_t n = c.tokens(), d = c.dim, dh = c.head_dim(), dn = d * n;
  Tensor<T> mixed(Dims{dn, dn});
  for (std::size_t k = 0; k < n; ++k) {
    const Tensor<T> wv = b.value.effective_matrix(k);
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t j = 0; j < d; ++j) {
        const T a = b.attention[((j / dh) * n + q) * n + k];
        if (a == T(0)) continue;
        T* dst = mixed.data() + (q * d + j) * dn + k * d;
        const T* src = wv.data() + j * d;
        for (std::size_t i = 0; i < d; ++i) dst[i] = a * src[i];
      }
  }
  Tensor<T> out = Tensor<T>::identity(dn);
  for (std::size_t q = 0; q < n; ++q) {
    const Tensor<T> wu = b.proj.effective_matrix(q);
    MatMap<T> rows(out.data() + q * d * dn, Eigen::Index(d), Eigen::Index(dn));
    ConstMatMap<T> src(mixed.data() + q * d * dn, Eigen::Index(d), Eigen::Index(dn));
    rows.noalias() += as_matrix(wu) * src;
  }
  return out;
}

/// Effective (DN x DN) matrix of an MLP block: block diagonal plus identity.
template <class T>
Tensor<T> mlp_linear_map(const BcosViT<T>& m, const typename ForwardTrace<T>::Block& b) {
  const auto& c = m.config();
  const std::size_t n = c.tokens(), d = c.dim, dn = d * n;
  Tensor<T> out = Tensor<T>::identity(dn);
  for (std::size_t t = 0; t < n; ++t) {
    const Tensor<T> block = bcosvit::matmul(b.fc2.effective_matrix(t), b.fc1.effective_matrix(t));
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out(t * d + i, t * d + j) += block(i, j);
  }
  return out;
}

template <class T>
struct BlockResult {
  Tensor<T> tokens;              // N x D
  std::optional<Tensor<T>> map;  // (DN x DN); absent for standard attention
};

template <class T>
BlockResult<T> attention_block_forward(const BcosViT<T>& m, std::size_t l, const Tensor<T>& P) {
  check_tokens(m, P);
  Graph<T> g;
  auto bp = bind_parameters(g, m, {});
  typename ForwardTrace<T>::Block trace;
  Var out = attention_block_graph(g, m, bp, l, g.constant(P), {}, &trace);
  BlockResult<T> r{g.value(out), std::nullopt};
  if (m.config().exact()) r.map = attention_linear_map(m, trace);
  return r;
}

template <class T>
BlockResult<T> mlp_block_forward(const BcosViT<T>& m, std::size_t l, const Tensor<T>& P) {
  check_tokens(m, P);
  Graph<T> g;
  auto bp = bind_parameters(g, m, {});
  typename ForwardTrace<T>::Block trace;
  Var out = mlp_block_graph(g, m, bp, l, g.constant(P), {}, &trace);
  return {g.value(out), mlp_linear_map(m, trace)};
}

/// Logits [M] of a final token matrix.
template <class T>
Tensor<T> classify(const BcosViT<T>& m, const Tensor<T>& P) {
  check_tokens(m, P);
  Graph<T> g;
  auto bp = bind_parameters(g, m, {});
  Var y = classify_graph(g, m, bp, g.constant(P), {}, nullptr);
  return g.value(y).reshaped(Dims{m.config().classes});
}

/// Logits [M] from a token matrix entering the first block.
template <class T>
Tensor<T> forward_tokens(const BcosViT<T>& m, const Tensor<T>& P) {
  check_tokens(m, P);
  Graph<T> g;
  auto bp = bind_parameters(g, m, {});
  Var fin = transformer_graph(g, m, bp, g.constant(P), {}, nullptr);
  Var y = classify_graph(g, m, bp, fin, {}, nullptr);
  return g.value(y).reshaped(Dims{m.config().classes});
}

}  // namespace bcosvit
