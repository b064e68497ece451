// Post-hoc baselines on the same model (final-layer attention, attention
// rollout, Input x Gradient, Integrated Gradients) and a dispatcher that also
// covers the model-inherent contribution maps.
#pragma once

#include "bcosvit/linear_summary.hpp"

namespace bcosvit {

enum class Method { inherent, finatt, rollout, ixg, intgrad };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::inherent: return "inherent";
    case Method::finatt: return "finatt";
    case Method::rollout: return "rollout";
    case Method::ixg: return "ixg";
    case Method::intgrad: return "intgrad";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::inherent, Method::finatt, Method::rollout, Method::ixg, Method::intgrad})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown explanation method '" + s + "'");
}

struct ExplainerSpec {
  Method method = Method::inherent;
  std::size_t steps = 32;  // IntGrad
  std::size_t target = 0;
  void validate() const {
    if (steps < 1) throw ConfigError("IntGrad needs at least one step");
  }
};

/// Spreads per-token scores [N] uniformly over each token's stride footprint,
/// giving an image-sized map whose total equals the token total.
template <class T>
Tensor<T> upsample_tokens(const BcosViTConfig& c, const std::vector<T>& scores) {
  const std::size_t grid = c.token_grid(), f = c.token_footprint();
  if (scores.size() != grid * grid) throw ShapeError("upsample_tokens: expected one score per token");
  Tensor<T> out(Dims{c.image_size, c.image_size});
  const T share = T(1) / T(f * f);
  for (std::size_t y = 0; y < c.image_size; ++y)
    for (std::size_t x = 0; x < c.image_size; ++x) out(y, x) = scores[(y / f) * grid + x / f] * share;
  return out;
}

/// Head average of attention [H x N x N] -> [N x N].
template <class T>
Tensor<T> head_mean(const Tensor<T>& a) {
  const std::size_t h = a.dim(0), n = a.dim(1);
  Tensor<T> out(Dims{n, n});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < n * n; ++j) out[j] += a[i * n * n + j];
  out *= T(1) / T(h);
  return out;
}

/// Column means of a square matrix: the score each key receives averaged
/// over queries.
template <class T>
std::vector<T> query_mean(const Tensor<T>& a) {
  const std::size_t n = a.rows();
  std::vector<T> s(a.cols(), T(0));
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k < a.cols(); ++k) s[k] += a(q, k) / T(n);
  return s;
}

/// Rollout product A_L ... A_1 of the residual-adjusted, row-renormalised
/// head averages 0.5 * mean_h(A_l) + 0.5 * I. Each entry is [H x N x N].
template <class T>
Tensor<T> rollout_matrix(const std::vector<Tensor<T>>& attentions) {
  if (attentions.empty()) throw Error("rollout needs at least one attention block");
  const std::size_t n = attentions.front().dim(1);
  Tensor<T> r = Tensor<T>::identity(n);
  for (const auto& a : attentions) {
    if (a.rank() != 3 || a.dim(1) != n || a.dim(2) != n) throw ShapeError("rollout: attention extents differ");
    Tensor<T> bar = head_mean(a) * T(0.5);
    for (std::size_t i = 0; i < n; ++i) bar(i, i) += T(0.5);
    for (std::size_t i = 0; i < n; ++i) {
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) s += bar(i, j);
      for (std::size_t j = 0; j < n; ++j) bar(i, j) /= s;
    }
    r = matmul(bar, r);
  }
  return r;
}

/// Attention matrices [H x N x N] of every block for one image.
template <class T>
std::vector<Tensor<T>> attention_maps(const BcosViT<T>& m, const Tensor<T>& x) {
  const auto& c = m.config();
  ForwardTrace<T> tr;
  forward(m, flat_input(m, x).reshaped(Dims{1, c.input_size()}), &tr);
  std::vector<Tensor<T>> out;
  for (auto& b : tr.blocks) out.push_back(b.attention.reshaped(Dims{c.heads, c.tokens(), c.tokens()}));
  return out;
}

template <class T>
AttributionMap<T> finatt(const BcosViT<T>& m, const Tensor<T>& x) {
  auto att = attention_maps(m, x);
  return {upsample_tokens(m.config(), query_mean(head_mean(att.back()))), "finatt", 0};
}

template <class T>
AttributionMap<T> rollout(const BcosViT<T>& m, const Tensor<T>& x) {
  auto att = attention_maps(m, x);
  return {upsample_tokens(m.config(), query_mean(rollout_matrix(att))), "rollout", 0};
}

namespace detail {

/// Mean gradient of logit k over a batch of scaled copies alpha_s * x.
template <class T>
Tensor<T> mean_input_gradient(const BcosViT<T>& m, const Tensor<T>& x, std::size_t k, const std::vector<T>& alphas) {
  const auto& c = m.config();
  check_class(k, c.classes);
  const std::size_t d = x.numel(), b = alphas.size();
  Tensor<T> batch(Dims{b, d});
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < d; ++i) batch(s, i) = alphas[s] * x[i];
  Graph<T> g;
  ForwardOptions opt;
  opt.input_grad = true;
  auto fg = build_forward(g, m, batch, opt);
  // Sum of logit k over the batch: each image's gradient lands in its own row.
  Tensor<T> sel(g.value(fg.logits).dims());
  for (std::size_t s = 0; s < b; ++s) sel(s, k) = T(1);
  g.backward(ag::sum(g, ag::mul(g, fg.logits, g.constant(sel))));
  const Tensor<T> gx = g.grad(fg.x);
  Tensor<T> mean(Dims{d});
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t i = 0; i < d; ++i) mean[i] += gx(s, i) / T(b);
  return mean;
}

}  // namespace detail

/// Input x Gradient of logit k through the full (non-frozen) forward pass.
template <class T>
AttributionMap<T> ixg(const BcosViT<T>& m, const Tensor<T>& x, std::size_t k) {
  const Tensor<T> xf = flat_input(m, x);
  const auto grad = detail::mean_input_gradient(m, xf, k, {T(1)});
  const std::size_t s = m.config().image_size;
  return {channel_sum(grad, xf, s, s), "ixg", k};
}

/// Integrated Gradients from the zero image with the right-point rule:
/// x * mean_{s=1..steps} grad(s/steps * x). steps = 1 reduces to IxG.
template <class T>
AttributionMap<T> intgrad(const BcosViT<T>& m, const Tensor<T>& x, std::size_t k, std::size_t steps = 32) {
  if (steps < 1) throw ConfigError("IntGrad needs at least one step");
  const Tensor<T> xf = flat_input(m, x);
  std::vector<T> alphas(steps);
  for (std::size_t s = 0; s < steps; ++s) alphas[s] = T(s + 1) / T(steps);
  const auto grad = detail::mean_input_gradient(m, xf, k, alphas);
  const std::size_t sz = m.config().image_size;
  return {channel_sum(grad, xf, sz, sz), "intgrad", k};
}

/// Model-inherent contribution map of class k (frozen adjoint).
template <class T>
AttributionMap<T> inherent(const BcosViT<T>& m, const Tensor<T>& x, std::size_t k) {
  const Tensor<T> xf = flat_input(m, x);
  AdjointExtractor<T> ex(m, xf);
  const std::size_t s = m.config().image_size;
  return {channel_sum(ex.row(k), xf, s, s), "inherent", k};
}

template <class T>
AttributionMap<T> explain(const BcosViT<T>& m, const Tensor<T>& x, const ExplainerSpec& spec) {
  spec.validate();
  detail::check_class(spec.target, m.config().classes);
  AttributionMap<T> out;
  switch (spec.method) {
    case Method::inherent: out = inherent(m, x, spec.target); break;
    case Method::finatt: out = finatt(m, x); break;
    case Method::rollout: out = rollout(m, x); break;
    case Method::ixg: out = ixg(m, x, spec.target); break;
    case Method::intgrad: out = intgrad(m, x, spec.target, spec.steps); break;
  }
  out.target = spec.target;
  out.values.require_finite(to_string(spec.method).c_str());
  return out;
}

}  // namespace bcosvit
