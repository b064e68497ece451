// Extraction of the per-input linear map W(x) with logits = W(x) x + b,
// contribution maps, and the two rendering styles.
//
// Two extractors are provided. extract_explicit composes the recorded stage
// matrices classifier * (MLP * Att)_L ... (MLP * Att)_1 and pulls the result
// back through the tokeniser. AdjointExtractor differentiates the frozen
// forward graph, giving one row of W(x) per backward pass.
#pragma once

#include "bcosvit/model.hpp"

namespace bcosvit {

template <class T>
struct LinearSummary {
  Tensor<T> W;       // M x (6*H*W), input in channel-major order
  Tensor<T> bias;    // M; the logit bias plus any input-independent token term
  Tensor<T> input;   // [6*H*W], the x the summary belongs to
  Tensor<T> logits;  // forward(x)
  std::size_t classes() const { return W.rows(); }
};

/// Per-pixel scalar importance map.
template <class T>
struct AttributionMap {
  Tensor<T> values;  // H x W
  std::string method;
  std::size_t target = 0;
};

namespace detail {

template <class T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

inline void check_class(std::size_t k, std::size_t classes) {
  if (k >= classes)
    throw Error("class index " + std::to_string(k) + " out of range for " + std::to_string(classes) + " classes");
}

}  // namespace detail

/// Pulls row vectors over token entries [R x (N*D)] back through the recorded
/// tokeniser maps, giving [R x (6*H*W)] in channel-major input order.
template <class T>
Tensor<T> tokeniser_transpose(const BcosViT<T>& m, const ForwardTrace<T>& tr, const Tensor<T>& g) {
  const auto& c = m.config();
  const std::size_t rows = g.rows();
  Tensor<T> cur = g;
  for (std::size_t i = tr.convs.size(); i-- > 0;) {
    const auto& geo = tr.convs[i].geometry;
    const auto& rec = tr.convs[i].record;
    const std::size_t oh = geo.out_height(), ow = geo.out_width(), out = rec.out, ps = geo.patch_size();
    const std::size_t kc = geo.kernel * geo.channels, in_size = geo.height * geo.width * geo.channels;
    if (cur.cols() != oh * ow * out || rec.rows() != oh * ow)
      throw ShapeError("tokeniser_transpose: trace does not match a single image");
    Tensor<T> next(Dims{rows, in_size});
    Tensor<T> patch(Dims{rows, ps});
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t p = oy * ow + ox;
        const Tensor<T> w = rec.effective_matrix(p);
        detail::ConstStridedMap<T> gp(cur.data() + p * out, Eigen::Index(rows), Eigen::Index(out),
                                      Eigen::OuterStride<>(Eigen::Index(cur.cols())));
        as_matrix(patch).noalias() = gp * as_matrix(w);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t ky = 0; ky < geo.kernel; ++ky) {
            T* dst = next.data() + r * in_size + geo.source(oy, ox, ky, 0, 0);
            const T* src = patch.data() + r * ps + ky * kc;
            for (std::size_t j = 0; j < kc; ++j) dst[j] += src[j];
          }
      }
    if (i == c.cnn.size()) next *= T(c.feature_scale);
    cur = std::move(next);
  }
  const std::size_t hw = c.image_size * c.image_size, ch = BcosViTConfig::in_channels;
  Tensor<T> out(Dims{rows, ch * hw});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < ch; ++k) out(r, k * hw + p) = cur(r, p * ch + k);
  return out;
}

/// Applies the recorded tokeniser maps to x, giving tokens [N x D] without
/// any embedding; equals the tokeniser output when x is the traced input.
template <class T>
Tensor<T> tokeniser_apply(const BcosViT<T>& m, const ForwardTrace<T>& tr, const Tensor<T>& x) {
  const auto& c = m.config();
  const std::size_t hw = c.image_size * c.image_size, ch = BcosViTConfig::in_channels;
  if (x.numel() != ch * hw) throw ShapeError("tokeniser_apply: input extent mismatch");
  Tensor<T> cur(Dims{hw, ch});
  for (std::size_t k = 0; k < ch; ++k)
    for (std::size_t p = 0; p < hw; ++p) cur(p, k) = x[k * hw + p];
  for (std::size_t i = 0; i < tr.convs.size(); ++i) {
    if (i == c.cnn.size()) cur *= T(c.feature_scale);
    const auto& geo = tr.convs[i].geometry;
    const auto& rec = tr.convs[i].record;
    const std::size_t oh = geo.out_height(), ow = geo.out_width(), kc = geo.kernel * geo.channels;
    Tensor<T> next(Dims{oh * ow, rec.out});
    std::vector<T> patch(geo.patch_size());
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t ky = 0; ky < geo.kernel; ++ky) {
          const T* src = cur.data() + geo.source(oy, ox, ky, 0, 0);
          std::copy(src, src + kc, patch.begin() + ky * kc);
        }
        const Tensor<T> w = rec.effective_matrix(oy * ow + ox);
        for (std::size_t j = 0; j < rec.out; ++j) {
          T s = 0;
          for (std::size_t q = 0; q < patch.size(); ++q) s += w(j, q) * patch[q];
          next(oy * ow + ox, j) = s;
        }
      }
    cur = std::move(next);
  }
  return cur;
}

/// Classifier stage as an M x (N*D) matrix acting on vec(P).
template <class T>
Tensor<T> classifier_linear_map(const BcosViT<T>& m, const ForwardTrace<T>& tr) {
  const auto& c = m.config();
  const std::size_t n = c.tokens(), d = c.dim;
  const Tensor<T> w = tr.classifier.effective_matrix(0);
  const T f = T(1) / (T(c.output_scale) * T(n));
  Tensor<T> out(Dims{c.classes, n * d});
  for (std::size_t k = 0; k < c.classes; ++k)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < d; ++j) out(k, t * d + j) = w(k, j) * f;
  return out;
}

template <class T>
Tensor<T> flat_input(const BcosViT<T>& m, const Tensor<T>& x) {
  if (x.numel() != m.config().input_size())
    throw ShapeError("input extent " + dims_str(x.dims()) + " does not match one image of the model");
  return x.reshaped(Dims{x.numel()});
}

template <class T>
Tensor<T> flat_input(const BcosViT<T>& m, const EncodedImage<T>& x) {
  return flat_input(m, x.pixels);
}

/// W(x) by explicit composition of the recorded stage matrices.
template <class T, class X>
LinearSummary<T> extract_explicit(const BcosViT<T>& m, const X& image) {
  const auto& c = m.config();
  if (!c.exact()) throw Error("extract_explicit: standard attention has no exact linear summary");
  LinearSummary<T> s;
  s.input = flat_input(m, image);
  ForwardTrace<T> tr;
  s.logits = forward(m, s.input.reshaped(Dims{1, s.input.numel()}), &tr).reshaped(Dims{c.classes});
  Tensor<T> r = classifier_linear_map(m, tr);
  for (std::size_t l = c.blocks; l-- > 0;) {
    r = matmul(r, mlp_linear_map(m, tr.blocks[l]));
    r = matmul(r, attention_linear_map(m, tr.blocks[l]));
  }
  s.W = tokeniser_transpose(m, tr, r);
  s.bias = Tensor<T>(Dims{c.classes}, T(c.logit_bias));
  if (c.positional == Positional::embedding) {
    const Tensor<T>& e = m.params()["tokens.embedding"];
    for (std::size_t k = 0; k < c.classes; ++k)
      for (std::size_t i = 0; i < e.numel(); ++i) s.bias[k] += r(k, i) * e[i];
  }
  return s;
}

/// Rows of W(x) from the adjoint of the frozen forward graph. The graph is
/// built once; each row costs one backward pass.
template <class T>
class AdjointExtractor {
 public:
  template <class X>
  AdjointExtractor(const BcosViT<T>& m, const X& image) : model_(&m) {
    const auto& c = m.config();
    if (!c.exact()) throw Error("adjoint extraction: standard attention has no exact linear summary");
    input_ = flat_input(m, image);
    ForwardOptions opt;
    opt.frozen = true;
    opt.input_grad = true;
    opt.embedding_grad = c.positional == Positional::embedding;
    fg_ = build_forward(graph_, m, input_.reshaped(Dims{1, input_.numel()}), opt);
    logits_ = graph_.value(fg_.logits).reshaped(Dims{c.classes});
  }

  const Tensor<T>& input() const { return input_; }
  const Tensor<T>& logits() const { return logits_; }
  std::size_t classes() const { return logits_.numel(); }

  /// Throws when x is not the input the graph was built for.
  template <class X>
  void check_input(const X& image) const {
    const Tensor<T> x = flat_input(*model_, image);
    if (x.vec() != input_.vec()) throw Error("adjoint extraction: input changed since the forward pass (stale cache)");
  }

  /// Row k of W(x), [6*H*W].
  Tensor<T> row(std::size_t k) {
    run(k);
    return graph_.grad(fg_.x).reshaped(Dims{input_.numel()});
  }
  template <class X>
  Tensor<T> row(const X& image, std::size_t k) {
    check_input(image);
    return row(k);
  }

  /// Bias of class k; includes the token-embedding term when present.
  T bias(std::size_t k) {
    const auto& c = model_->config();
    T b = T(c.logit_bias);
    if (c.positional != Positional::embedding) return b;
    run(k);
    Var e = fg_.params.at("tokens.embedding");
    const Tensor<T> ge = graph_.grad(e);
    const Tensor<T>& ev = graph_.value(e);
    for (std::size_t i = 0; i < ev.numel(); ++i) b += ge[i] * ev[i];
    return b;
  }

  LinearSummary<T> summary() {
    LinearSummary<T> s;
    s.input = input_;
    s.logits = logits_;
    s.W = Tensor<T>(Dims{classes(), input_.numel()});
    s.bias = Tensor<T>(Dims{classes()});
    for (std::size_t k = 0; k < classes(); ++k) {
      const Tensor<T> r = row(k);
      std::copy(r.values().begin(), r.values().end(), s.W.data() + k * input_.numel());
      s.bias[k] = bias(k);
    }
    return s;
  }

 private:
  void run(std::size_t k) {
    detail::check_class(k, classes());
    if (last_ == k) return;
    graph_.backward(ag::pick(graph_, fg_.logits, k));
    last_ = k;
  }

  const BcosViT<T>* model_;
  Graph<T> graph_;
  ForwardGraph<T> fg_;
  Tensor<T> input_, logits_;
  std::size_t last_ = std::size_t(-1);
};

/// Row k of W(x) via the frozen adjoint.
template <class T, class X>
Tensor<T> extract_adjoint(const BcosViT<T>& m, const X& image, std::size_t k) {
  return AdjointExtractor<T>(m, image).row(k);
}

template <class T, class X>
LinearSummary<T> extract_adjoint_summary(const BcosViT<T>& m, const X& image) {
  return AdjointExtractor<T>(m, image).summary();
}

/// Channel-summed elementwise product of a W row with x: [H x W].
template <class T>
Tensor<T> channel_sum(const Tensor<T>& row, const Tensor<T>& x, std::size_t height, std::size_t width) {
  const std::size_t hw = height * width;
  if (row.numel() != x.numel() || x.numel() % hw != 0) throw ShapeError("channel_sum: extent mismatch");
  Tensor<T> out(Dims{height, width});
  for (std::size_t i = 0; i < x.numel(); ++i) out[i % hw] += row[i] * x[i];
  return out;
}

/// c_k(x) = W(x)_k * x, summed over the six colour channels.
template <class T>
AttributionMap<T> contribution_map(const LinearSummary<T>& s, const Tensor<T>& x, std::size_t k) {
  detail::check_class(k, s.classes());
  if (x.numel() != s.input.numel() || !std::equal(x.values().begin(), x.values().end(), s.input.values().begin()))
    throw Error("contribution_map: summary was computed for a different input");
  const std::size_t hw = x.numel() / BcosViTConfig::in_channels;
  const std::size_t side = std::size_t(std::lround(std::sqrt(double(hw))));
  Tensor<T> row(Dims{s.W.cols()}, std::vector<T>(s.W.data() + k * s.W.cols(), s.W.data() + (k + 1) * s.W.cols()));
  return {channel_sum(row, s.input, side, hw / side), "inherent", k};
}

template <class T>
AttributionMap<T> contribution_map(const LinearSummary<T>& s, std::size_t k) {
  return contribution_map(s, s.input, k);
}

/// q-th percentile (0..100) with linear interpolation between order statistics.
template <class T>
T percentile(std::vector<T> v, double q) {
  if (v.empty()) throw Error("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * double(v.size() - 1);
  const std::size_t lo = std::size_t(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double f = pos - double(lo);
  return T(double(v[lo]) * (1 - f) + double(v[hi]) * f);
}

inline constexpr double kRenderPercentile = 99.9;

/// Per-pixel 6-vector norms of a W row.
template <class T>
std::vector<T> pixel_weight_norms(const Tensor<T>& row) {
  const std::size_t hw = row.numel() / BcosViTConfig::in_channels;
  std::vector<T> n(hw, T(0));
  for (std::size_t c = 0; c < BcosViTConfig::in_channels; ++c)
    for (std::size_t p = 0; p < hw; ++p) n[p] += row[c * hw + p] * row[c * hw + p];
  for (auto& v : n) v = std::sqrt(v);
  return n;
}

/// RGBA rendering [4 x H x W] of a W row. Colour r = w_r / (w_r + w_{1-r})
/// clipped to [0, 1] (0.5 when the sum is <= 1e-8); alpha is the pixel weight
/// norm over its 99.9th percentile, clipped to 1, and 0 wherever the pixel's
/// contribution is not positive. `norm_ref` replaces the percentile for
/// normalisation shared across several renderings.
template <class T>
Tensor<float> render_colour_weights(const Tensor<T>& row, const Tensor<T>& x, std::size_t height, std::size_t width,
                                    std::optional<T> norm_ref = std::nullopt) {
  const std::size_t hw = height * width;
  if (row.numel() != 6 * hw || x.numel() != 6 * hw) throw ShapeError("render_colour_weights: extent mismatch");
  const auto norms = pixel_weight_norms(row);
  const T ref = norm_ref ? *norm_ref : percentile(norms, kRenderPercentile);
  const Tensor<T> contrib = channel_sum(row, x, height, width);
  Tensor<float> out(Dims{4, height, width});
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const T a = row[c * hw + p], b = row[(c + 3) * hw + p];
      const T den = a + b;
      out[c * hw + p] = den <= T(1e-8) ? 0.5f : float(std::clamp(a / den, T(0), T(1)));
    }
    const T alpha = ref > T(0) ? std::min(norms[p] / ref, T(1)) : T(0);
    out[3 * hw + p] = contrib[p] > T(0) ? float(alpha) : 0.0f;
  }
  return out;
}

template <class T>
Tensor<float> render_colour_weights(const LinearSummary<T>& s, std::size_t k, std::size_t height, std::size_t width,
                                    std::optional<T> norm_ref = std::nullopt) {
  detail::check_class(k, s.classes());
  Tensor<T> row(Dims{s.W.cols()}, std::vector<T>(s.W.data() + k * s.W.cols(), s.W.data() + (k + 1) * s.W.cols()));
  return render_colour_weights(row, s.input, height, width, norm_ref);
}

/// RGBA over a uniform background grey level -> RGB.
inline Tensor<float> composite(const Tensor<float>& rgba, float background = 0.0f) {
  const std::size_t hw = rgba.dim(1) * rgba.dim(2);
  Tensor<float> out(Dims{3, rgba.dim(1), rgba.dim(2)});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < hw; ++p) {
      const float a = rgba[3 * hw + p];
      out[c * hw + p] = a * rgba[c * hw + p] + (1 - a) * background;
    }
  return out;
}

/// Clamp scale v = max(99.9th percentile of |values|, 1e-12).
template <class T>
T heatmap_scale(const Tensor<T>& values) {
  std::vector<T> a(values.numel());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::abs(values[i]);
  return std::max(percentile(std::move(a), kRenderPercentile), T(1e-12));
}

/// Shared clamp scale over several maps.
template <class T>
T heatmap_scale(const std::vector<AttributionMap<T>>& maps) {
  std::vector<T> a;
  for (auto& m : maps)
    for (T v : m.values.values()) a.push_back(std::abs(v));
  return std::max(percentile(std::move(a), kRenderPercentile), T(1e-12));
}

/// Blue-white-red rendering [3 x H x W] over [-v, v].
template <class T>
Tensor<float> render_heatmap(const AttributionMap<T>& map, std::optional<T> v = std::nullopt) {
  const auto& vals = map.values;
  const T scale = v ? std::max(*v, T(1e-12)) : heatmap_scale(vals);
  const std::size_t hw = vals.numel();
  Tensor<float> out(Dims{3, vals.dim(0), vals.dim(1)}, 1.0f);
  for (std::size_t p = 0; p < hw; ++p) {
    const float t = float(std::clamp(vals[p] / scale, T(-1), T(1)));
    if (t > 0) {
      out[hw + p] = 1 - t;
      out[2 * hw + p] = 1 - t;
    } else if (t < 0) {
      out[p] = 1 + t;
      out[hw + p] = 1 + t;
    }
  }
  return out;
}

}  // namespace bcosvit
