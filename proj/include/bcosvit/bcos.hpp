// The B-cos transform and its companions.
//
// A B-cos unit with weight w computes
//     out = gamma * |cos(a, w)|^(B-1) * (w_hat . a),
// i.e. a linear map whose rows are rescaled by how well they align with the
// input. With MaxOut every output is the larger of two consecutive units.
// Every function here can report the effective matrix W(a) with out = W(a) a.
#pragma once

#include "bcosvit/autograd.hpp"

#include <cstdint>

namespace bcosvit {

/// Floor applied to input and weight norms inside cos(a, w).
inline constexpr double kNormFloor = 1e-6;

/// Output scale gamma = f / sqrt(fan_in).
inline double bcos_gamma(double f, std::size_t fan_in) { return f / std::sqrt(double(fan_in)); }

struct BcosSpec {
  double b_exponent = 2;
  double gamma = 1;
  std::size_t maxout = 1;
  /// Treat the cos scaling and MaxOut selection as constants when
  /// differentiating (the frozen dynamic-linear map).
  bool frozen = false;
};

template <class T>
struct BcosLinear {
  Tensor<T> weight;  // (out * maxout) x in
  BcosSpec spec;

  BcosLinear(Tensor<T> w, double b_exponent, std::size_t maxout, double gamma)
      : weight(std::move(w)), spec{b_exponent, gamma, maxout, false} {
    require_rank2(weight.dims(), "BcosLinear");
    if (b_exponent < 1) throw ConfigError("B-cos exponent must be >= 1");
    if (maxout != 1 && maxout != 2) throw ConfigError("maxout units must be 1 or 2");
    if (weight.rows() % maxout != 0) throw ConfigError("weight rows not divisible by maxout units");
    if (!(gamma > 0)) throw ConfigError("B-cos gamma must be positive");
    for (std::size_t i = 0; i < weight.rows(); ++i) {
      T n = 0;
      for (std::size_t j = 0; j < weight.cols(); ++j) n += weight(i, j) * weight(i, j);
      if (!(std::sqrt(n) > T(kNormFloor))) throw ConfigError("B-cos weight row " + std::to_string(i) + " has zero norm");
    }
  }
  std::size_t in_features() const { return weight.cols(); }
  std::size_t out_features() const { return weight.rows() / spec.maxout; }
};

/// Recorded dynamic factors of one bcos_linear call; enough to rebuild the
/// effective matrix of every input row.
template <class T>
struct BcosRecord {
  Tensor<T> unit_weights;              // row-normalised weights, units x in
  Tensor<T> scales;                    // rows x units: gamma * |cos|^(B-1)
  std::vector<std::uint32_t> selected;  // rows x out: unit chosen by MaxOut
  std::size_t out = 0;

  std::size_t rows() const { return scales.rows(); }
  std::size_t in() const { return unit_weights.cols(); }
  /// Effective weight of output j for input row r: scales(r, i) * w_hat_i.
  void effective_row(std::size_t r, std::size_t j, T* dst, T factor = T(1)) const {
    const std::size_t i = selected[r * out + j];
    const T s = scales(r, i) * factor;
    const T* w = unit_weights.data() + i * in();
    for (std::size_t c = 0; c < in(); ++c) dst[c] = s * w[c];
  }
  /// out x in effective matrix of input row r.
  Tensor<T> effective_matrix(std::size_t r) const {
    Tensor<T> m(Dims{out, in()});
    for (std::size_t j = 0; j < out; ++j) effective_row(r, j, m.data() + j * in());
    return m;
  }
};

namespace detail {

template <class T>
Tensor<T> normalise_rows(const Tensor<T>& w, std::vector<T>& norms) {
  Tensor<T> out = w;
  norms.assign(w.rows(), T(0));
  const std::size_t cols = w.cols();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    T n = 0;
    for (std::size_t j = 0; j < cols; ++j) n += w(i, j) * w(i, j);
    n = std::max(std::sqrt(n), T(kNormFloor));
    norms[i] = n;
    for (std::size_t j = 0; j < cols; ++j) out(i, j) /= n;
  }
  return out;
}

template <class T>
T cos_power(T c, double b) {
  if (b == 1.0) return T(1);
  if (b == 2.0) return std::abs(c);
  return std::pow(std::abs(c), T(b - 1.0));
}

}  // namespace detail

namespace ag {

/// Batched B-cos layer: x [R x in], w [(out*maxout) x in] -> [R x out].
template <class T>
Var bcos_linear(Graph<T>& g, Var x, Var w, const BcosSpec& spec, BcosRecord<T>* record = nullptr) {
  const auto& vx = g.value(x);
  const auto& vw = g.value(w);
  require_rank2(vx.dims(), "bcos_linear");
  require_rank2(vw.dims(), "bcos_linear");
  if (vx.cols() != vw.cols())
    throw ShapeError("bcos_linear: input " + dims_str(vx.dims()) + " vs weight " + dims_str(vw.dims()));
  const std::size_t rows = vx.rows(), in = vx.cols(), units = vw.rows(), mo = spec.maxout;
  if (mo < 1 || units % mo != 0) throw ShapeError("bcos_linear: units not divisible by maxout");
  const std::size_t outs = units / mo;
  const T b = T(spec.b_exponent), gamma = T(spec.gamma);

  struct State {
    Tensor<T> w_hat;
    std::vector<T> w_norm;
    Tensor<T> scales, pre;  // rows x units
    std::vector<T> x_norm;
    std::vector<std::uint32_t> sel;
  };
  auto st = std::make_shared<State>();
  st->w_hat = detail::normalise_rows(vw, st->w_norm);
  Tensor<T> z = bcosvit::matmul_nt(vx, st->w_hat);
  st->x_norm.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T n = 0;
    for (std::size_t c = 0; c < in; ++c) n += vx(r, c) * vx(r, c);
    st->x_norm[r] = std::sqrt(n);
  }
  st->scales = Tensor<T>(z.dims());
  st->pre = Tensor<T>(z.dims());
  T margin = std::numeric_limits<T>::infinity();
  for (std::size_t r = 0; r < rows; ++r) {
    const T na = std::max(st->x_norm[r], T(kNormFloor));
    for (std::size_t i = 0; i < units; ++i) {
      const T c = z(r, i) / na;
      const T s = gamma * detail::cos_power(c, spec.b_exponent);
      st->scales(r, i) = s;
      st->pre(r, i) = s * z(r, i);
      if (spec.b_exponent != 1.0) margin = std::min(margin, std::abs(c));
    }
  }
  Tensor<T> out(Dims{rows, outs});
  st->sel.resize(rows * outs);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < outs; ++j) {
      std::size_t best = j * mo;
      for (std::size_t t = 1; t < mo; ++t) {
        const std::size_t i = j * mo + t;
        margin = std::min(margin, std::abs(st->pre(r, i) - st->pre(r, best)));
        if (st->pre(r, i) > st->pre(r, best)) best = i;
      }
      st->sel[r * outs + j] = std::uint32_t(best);
      out(r, j) = st->pre(r, best);
    }
  g.note_margin(margin);

  if (record) {
    record->unit_weights = st->w_hat;
    record->scales = st->scales;
    record->selected = st->sel;
    record->out = outs;
  }

  const bool frozen = spec.frozen;
  return g.record(std::move(out), {x, w}, [x, w, st, rows, in, units, outs, b, frozen](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    Tensor<T> gz(Dims{rows, units});
    std::vector<T> g_norm(rows, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
      const T na = std::max(st->x_norm[r], T(kNormFloor));
      for (std::size_t j = 0; j < outs; ++j) {
        const std::size_t i = st->sel[r * outs + j];
        const T gi = go(r, j);
        if (frozen) {
          gz(r, i) = gi * st->scales(r, i);
        } else {
          gz(r, i) = gi * b * st->scales(r, i);
          g_norm[r] -= gi * (b - T(1)) * st->pre(r, i) / na;
        }
      }
    }
    if (g.requires_grad(x)) {
      Tensor<T> gx = bcosvit::matmul(gz, st->w_hat);
      if (!frozen) {
        const auto& vx = g.value(x);
        for (std::size_t r = 0; r < rows; ++r) {
          if (st->x_norm[r] <= T(kNormFloor) || g_norm[r] == T(0)) continue;
          const T f = g_norm[r] / st->x_norm[r];
          for (std::size_t c = 0; c < in; ++c) gx(r, c) += f * vx(r, c);
        }
      }
      g.accumulate(x, gx);
    }
    if (g.requires_grad(w)) {
      Tensor<T> gwh = matmul_tn(gz, g.value(x));
      for (std::size_t i = 0; i < units; ++i) {
        T dot = 0;
        for (std::size_t c = 0; c < in; ++c) dot += st->w_hat(i, c) * gwh(i, c);
        const T inv = T(1) / st->w_norm[i];
        for (std::size_t c = 0; c < in; ++c) gwh(i, c) = (gwh(i, c) - st->w_hat(i, c) * dot) * inv;
      }
      g.accumulate(w, gwh);
    }
  });
}

}  // namespace ag

template <class T>
struct BcosOutput {
  Tensor<T> out;     // [out]
  Tensor<T> linmap;  // [out x in], out == linmap * a
};

/// Single-vector B-cos layer with its effective matrix.
template <class T>
BcosOutput<T> bcos_forward(const BcosLinear<T>& layer, const Tensor<T>& a) {
  if (a.numel() != layer.in_features())
    throw ShapeError("bcos_forward: input has " + std::to_string(a.numel()) + " features, layer expects " +
                     std::to_string(layer.in_features()));
  Graph<T> g;
  BcosRecord<T> rec;
  Var x = g.constant(a.reshaped(Dims{1, a.numel()}));
  Var w = g.constant(layer.weight);
  Var y = ag::bcos_linear(g, x, w, layer.spec, &rec);
  return {g.value(y).reshaped(Dims{layer.out_features()}), rec.effective_matrix(0)};
}

/// Reference B-cos convolution over a C x H x W image with valid padding; the
/// patch is ordered (ky, kx, c) to match the weight layout of the model.
template <class T>
Tensor<T> bcos_conv(const BcosLinear<T>& layer, const Tensor<T>& image, std::size_t kernel, std::size_t stride) {
  if (image.rank() != 3) throw ShapeError("bcos_conv: expected C x H x W");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  ag::ConvGeometry geo{h, w, c, kernel, stride};
  geo.validate();
  if (geo.patch_size() != layer.in_features()) throw ShapeError("bcos_conv: kernel does not match layer fan-in");
  const std::size_t oh = geo.out_height(), ow = geo.out_width(), co = layer.out_features();
  Tensor<T> out(Dims{co, oh, ow});
  Tensor<T> patch(Dims{geo.patch_size()});
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      std::size_t p = 0;
      for (std::size_t ky = 0; ky < kernel; ++ky)
        for (std::size_t kx = 0; kx < kernel; ++kx)
          for (std::size_t ch = 0; ch < c; ++ch) patch[p++] = image(ch, oy * stride + ky, ox * stride + kx);
      auto r = bcos_forward(layer, patch);
      for (std::size_t j = 0; j < co; ++j) out(j, oy, ox) = r.out[j];
    }
  return out;
}

/// A 6 x H x W image holding [r, g, b, 1-r, 1-g, 1-b] per pixel.
template <class T>
struct EncodedImage {
  Tensor<T> pixels;
  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

template <class T>
EncodedImage<T> encode_image(const Tensor<T>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("encode_image: expected 3 x H x W, got " + dims_str(rgb.dims()));
  for (T v : rgb.values())
    if (!(v >= T(0) && v <= T(1))) throw Error("encode_image: colour value outside [0, 1]");
  const std::size_t hw = rgb.dim(1) * rgb.dim(2);
  Tensor<T> out(Dims{6, rgb.dim(1), rgb.dim(2)});
  for (std::size_t i = 0; i < 3 * hw; ++i) {
    out[i] = rgb[i];
    out[i + 3 * hw] = T(1) - rgb[i];
  }
  return {std::move(out)};
}

/// Colour part of an encoding (first three channels).
template <class T>
Tensor<T> decode_image(const EncodedImage<T>& x) {
  const std::size_t hw = x.height() * x.width();
  std::vector<T> rgb(x.pixels.data(), x.pixels.data() + 3 * hw);
  return Tensor<T>(Dims{3, x.height(), x.width()}, std::move(rgb));
}

template <class T>
struct LayerNormParams {
  Tensor<T> scale;
  Tensor<T> bias;
  T eps = T(1e-5);
};

/// LayerNorm of a single D-vector.
template <class T>
Tensor<T> layernorm(const Tensor<T>& p, const LayerNormParams<T>& params) {
  const std::size_t d = p.numel();
  if (d < 2) throw ShapeError("layernorm needs at least two features");
  if (!(params.eps > 0)) throw ConfigError("layernorm eps must be positive");
  p.require_finite("layernorm input");
  Graph<T> g;
  Var y = ag::layernorm_rows(g, g.constant(p.reshaped(Dims{1, d})), g.constant(params.scale),
                             g.constant(params.bias), params.eps);
  return g.value(y).reshaped(Dims{d});
}

}  // namespace bcosvit
