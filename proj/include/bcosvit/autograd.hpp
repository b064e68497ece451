// Tape-based reverse-mode differentiation over Tensor<T>.
//
// Nodes are appended in creation order and only ever reference earlier
// nodes, so reverse creation order is a reverse topological order and each
// node is visited once per backward pass.
#pragma once

#include "bcosvit/tensor.hpp"

#include <limits>
#include <map>
#include <memory>

namespace bcosvit {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var self)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<int> parents;
    BackwardFn backward;
    bool requires_grad = false;
    bool detached = false;
    bool is_parameter = false;
    std::string name;
  };

  /// Named trainable leaf; its gradient is reported by backward().
  Var parameter(std::string name, Tensor<T> v) {
    for (auto& n : nodes_)
      if (n.is_parameter && n.name == name) throw Error("duplicate parameter name '" + name + "'");
    Node n;
    n.value = std::move(v);
    n.requires_grad = true;
    n.is_parameter = true;
    n.name = std::move(name);
    return push(std::move(n));
  }

  /// Unnamed leaf. With requires_grad its gradient is available via grad().
  Var input(Tensor<T> v, bool requires_grad = false) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var constant(Tensor<T> v) { return input(std::move(v), false); }

  /// Internal: records an operation output. The node requires a gradient if any
  /// parent does.
  Var record(Tensor<T> value, std::vector<Var> parents, BackwardFn fn) {
    if (!value.all_finite()) throw NonFiniteError("non-finite value produced in graph node " +
                                                  std::to_string(nodes_.size()));
    Node n;
    n.value = std::move(value);
    for (Var p : parents) {
      check(p);
      n.parents.push_back(p.id);
      n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  /// Same value, excluded from differentiation: gradients stop here.
  Var detach(Var v) {
    check(v);
    Node n;
    n.value = nodes_[v.id].value;
    n.detached = true;
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }
  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }
  bool detached(Var v) const {
    check(v);
    return nodes_[v.id].detached;
  }

  /// Gradient of the last backward() target with respect to v (zeros when v
  /// did not influence it).
  Tensor<T> grad(Var v) const {
    check(v);
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor<T>(n.value.dims());
    return n.grad;
  }

  /// Gradient accumulator for v, allocated on first use.
  Tensor<T>& grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.dims());
    return n.grad;
  }

  void accumulate(Var v, const Tensor<T>& g) {
    if (!requires_grad(v)) return;
    auto& buf = grad_buffer(v);
    if (buf.numel() != g.numel()) throw ShapeError("gradient shape mismatch");
    for (std::size_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
  }

  /// Reverse pass from a scalar node. Returns d loss / d parameter by name.
  std::map<std::string, Tensor<T>> backward(Var loss) {
    check(loss);
    if (nodes_[loss.id].value.numel() != 1) throw ShapeError("backward: loss must be a scalar, got " +
                                                             dims_str(nodes_[loss.id].value.dims()));
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (nodes_[loss.id].requires_grad) {
      grad_buffer(loss)[0] = T(1);
      for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        for (int p : n.parents)
          if (p >= i) throw Error("backward: graph is not acyclic");
        n.backward(*this, Var{i});
      }
    }
    std::map<std::string, Tensor<T>> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.is_parameter) out.emplace(n.name, grad(Var{int(i)}));
    }
    return out;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Smallest distance to a non-smooth locus (MaxOut tie, cos = 0) seen while
  /// building the graph. Finite-difference checks resample when it is small.
  void note_margin(T m) { margin_ = std::min(margin_, m); }
  T smooth_margin() const { return margin_; }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size() - 1)};
  }
  void check(Var v) const {
    if (v.id < 0 || std::size_t(v.id) >= nodes_.size()) throw Error("invalid graph variable");
  }

  std::vector<Node> nodes_;
  T margin_ = std::numeric_limits<T>::infinity();
};

// ---------------------------------------------------------------------------
// Primitive operations. Each records its output and an adjoint rule.

namespace ag {

template <class T>
Var matmul(Graph<T>& g, Var a, Var b) {
  Tensor<T> out = bcosvit::matmul(g.value(a), g.value(b));
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    if (g.requires_grad(a)) g.accumulate(a, matmul_nt(go, g.value(b)));
    if (g.requires_grad(b)) g.accumulate(b, matmul_tn(g.value(a), go));
  });
}

/// a * b^T, the natural form for weights stored as out x in.
template <class T>
Var matmul_nt(Graph<T>& g, Var a, Var b) {
  Tensor<T> out = bcosvit::matmul_nt(g.value(a), g.value(b));
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    if (g.requires_grad(a)) g.accumulate(a, bcosvit::matmul(go, g.value(b)));
    if (g.requires_grad(b)) g.accumulate(b, matmul_tn(go, g.value(a)));
  });
}

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  g.value(a).same_shape(g.value(b), "add");
  Tensor<T> out = g.value(a) + g.value(b);
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, Var self) {
    const Tensor<T>& go = g.grad_buffer(self);
    g.accumulate(a, go);
    g.accumulate(b, go);
  });
}

template <class T>
Var sub(Graph<T>& g, Var a, Var b) {
  g.value(a).same_shape(g.value(b), "sub");
  Tensor<T> out = g.value(a) - g.value(b);
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, Var self) {
    Tensor<T> go = g.grad(self);
    g.accumulate(a, go);
    g.accumulate(b, go * T(-1));
  });
}

/// Elementwise product.
template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
  const auto& va = g.value(a);
  const auto& vb = g.value(b);
  va.same_shape(vb, "mul");
  Tensor<T> out(va.dims());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = va[i] * vb[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    Tensor<T> ga(va.dims()), gb(vb.dims());
    for (std::size_t i = 0; i < go.numel(); ++i) {
      ga[i] = go[i] * vb[i];
      gb[i] = go[i] * va[i];
    }
    g.accumulate(a, ga);
    g.accumulate(b, gb);
  });
}

template <class T>
Var scale(Graph<T>& g, Var a, T s) {
  Tensor<T> out = g.value(a) * s;
  return g.record(std::move(out), {a}, [a, s](Graph<T>& g, Var self) { g.accumulate(a, g.grad(self) * s); });
}

/// a + tile(e): e is repeated along the leading axis of a (a.numel() must be a
/// multiple of e.numel()). Covers per-column bias vectors and per-sample priors.
template <class T>
Var add_tiled(Graph<T>& g, Var a, Var e) {
  const auto& va = g.value(a);
  const auto& ve = g.value(e);
  const std::size_t n = ve.numel();
  if (va.numel() % n != 0)
    throw ShapeError("add_tiled: " + dims_str(va.dims()) + " is not a tiling of " + dims_str(ve.dims()));
  Tensor<T> out = va;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += ve[i % n];
  return g.record(std::move(out), {a, e}, [a, e, n](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    g.accumulate(a, go);
    if (g.requires_grad(e)) {
      auto& ge = g.grad_buffer(e);
      for (std::size_t i = 0; i < go.numel(); ++i) ge[i % n] += go[i];
    }
  });
}

/// a * tile(e), elementwise, with the same tiling rule as add_tiled.
template <class T>
Var mul_tiled(Graph<T>& g, Var a, Var e) {
  const auto& va = g.value(a);
  const auto& ve = g.value(e);
  const std::size_t n = ve.numel();
  if (va.numel() % n != 0)
    throw ShapeError("mul_tiled: " + dims_str(va.dims()) + " is not a tiling of " + dims_str(ve.dims()));
  Tensor<T> out = va;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= ve[i % n];
  return g.record(std::move(out), {a, e}, [a, e, n](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    const auto& va = g.value(a);
    const auto& ve = g.value(e);
    if (g.requires_grad(a)) {
      Tensor<T> ga(va.dims());
      for (std::size_t i = 0; i < go.numel(); ++i) ga[i] = go[i] * ve[i % n];
      g.accumulate(a, ga);
    }
    if (g.requires_grad(e)) {
      auto& ge = g.grad_buffer(e);
      for (std::size_t i = 0; i < go.numel(); ++i) ge[i % n] += go[i] * va[i];
    }
  });
}

template <class T>
Var sum(Graph<T>& g, Var a) {
  return g.record(Tensor<T>::scalar(g.value(a).sum()), {a}, [a](Graph<T>& g, Var self) {
    const T go = g.grad(self)[0];
    g.accumulate(a, Tensor<T>(g.value(a).dims(), go));
  });
}

template <class T>
Var mean(Graph<T>& g, Var a) {
  const T n = T(g.value(a).numel());
  return scale(g, sum(g, a), T(1) / n);
}

/// Scalar element a[index].
template <class T>
Var pick(Graph<T>& g, Var a, std::size_t index) {
  if (index >= g.value(a).numel()) throw ShapeError("pick: index out of range");
  return g.record(Tensor<T>::scalar(g.value(a)[index]), {a}, [a, index](Graph<T>& g, Var self) {
    if (g.requires_grad(a)) g.grad_buffer(a)[index] += g.grad(self)[0];
  });
}

template <class T>
Var reshape(Graph<T>& g, Var a, Dims dims) {
  Tensor<T> out = g.value(a).reshaped(std::move(dims));
  return g.record(std::move(out), {a}, [a](Graph<T>& g, Var self) {
    g.accumulate(a, g.grad(self).reshaped(g.value(a).dims()));
  });
}

/// Softmax along the last axis of a matrix.
template <class T>
Var softmax_rows(Graph<T>& g, Var a) {
  const auto& va = g.value(a);
  const std::size_t rows = va.rows(), cols = va.cols();
  Tensor<T> out(va.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = va.data() + r * cols;
    T* o = out.data() + r * cols;
    T m = *std::max_element(in, in + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - m));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  return g.record(std::move(out), {a}, [a, rows, cols](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    const Tensor<T>& y = g.value(self);
    Tensor<T> ga(y.dims());
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += go(r, c) * y(r, c);
      for (std::size_t c = 0; c < cols; ++c) ga(r, c) = y(r, c) * (go(r, c) - dot);
    }
    g.accumulate(a, ga);
  });
}

/// LayerNorm over the last axis of x[R x D] with per-feature scale and bias.
template <class T>
Var layernorm_rows(Graph<T>& g, Var x, Var scale_v, Var bias_v, T eps) {
  const auto& vx = g.value(x);
  const std::size_t rows = vx.rows(), d = vx.cols();
  if (g.value(scale_v).numel() != d || g.value(bias_v).numel() != d) throw ShapeError("layernorm: parameter size");
  auto xhat = std::make_shared<Tensor<T>>(vx.dims());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(vx.dims());
  const auto& sc = g.value(scale_v);
  const auto& bi = g.value(bias_v);
  for (std::size_t r = 0; r < rows; ++r) {
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += vx(r, j);
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (vx(r, j) - mu) * (vx(r, j) - mu);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      (*xhat)(r, j) = (vx(r, j) - mu) * rs;
      out(r, j) = (*xhat)(r, j) * sc[j] + bi[j];
    }
  }
  return g.record(std::move(out), {x, scale_v, bias_v},
                  [x, scale_v, bias_v, xhat, rstd, rows, d](Graph<T>& g, Var self) {
                    const Tensor<T> go = g.grad(self);
                    const auto& sc = g.value(scale_v);
                    if (g.requires_grad(scale_v) || g.requires_grad(bias_v)) {
                      Tensor<T> gs(Dims{d}), gb(Dims{d});
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j) {
                          gs[j] += go(r, j) * (*xhat)(r, j);
                          gb[j] += go(r, j);
                        }
                      g.accumulate(scale_v, gs.reshaped(g.value(scale_v).dims()));
                      g.accumulate(bias_v, gb.reshaped(g.value(bias_v).dims()));
                    }
                    if (g.requires_grad(x)) {
                      Tensor<T> gx(go.dims());
                      for (std::size_t r = 0; r < rows; ++r) {
                        T m1 = 0, m2 = 0;
                        for (std::size_t j = 0; j < d; ++j) {
                          const T gh = go(r, j) * sc[j];
                          m1 += gh;
                          m2 += gh * (*xhat)(r, j);
                        }
                        m1 /= T(d);
                        m2 /= T(d);
                        for (std::size_t j = 0; j < d; ++j) {
                          const T gh = go(r, j) * sc[j];
                          gx(r, j) = (*rstd)[r] * (gh - m1 - (*xhat)(r, j) * m2);
                        }
                      }
                      g.accumulate(x, gx);
                    }
                  });
}

/// [B x (C*H*W)] channel-major images to [(B*H*W) x C] pixel rows.
template <class T>
Var chw_to_hwc(Graph<T>& g, Var x, std::size_t channels, std::size_t height, std::size_t width) {
  const auto& vx = g.value(x);
  const std::size_t hw = height * width;
  if (vx.numel() % (channels * hw) != 0) throw ShapeError("chw_to_hwc: extent mismatch");
  const std::size_t batch = vx.numel() / (channels * hw);
  Tensor<T> out(Dims{batch * hw, channels});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < hw; ++p) out[(b * hw + p) * channels + c] = vx[(b * channels + c) * hw + p];
  return g.record(std::move(out), {x}, [x, channels, hw, batch](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    Tensor<T> gx(g.value(x).dims());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < hw; ++p) gx[(b * channels + c) * hw + p] = go[(b * hw + p) * channels + c];
    g.accumulate(x, gx);
  });
}

/// Geometry of a valid (unpadded) convolution over pixel-row feature maps.
struct ConvGeometry {
  std::size_t height = 0, width = 0, channels = 0, kernel = 1, stride = 1;
  std::size_t out_height() const { return (height - kernel) / stride + 1; }
  std::size_t out_width() const { return (width - kernel) / stride + 1; }
  std::size_t patch_size() const { return kernel * kernel * channels; }
  void validate() const {
    if (kernel > height || kernel > width) throw ShapeError("convolution kernel larger than input");
    if (stride == 0 || kernel == 0 || channels == 0) throw ShapeError("invalid convolution geometry");
  }
  /// Offset of patch element (ky, kx, c) of output (oy, ox) within one image.
  std::size_t source(std::size_t oy, std::size_t ox, std::size_t ky, std::size_t kx, std::size_t c) const {
    return ((oy * stride + ky) * width + (ox * stride + kx)) * channels + c;
  }
};

/// Patch extraction: x is [(B*H*W) x C]; output [(B*H'*W') x (k*k*C)] with the
/// patch ordered (ky, kx, c).
template <class T>
Var im2col(Graph<T>& g, Var x, ConvGeometry geo) {
  geo.validate();
  const auto& vx = g.value(x);
  const std::size_t img = geo.height * geo.width * geo.channels;
  if (vx.numel() % img != 0) throw ShapeError("im2col: extent mismatch");
  const std::size_t batch = vx.numel() / img;
  const std::size_t oh = geo.out_height(), ow = geo.out_width(), ps = geo.patch_size();
  const std::size_t kc = geo.kernel * geo.channels;
  Tensor<T> out(Dims{batch * oh * ow, ps});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T* dst = out.data() + ((b * oh + oy) * ow + ox) * ps;
        for (std::size_t ky = 0; ky < geo.kernel; ++ky) {
          const T* src = vx.data() + b * img + geo.source(oy, ox, ky, 0, 0);
          std::copy(src, src + kc, dst + ky * kc);
        }
      }
  return g.record(std::move(out), {x}, [x, geo, batch, img, oh, ow, ps, kc](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    auto& gx = g.grad_buffer(x);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T* src = go.data() + ((b * oh + oy) * ow + ox) * ps;
          for (std::size_t ky = 0; ky < geo.kernel; ++ky) {
            T* dst = gx.data() + b * img + geo.source(oy, ox, ky, 0, 0);
            for (std::size_t i = 0; i < kc; ++i) dst[i] += src[ky * kc + i];
          }
        }
  });
}

/// Per-sample, per-head similarity logits. q, k: [(B*N) x D] with heads as
/// contiguous column groups. Output [(B*H*N) x N], row (b, h, query), column key.
template <class T>
Var attention_logits(Graph<T>& g, Var q, Var k, std::size_t heads, std::size_t tokens, T temperature) {
  const auto& vq = g.value(q);
  const auto& vk = g.value(k);
  vq.same_shape(vk, "attention_logits");
  const std::size_t d = vq.cols(), dh = d / heads;
  if (d % heads != 0 || vq.rows() % tokens != 0) throw ShapeError("attention_logits: extent mismatch");
  const std::size_t batch = vq.rows() / tokens;
  Tensor<T> out(Dims{batch * heads * tokens, tokens});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      ConstMatMap<T> qm(vq.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
      ConstMatMap<T> km(vk.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
      MatMap<T> om(out.data() + (b * heads + h) * tokens * tokens, Eigen::Index(tokens), Eigen::Index(tokens));
      om.noalias() = temperature * qm.middleCols(h * dh, dh) * km.middleCols(h * dh, dh).transpose();
    }
  return g.record(std::move(out), {q, k}, [q, k, heads, tokens, batch, d, dh, temperature](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    const auto& vq = g.value(q);
    const auto& vk = g.value(k);
    Tensor<T> gq(vq.dims()), gk(vk.dims());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        ConstMatMap<T> qm(vq.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
        ConstMatMap<T> km(vk.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
        ConstMatMap<T> gm(go.data() + (b * heads + h) * tokens * tokens, Eigen::Index(tokens), Eigen::Index(tokens));
        MatMap<T> gqm(gq.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
        MatMap<T> gkm(gk.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
        gqm.middleCols(h * dh, dh).noalias() += temperature * gm * km.middleCols(h * dh, dh);
        gkm.middleCols(h * dh, dh).noalias() += temperature * gm.transpose() * qm.middleCols(h * dh, dh);
      }
    g.accumulate(q, gq);
    g.accumulate(k, gk);
  });
}

/// Mixes value columns of each head by that head's attention matrix.
/// a: [(B*H*N) x N], v: [(B*N) x D] -> [(B*N) x D].
template <class T>
Var attention_apply(Graph<T>& g, Var a, Var v, std::size_t heads, std::size_t tokens) {
  const auto& va = g.value(a);
  const auto& vv = g.value(v);
  const std::size_t d = vv.cols(), dh = d / heads;
  if (d % heads != 0 || vv.rows() % tokens != 0) throw ShapeError("attention_apply: extent mismatch");
  const std::size_t batch = vv.rows() / tokens;
  if (va.numel() != batch * heads * tokens * tokens) throw ShapeError("attention_apply: attention extent mismatch");
  Tensor<T> out(vv.dims());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      ConstMatMap<T> am(va.data() + (b * heads + h) * tokens * tokens, Eigen::Index(tokens), Eigen::Index(tokens));
      ConstMatMap<T> vm(vv.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
      MatMap<T> om(out.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
      om.middleCols(h * dh, dh).noalias() = am * vm.middleCols(h * dh, dh);
    }
  return g.record(std::move(out), {a, v}, [a, v, heads, tokens, batch, d, dh](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    const auto& va = g.value(a);
    const auto& vv = g.value(v);
    const bool need_a = g.requires_grad(a), need_v = g.requires_grad(v);
    Tensor<T> ga(need_a ? va.dims() : Dims{1}), gv(need_v ? vv.dims() : Dims{1});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        ConstMatMap<T> am(va.data() + (b * heads + h) * tokens * tokens, Eigen::Index(tokens), Eigen::Index(tokens));
        ConstMatMap<T> vm(vv.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
        ConstMatMap<T> gm(go.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
        if (need_a) {
          MatMap<T> gam(ga.data() + (b * heads + h) * tokens * tokens, Eigen::Index(tokens), Eigen::Index(tokens));
          gam.noalias() = gm.middleCols(h * dh, dh) * vm.middleCols(h * dh, dh).transpose();
        }
        if (need_v) {
          MatMap<T> gvm(gv.data() + b * tokens * d, Eigen::Index(tokens), Eigen::Index(d));
          gvm.middleCols(h * dh, dh).noalias() += am.transpose() * gm.middleCols(h * dh, dh);
        }
      }
    if (need_a) g.accumulate(a, ga);
    if (need_v) g.accumulate(v, gv);
  });
}

/// Average over each consecutive group of `tokens` rows: [(B*N) x D] -> [B x D].
template <class T>
Var mean_pool(Graph<T>& g, Var x, std::size_t tokens) {
  const auto& vx = g.value(x);
  if (vx.rows() % tokens != 0) throw ShapeError("mean_pool: extent mismatch");
  const std::size_t batch = vx.rows() / tokens, d = vx.cols();
  Tensor<T> out(Dims{batch, d});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t n = 0; n < tokens; ++n)
      for (std::size_t j = 0; j < d; ++j) out(b, j) += vx(b * tokens + n, j);
  out *= T(1) / T(tokens);
  return g.record(std::move(out), {x}, [x, tokens, batch, d](Graph<T>& g, Var self) {
    const Tensor<T> go = g.grad(self);
    Tensor<T> gx(g.value(x).dims());
    const T inv = T(1) / T(tokens);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t n = 0; n < tokens; ++n)
        for (std::size_t j = 0; j < d; ++j) gx(b * tokens + n, j) = go(b, j) * inv;
    g.accumulate(x, gx);
  });
}

/// Mean binary cross-entropy of sigmoid(logits) against targets, with the
/// sigmoid clamped to [1e-7, 1 - 1e-7].
template <class T>
Var bce_with_logits(Graph<T>& g, Var logits, const Tensor<T>& targets) {
  const auto& y = g.value(logits);
  y.same_shape(targets, "bce_with_logits");
  constexpr T lo = T(1e-7), hi = T(1) - T(1e-7);
  T loss = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const T s = std::clamp(T(1) / (T(1) + std::exp(-y[i])), lo, hi);
    loss -= targets[i] * std::log(s) + (T(1) - targets[i]) * std::log(T(1) - s);
  }
  loss /= T(y.numel());
  return g.record(Tensor<T>::scalar(loss), {logits}, [logits, targets](Graph<T>& g, Var self) {
    const T go = g.grad(self)[0];
    const auto& y = g.value(logits);
    Tensor<T> gy(y.dims());
    const T n = T(y.numel());
    for (std::size_t i = 0; i < y.numel(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-y[i]));
      const bool clamped = s < lo || s > hi;
      gy[i] = clamped ? T(0) : go * (s - targets[i]) / n;
    }
    g.accumulate(logits, gy);
  });
}

}  // namespace ag
}  // namespace bcosvit
