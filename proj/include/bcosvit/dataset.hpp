// Procedural four-class shapes dataset (disk, square, triangle, cross).
// Every sample is a pure function of (seed, split, index).
#pragma once

#include "bcosvit/bcos.hpp"
#include "bcosvit/config.hpp"

#include <array>
#include <random>

namespace bcosvit {

enum class Split { train, val };

enum class ShapeKind : std::size_t { disk = 0, square = 1, triangle = 2, cross = 3 };

inline const char* shape_name(std::size_t k) {
  static const char* names[] = {"disk", "square", "triangle", "cross"};
  return k < 4 ? names[k] : "?";
}

/// Parameters drawn for one sample.
struct ShapeParams {
  std::size_t label = 0;
  double cx = 0, cy = 0, radius = 0;
  std::array<double, 3> fg{}, bg{};
};

/// Whether the pixel centred at (px, py) lies inside the shape.
inline bool shape_covers(const ShapeParams& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy, r = s.radius;
  switch (ShapeKind(s.label)) {
    case ShapeKind::disk:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::square:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeKind::triangle:
      return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2;
    case ShapeKind::cross: {
      const double t = r / 3;
      return (std::abs(dx) <= t && std::abs(dy) <= r) || (std::abs(dy) <= t && std::abs(dx) <= r);
    }
  }
  return false;
}

struct ShapesDataset {
  std::uint64_t seed = 0;
  std::size_t image_size = 32;
  std::size_t classes = 4;
  std::size_t train_size = 4096;
  std::size_t val_size = 512;
  /// Radius range at 32 px; scales with image_size.
  double min_radius = 5, max_radius = 12;
  /// Per-channel colour ranges, shared by all classes: a bright shape on a
  /// dark background.
  double fg_min = 0.55, fg_max = 1.0, bg_min = 0.0, bg_max = 0.45;

  std::size_t size(Split s) const { return s == Split::train ? train_size : val_size; }

  void validate() const {
    if (classes == 0 || classes > 4) throw ConfigError("shapes dataset supports 1 to 4 classes");
    if (image_size < 8) throw ConfigError("shapes dataset needs images of at least 8 px");
    if (!(min_radius > 0) || max_radius < min_radius) throw ConfigError("invalid shape radius range");
    if (!(fg_min >= 0 && fg_min <= fg_max && fg_max <= 1 && bg_min >= 0 && bg_min <= bg_max && bg_max <= 1))
      throw ConfigError("colour ranges must lie within [0, 1]");
    if (2 * max_radius + 2 >= 32) throw ConfigError("max_radius too large for the image");
  }

  ShapeParams params(Split split, std::size_t index) const {
    if (index >= size(split))
      throw Error("dataset index " + std::to_string(index) + " out of range for split of " +
                  std::to_string(size(split)));
    std::uint64_t h = seed * 0x9E3779B97F4A7C15ull ^ (std::uint64_t(split == Split::val) << 63) ^ index;
    std::mt19937_64 rng(splitmix(h));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ShapeParams s;
    s.label = index % classes;
    const double k = double(image_size) / 32.0;
    s.radius = (min_radius + (max_radius - min_radius) * u(rng)) * k;
    const double lo = s.radius + 1, hi = double(image_size) - s.radius - 1;
    s.cx = lo + (hi - lo) * u(rng);
    s.cy = lo + (hi - lo) * u(rng);
    // Colours sit on the 1/255 grid so PPM round trips are exact.
    auto colour = [&](double lo, double hi) {
      std::array<double, 3> c;
      for (auto& v : c) v = std::round((lo + (hi - lo) * u(rng)) * 255.0) / 255.0;
      return c;
    };
    s.fg = colour(fg_min, fg_max);
    s.bg = colour(bg_min, bg_max);
    return s;
  }

  /// 3 x H x W colour image in [0, 1].
  Tensor<float> render(const ShapeParams& s) const {
    const std::size_t n = image_size;
    Tensor<float> rgb(Dims{3, n, n});
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const auto& c = shape_covers(s, x + 0.5, y + 0.5) ? s.fg : s.bg;
        for (std::size_t ch = 0; ch < 3; ++ch) rgb(ch, y, x) = float(c[ch]);
      }
    return rgb;
  }

  std::pair<Tensor<float>, std::size_t> rgb(Split split, std::size_t index) const {
    auto p = params(split, index);
    return {render(p), p.label};
  }

  std::pair<EncodedImage<float>, std::size_t> generate(Split split, std::size_t index) const {
    auto [img, label] = rgb(split, index);
    return {encode_image(img), label};
  }

  /// Encoded images [count x (6*H*W)] and their labels.
  std::pair<Tensor<float>, std::vector<std::size_t>> batch(Split split, std::span<const std::size_t> indices) const {
    const std::size_t per = 6 * image_size * image_size;
    Tensor<float> x(Dims{indices.size(), per});
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < indices.size(); ++i) {
      auto [img, label] = generate(split, indices[i]);
      std::copy(img.pixels.values().begin(), img.pixels.values().end(), x.data() + i * per);
      labels.push_back(label);
    }
    return {std::move(x), std::move(labels)};
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("data.seed", std::to_string(seed));
    kv.set("data.train_size", std::to_string(train_size));
    kv.set("data.val_size", std::to_string(val_size));
    kv.set("data.min_radius", fmt_num(min_radius));
    kv.set("data.max_radius", fmt_num(max_radius));
    kv.set("data.fg_min", fmt_num(fg_min));
    kv.set("data.fg_max", fmt_num(fg_max));
    kv.set("data.bg_min", fmt_num(bg_min));
    kv.set("data.bg_max", fmt_num(bg_max));
    return kv;
  }
  static ShapesDataset from_kv(const KeyValues& kv, const BcosViTConfig& model) {
    ShapesDataset d;
    d.image_size = model.image_size;
    d.classes = model.classes;
    d.seed = kv.count("data.seed", d.seed);
    d.train_size = kv.count("data.train_size", d.train_size);
    d.val_size = kv.count("data.val_size", d.val_size);
    d.min_radius = kv.num("data.min_radius", d.min_radius);
    d.max_radius = kv.num("data.max_radius", d.max_radius);
    d.fg_min = kv.num("data.fg_min", d.fg_min);
    d.fg_max = kv.num("data.fg_max", d.fg_max);
    d.bg_min = kv.num("data.bg_min", d.bg_min);
    d.bg_max = kv.num("data.bg_max", d.bg_max);
    d.validate();
    return d;
  }

  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }
};

}  // namespace bcosvit
