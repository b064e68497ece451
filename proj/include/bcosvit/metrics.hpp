// Grid pointing game and pixel-perturbation curves with the area between
// them, plus the benchmark harness that runs both over a set of explainers.
#pragma once

#include "bcosvit/explainers.hpp"
#include "bcosvit/train.hpp"

#include <iomanip>

namespace bcosvit {

// ---------------------------------------------------------------------------
// Grid pointing game

/// A 2 x 2 grid of source images, cells ordered top-left, top-right,
/// bottom-left, bottom-right, downscaled by 2 to the model input extent.
struct GridSpec {
  Tensor<float> rgb;  // 3 x S x S
  std::array<std::size_t, 4> labels{};
  std::array<std::size_t, 4> sources{};  // dataset indices
};

/// Assembles four [3 x S x S] images into a 2S grid and average-pools 2 x 2.
inline Tensor<float> assemble_grid(const std::array<Tensor<float>, 4>& cells) {
  const std::size_t s = cells[0].dim(1);
  for (auto& c : cells)
    if (c.dims() != Dims{3, s, s}) throw ShapeError("grid cells must share one square extent");
  if (s % 2 != 0) throw ShapeError("grid cells need an even extent");
  Tensor<float> big(Dims{3, 2 * s, 2 * s});
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t oy = (i / 2) * s, ox = (i % 2) * s;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) big(c, oy + y, ox + x) = cells[i](c, y, x);
  }
  Tensor<float> out(Dims{3, s, s});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x)
        out(c, y, x) = 0.25f * (big(c, 2 * y, 2 * x) + big(c, 2 * y, 2 * x + 1) + big(c, 2 * y + 1, 2 * x) +
                                big(c, 2 * y + 1, 2 * x + 1));
  return out;
}

inline float sigmoid(float v) { return 1.0f / (1.0f + std::exp(-v)); }

/// Per-class lists of dataset indices ordered by decreasing confidence in
/// the true class (ties by index). Only correctly classified images count
/// when `correct_only`.
inline std::vector<std::vector<std::size_t>> confidence_ranking(const BcosViT<float>& m, const ShapesDataset& data,
                                                                Split split, bool correct_only) {
  std::vector<std::size_t> labels;
  const Tensor<float> logits = predict(m, data, split, &labels);
  std::vector<std::vector<std::size_t>> out(m.config().classes);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (!correct_only || argmax_row(logits, i) == labels[i]) out[labels[i]].push_back(i);
  for (auto& v : out)
    std::stable_sort(v.begin(), v.end(), [&](std::size_t a, std::size_t b) {
      return logits(a, labels[a]) > logits(b, labels[b]);
    });
  return out;
}

/// Grids of four distinct classes; each cell takes that class's most
/// confidently classified image not used by an earlier grid. Cell order is
/// a seeded permutation of the classes.
inline std::vector<GridSpec> build_grids(const ShapesDataset& data, const BcosViT<float>& m, std::size_t count,
                                         std::uint64_t seed = 0, Split split = Split::val) {
  if (m.config().classes < 4) throw Error("grids need at least 4 classes");
  const auto ranking = confidence_ranking(m, data, split, false);
  std::vector<std::size_t> next(ranking.size(), 0);
  std::mt19937_64 rng(ShapesDataset::splitmix(seed ^ 0x6772696473ull));
  std::vector<GridSpec> grids;
  for (std::size_t gi = 0; gi < count; ++gi) {
    std::vector<std::size_t> classes(m.config().classes);
    std::iota(classes.begin(), classes.end(), 0);
    std::shuffle(classes.begin(), classes.end(), rng);
    GridSpec g;
    std::array<Tensor<float>, 4> cells;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t k = classes[i];
      if (next[k] >= ranking[k].size())
        throw Error("class " + std::to_string(k) + " exhausted after " + std::to_string(gi) + " grids");
      g.labels[i] = k;
      g.sources[i] = ranking[k][next[k]++];
      cells[i] = data.rgb(split, g.sources[i]).first;
    }
    g.rgb = assemble_grid(cells);
    grids.push_back(std::move(g));
  }
  return grids;
}

/// Positive attribution inside class k's cell over all positive attribution;
/// 0 when there is none.
template <class T>
double localisation_score(const Tensor<T>& map, const GridSpec& grid, std::size_t k) {
  const auto it = std::find(grid.labels.begin(), grid.labels.end(), k);
  if (it == grid.labels.end()) throw Error("class " + std::to_string(k) + " is not present in the grid");
  const std::size_t cell = std::size_t(it - grid.labels.begin());
  if (map.rank() != 2 || map.dim(0) != grid.rgb.dim(1) || map.dim(1) != grid.rgb.dim(2))
    throw ShapeError("localisation_score: map extent " + dims_str(map.dims()) + " does not match the grid");
  const std::size_t h = map.dim(0), w = map.dim(1);
  double inside = 0, total = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double v = double(map(y, x));
      if (!(v > 0)) continue;
      total += v;
      if ((y >= h / 2) == (cell / 2 == 1) && (x >= w / 2) == (cell % 2 == 1)) inside += v;
    }
  return total > 0 ? inside / total : 0.0;
}

template <class T>
double localisation_score(const AttributionMap<T>& map, const GridSpec& grid, std::size_t k) {
  return localisation_score(map.values, grid, k);
}

// ---------------------------------------------------------------------------
// Pixel perturbation

inline constexpr std::size_t kPerturbationPoints = 9;
inline constexpr double kMaxPerturbation = 0.25;

enum class Order { most_first, least_first };

struct PerturbationCurve {
  std::vector<double> fractions;    // 9 points, 0 .. 0.25
  std::vector<double> confidences;  // normalised by the unperturbed value
  std::vector<double> raw;          // sigmoid confidences before normalisation
  Order order = Order::most_first;
};

inline std::vector<double> perturbation_fractions() {
  std::vector<double> f(kPerturbationPoints);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = kMaxPerturbation * double(i) / double(f.size() - 1);
  return f;
}

/// Pixel indices sorted by decreasing (most_first) or increasing
/// (least_first) attribution; ties go to the lower pixel index.
template <class T>
std::vector<std::size_t> pixel_ranking(const Tensor<T>& map, Order order) {
  std::vector<std::size_t> idx(map.numel());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return order == Order::most_first ? map[a] > map[b] : map[a] < map[b];
  });
  return idx;
}

/// Class-k confidence curves while removing pixels (set to black before
/// encoding) in the order given by `ranking`.
template <class T>
std::pair<PerturbationCurve, PerturbationCurve> perturbation_curves(const BcosViT<float>& m, const Tensor<float>& rgb,
                                                                    std::size_t k, const Tensor<T>& ranking) {
  const auto& c = m.config();
  detail::check_class(k, c.classes);
  const std::size_t hw = c.image_size * c.image_size;
  if (rgb.dims() != Dims{3, c.image_size, c.image_size} || ranking.numel() != hw)
    throw ShapeError("perturbation_curves: image or ranking extent mismatch");
  const auto fractions = perturbation_fractions();
  auto curve = [&](Order order) {
    const auto idx = pixel_ranking(ranking, order);
    Tensor<float> batch(Dims{fractions.size(), c.input_size()});
    for (std::size_t i = 0; i < fractions.size(); ++i) {
      Tensor<float> img = rgb;
      const std::size_t removed = std::size_t(std::lround(fractions[i] * double(hw)));
      for (std::size_t r = 0; r < removed; ++r)
        for (std::size_t ch = 0; ch < 3; ++ch) img[ch * hw + idx[r]] = 0.0f;
      const auto enc = encode_image(img);
      std::copy(enc.pixels.values().begin(), enc.pixels.values().end(), batch.data() + i * c.input_size());
    }
    const Tensor<float> logits = forward(m, batch);
    PerturbationCurve pc;
    pc.order = order;
    pc.fractions = fractions;
    for (std::size_t i = 0; i < fractions.size(); ++i) pc.raw.push_back(sigmoid(logits(i, k)));
    for (double v : pc.raw) pc.confidences.push_back(pc.raw[0] > 0 ? v / pc.raw[0] : 0.0);
    return pc;
  };
  return {curve(Order::most_first), curve(Order::least_first)};
}

/// Mean over the shared points of (least_first - most_first).
inline double area_between_curves(const PerturbationCurve& most_first, const PerturbationCurve& least_first) {
  if (most_first.fractions != least_first.fractions || most_first.confidences.size() != most_first.fractions.size() ||
      least_first.confidences.size() != least_first.fractions.size() || most_first.fractions.empty())
    throw Error("area_between_curves: curves do not share a fraction grid");
  double s = 0;
  for (std::size_t i = 0; i < most_first.confidences.size(); ++i)
    s += least_first.confidences[i] - most_first.confidences[i];
  return s / double(most_first.confidences.size());
}

/// Curve of raw confidences averaged over images, normalised by the mean
/// unperturbed confidence.
inline PerturbationCurve mean_curve(const std::vector<PerturbationCurve>& curves) {
  if (curves.empty()) throw Error("mean_curve: no curves");
  PerturbationCurve out;
  out.order = curves.front().order;
  out.fractions = curves.front().fractions;
  out.raw.assign(out.fractions.size(), 0.0);
  for (auto& c : curves)
    for (std::size_t i = 0; i < out.raw.size(); ++i) out.raw[i] += c.raw[i] / double(curves.size());
  for (double v : out.raw) out.confidences.push_back(out.raw[0] > 0 ? v / out.raw[0] : 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark

struct BenchmarkOptions {
  std::size_t grids = 50;
  std::size_t images = 50;
  std::size_t intgrad_steps = 32;
  std::uint64_t seed = 0;
  std::vector<Method> methods{Method::inherent, Method::finatt, Method::rollout, Method::ixg, Method::intgrad};
};

struct MetricRow {
  std::string method;
  bool ok = true;
  std::string diagnostic;
  double localisation = 0;
  double abc = 0;
  double abc_normalised = std::numeric_limits<double>::quiet_NaN();
  PerturbationCurve most_first, least_first;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::size_t grids = 0, images = 0;

  const MetricRow& row(const std::string& method) const {
    for (auto& r : rows)
      if (r.method == method) return r;
    throw Error("no report row for method '" + method + "'");
  }

  std::string table() const {
    std::ostringstream os;
    os << "method\tlocalisation\tabc\tabc_normalised\tstatus\n";
    os << std::fixed << std::setprecision(6);
    for (auto& r : rows) {
      os << r.method << '\t';
      if (r.ok)
        os << r.localisation << '\t' << r.abc << '\t' << r.abc_normalised << "\tok\n";
      else
        os << "-\t-\t-\tfailed: " << r.diagnostic << '\n';
    }
    return os.str();
  }

  std::string records() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "grids=" << grids << " images=" << images << '\n';
    for (auto& r : rows) {
      os << "method=" << r.method << " status=" << (r.ok ? "ok" : "failed");
      if (r.ok) {
        os << " localisation=" << r.localisation << " abc=" << r.abc << " abc_normalised=" << r.abc_normalised;
        os << " most_first=";
        for (std::size_t i = 0; i < r.most_first.confidences.size(); ++i)
          os << (i ? "," : "") << r.most_first.confidences[i];
        os << " least_first=";
        for (std::size_t i = 0; i < r.least_first.confidences.size(); ++i)
          os << (i ? "," : "") << r.least_first.confidences[i];
      } else {
        os << " diagnostic=\"" << r.diagnostic << '"';
      }
      os << '\n';
    }
    return os.str();
  }
};

/// Indices of the `count` most confidently and correctly classified images.
inline std::vector<std::size_t> select_perturbation_images(const BcosViT<float>& m, const ShapesDataset& data,
                                                           std::size_t count, Split split = Split::val) {
  std::vector<std::size_t> labels;
  const Tensor<float> logits = predict(m, data, split, &labels);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (argmax_row(logits, i) == labels[i]) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return logits(a, labels[a]) > logits(b, labels[b]); });
  if (idx.size() < count)
    throw Error("only " + std::to_string(idx.size()) + " correctly classified images, " + std::to_string(count) +
                " requested");
  idx.resize(count);
  return idx;
}

inline MetricReport run_benchmark(const BcosViT<float>& m, const ShapesDataset& data, const BenchmarkOptions& opt) {
  MetricReport report;
  const auto grids = build_grids(data, m, opt.grids, opt.seed);
  const auto images = select_perturbation_images(m, data, opt.images);
  report.grids = grids.size();
  report.images = images.size();
  for (Method method : opt.methods) {
    MetricRow row;
    row.method = to_string(method);
    try {
      ExplainerSpec spec{method, opt.intgrad_steps, 0};
      double loc = 0;
      std::size_t n = 0;
      for (const auto& g : grids) {
        const Tensor<float> x = encode_image(g.rgb).pixels;
        for (std::size_t k : g.labels) {
          spec.target = k;
          loc += localisation_score(explain(m, x, spec), g, k);
          ++n;
        }
      }
      row.localisation = loc / double(n);
      std::vector<PerturbationCurve> most, least;
      for (std::size_t i : images) {
        auto [rgb, label] = data.rgb(Split::val, i);
        spec.target = label;
        const auto map = explain(m, encode_image(rgb).pixels, spec);
        auto [mf, lf] = perturbation_curves(m, rgb, label, map.values);
        most.push_back(std::move(mf));
        least.push_back(std::move(lf));
      }
      row.most_first = mean_curve(most);
      row.least_first = mean_curve(least);
      row.abc = area_between_curves(row.most_first, row.least_first);
    } catch (const std::exception& e) {
      row.ok = false;
      row.diagnostic = e.what();
    }
    report.rows.push_back(std::move(row));
  }
  for (auto& r : report.rows)
    if (r.method == "inherent" && r.ok)
      for (auto& o : report.rows)
        if (o.ok) o.abc_normalised = o.abc / r.abc;
  return report;
}

}  // namespace bcosvit
