#include "helpers.hpp"

#include <set>

using namespace bcosvit;
using namespace bcosvit::testing;

namespace {

GridSpec blank_grid() {
  GridSpec g;
  g.rgb = Tensor<float>(Dims{3, 32, 32});
  g.labels = {2, 0, 3, 1};
  return g;
}

PerturbationCurve curve(std::vector<double> conf, Order order = Order::most_first) {
  PerturbationCurve c;
  c.fractions = perturbation_fractions();
  c.confidences = std::move(conf);
  c.order = order;
  return c;
}

ShapesDataset small_data() {
  ShapesDataset d;
  d.train_size = 64;
  d.val_size = 96;
  return d;
}

}  // namespace

TEST(Grid, AssemblyHalvesExtentByAveraging) {
  std::array<Tensor<float>, 4> cells;
  for (std::size_t i = 0; i < 4; ++i) cells[i] = Tensor<float>(Dims{3, 8, 8}, float(i + 1) / 8.0f);
  cells[0](1, 3, 5) = 1.0f;
  auto g = assemble_grid(cells);
  ASSERT_EQ(g.dims(), (Dims{3, 8, 8}));
  EXPECT_FLOAT_EQ(g(0, 0, 0), 1.0f / 8.0f);
  EXPECT_FLOAT_EQ(g(0, 0, 7), 2.0f / 8.0f);
  EXPECT_FLOAT_EQ(g(0, 7, 0), 3.0f / 8.0f);
  EXPECT_FLOAT_EQ(g(0, 7, 7), 4.0f / 8.0f);
  EXPECT_FLOAT_EQ(g(1, 1, 2), 0.75f * 0.125f + 0.25f);
}

TEST(Grid, OneGridHasFourDistinctClasses) {
  BcosViT<float> m(micro(), 1);
  auto grids = build_grids(small_data(), m, 1, 3);
  ASSERT_EQ(grids.size(), 1u);
  std::set<std::size_t> labels(grids[0].labels.begin(), grids[0].labels.end());
  EXPECT_EQ(labels.size(), 4u);
  auto data = small_data();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(data.params(Split::val, grids[0].sources[i]).label, grids[0].labels[i]);
}

TEST(Grid, NoImageIsReusedAndAssemblyIsDeterministic) {
  BcosViT<float> m(micro(), 2);
  auto a = build_grids(small_data(), m, 20, 4), b = build_grids(small_data(), m, 20, 4);
  std::set<std::size_t> used;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t s : a[i].sources) EXPECT_TRUE(used.insert(s).second) << s;
    EXPECT_EQ(a[i].rgb, b[i].rgb);
    EXPECT_EQ(a[i].labels, b[i].labels);
  }
  EXPECT_THROW(build_grids(small_data(), m, 25, 4), Error);
}

TEST(Localisation, AllMassInCellScoresOne) {
  auto g = blank_grid();
  Tensor<float> map(Dims{32, 32});
  map(20, 3) = 2.0f;  // bottom-left holds class 3
  map(0, 0) = -5.0f;
  EXPECT_DOUBLE_EQ(localisation_score(map, g, 3), 1.0);
}

TEST(Localisation, UniformMapScoresQuarter) {
  EXPECT_DOUBLE_EQ(localisation_score(Tensor<float>(Dims{32, 32}, 0.3f), blank_grid(), 0), 0.25);
}

TEST(Localisation, EqualMassInAndOutScoresHalf) {
  auto g = blank_grid();
  Tensor<float> map(Dims{32, 32});
  map(2, 20) = 1.5f;   // top-right, class 0
  map(30, 30) = 1.5f;  // bottom-right
  map(2, 21) = -4.0f;
  EXPECT_DOUBLE_EQ(localisation_score(map, g, 0), 0.5);
}

TEST(Localisation, BoundedAndZeroWithoutPositiveMass) {
  std::mt19937_64 rng(1);
  auto g = blank_grid();
  for (int t = 0; t < 50; ++t) {
    auto map = randn(Dims{32, 32}, rng);
    const double s = localisation_score(map, g, t % 4);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
  EXPECT_EQ(localisation_score(Tensor<float>(Dims{32, 32}, -1.0f), g, 1), 0.0);
  EXPECT_THROW(localisation_score(Tensor<float>(Dims{16, 16}), g, 1), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(Perturbation, FractionsSpanNinePoints) {
  auto f = perturbation_fractions();
  ASSERT_EQ(f.size(), 9u);
  EXPECT_EQ(f.front(), 0.0);
  EXPECT_EQ(f.back(), 0.25);
}

TEST(Perturbation, FirstPointIsOne) {
  std::mt19937_64 rng(2);
  BcosViT<float> m(micro(), 3);
  auto rgb = random_rgb<float>(32, rng);
  auto [mf, lf] = perturbation_curves(m, rgb, 1, randn(Dims{32, 32}, rng));
  EXPECT_EQ(mf.confidences[0], 1.0);
  EXPECT_EQ(lf.confidences[0], 1.0);
}

TEST(Perturbation, ConstantModelGivesFlatCurves) {
  std::mt19937_64 rng(3);
  BcosViT<float> m(micro(), 3);
  m.params()["classifier.weight"] = Tensor<float>(Dims{4, 64});
  auto [mf, lf] = perturbation_curves(m, random_rgb<float>(32, rng), 0, randn(Dims{32, 32}, rng));
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_EQ(mf.confidences[i], 1.0);
    EXPECT_EQ(lf.confidences[i], 1.0);
  }
  EXPECT_EQ(area_between_curves(mf, lf), 0.0);
}

TEST(Perturbation, TiesBreakByPixelIndex) {
  Tensor<double> map(Dims{2, 3}, std::vector<double>{1, 2, 2, 0, 1, 2});
  EXPECT_EQ(pixel_ranking(map, Order::most_first), (std::vector<std::size_t>{1, 2, 5, 0, 4, 3}));
  EXPECT_EQ(pixel_ranking(map, Order::least_first), (std::vector<std::size_t>{3, 0, 4, 1, 2, 5}));
  std::mt19937_64 rng(4);
  BcosViT<float> m(micro(), 5);
  auto rgb = random_rgb<float>(32, rng);
  Tensor<double> flat(Dims{32, 32}, 1.0);
  auto a = perturbation_curves(m, rgb, 2, flat), b = perturbation_curves(m, rgb, 2, flat);
  EXPECT_EQ(a.first.raw, b.first.raw);
  EXPECT_EQ(a.second.raw, b.second.raw);
}

TEST(Perturbation, InvariantToPositiveRescaling) {
  std::mt19937_64 rng(5);
  BcosViT<float> m(micro(), 6);
  auto rgb = random_rgb<float>(32, rng);
  auto map = randn(Dims{32, 32}, rng);
  auto a = perturbation_curves(m, rgb, 3, map), b = perturbation_curves(m, rgb, 3, map * 17.0);
  EXPECT_EQ(a.first.raw, b.first.raw);
  EXPECT_EQ(a.second.raw, b.second.raw);
}

TEST(Abc, LinearDropGivesHalf) {
  std::vector<double> most;
  for (int i = 0; i < 9; ++i) most.push_back(1.0 - i / 8.0);
  EXPECT_DOUBLE_EQ(area_between_curves(curve(most), curve(std::vector<double>(9, 1.0), Order::least_first)), 0.5);
}

TEST(Abc, IdenticalCurvesGiveZeroAndSwapNegates) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> a(9), b(9);
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    EXPECT_EQ(area_between_curves(curve(a), curve(a)), 0.0);
    const double ab = area_between_curves(curve(a), curve(b));
    EXPECT_EQ(area_between_curves(curve(b), curve(a)), -ab);
    EXPECT_LE(std::abs(ab), 1.0);
  }
  EXPECT_THROW(area_between_curves(curve({1, 2}), curve({1, 2})), Error);
}

TEST(Abc, MeanCurveNormalisesByInitialMean) {
  auto a = curve(std::vector<double>(9, 0));
  a.raw = {0.8, 0.8, 0.6, 0.6, 0.4, 0.4, 0.2, 0.2, 0.0};
  auto b = a;
  b.raw = {0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4};
  auto m = mean_curve({a, b});
  EXPECT_DOUBLE_EQ(m.raw[0], 0.6);
  EXPECT_DOUBLE_EQ(m.confidences[0], 1.0);
  EXPECT_DOUBLE_EQ(m.confidences[8], 0.2 / 0.6);
}

// ---------------------------------------------------------------------------

TEST(Benchmark, InherentNormalisesToOneAndRowsMatchMethods) {
  BcosViT<float> m(micro(), 7);
  BenchmarkOptions o;
  o.grids = 2;
  o.images = 2;
  o.intgrad_steps = 2;
  auto r = run_benchmark(m, small_data(), o);
  ASSERT_EQ(r.rows.size(), o.methods.size());
  for (auto& row : r.rows) EXPECT_TRUE(row.ok) << row.method << " " << row.diagnostic;
  EXPECT_DOUBLE_EQ(r.row("inherent").abc_normalised, 1.0);
  EXPECT_NE(r.table().find("rollout\t"), std::string::npos);
  EXPECT_NE(r.records().find("method=intgrad status=ok"), std::string::npos);
}

TEST(Benchmark, FailedMethodIsReportedNotFatal) {
  auto c = micro();
  c.standard_attention = true;
  BcosViT<float> m(c, 7);
  BenchmarkOptions o;
  o.grids = 1;
  o.images = 1;
  o.methods = {Method::inherent, Method::finatt};
  auto r = run_benchmark(m, small_data(), o);
  EXPECT_FALSE(r.row("inherent").ok);
  EXPECT_TRUE(r.row("finatt").ok);
  EXPECT_TRUE(std::isnan(r.row("finatt").abc_normalised));
}
