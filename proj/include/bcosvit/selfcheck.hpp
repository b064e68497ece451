// Invariant suite behind the `selfcheck` command: linearity, completeness,
// extractor agreement, B-cos bounds, gradient audits, the rollout oracle,
// metric unit values and permutation symmetry, all on randomly initialised
// models.
#pragma once

#include "bcosvit/gradient_audit.hpp"
#include "bcosvit/metrics.hpp"

namespace bcosvit {

enum class Fault { none, drop_skip, grad };

inline Fault parse_fault(const std::string& s) {
  if (s == "none") return Fault::none;
  if (s == "drop_skip") return Fault::drop_skip;
  if (s == "grad") return Fault::grad;
  throw ConfigError("unknown fault '" + s + "' (expected none, drop_skip or grad)");
}

struct CheckResult {
  std::string name;
  double tolerance = 0;
  double observed = 0;
  bool passed = false;
  std::string note;
};

struct SelfCheckOptions {
  std::uint64_t seed = 1;
  std::size_t inputs = 3;        // random inputs per linearity configuration
  std::size_t bcos_cases = 2000;  // randomised B-cos property cases
  Fault fault = Fault::none;
};

/// Relative linearity error |logits - bias - W x|_inf / (1 + |logits|_inf).
template <class T>
double linearity_error(const LinearSummary<T>& s) {
  double worst = 0;
  for (std::size_t k = 0; k < s.classes(); ++k) {
    double wx = 0;
    for (std::size_t j = 0; j < s.input.numel(); ++j) wx += double(s.W(k, j)) * double(s.input[j]);
    worst = std::max(worst, std::abs(double(s.logits[k]) - double(s.bias[k]) - wx));
  }
  return worst / (1.0 + double(s.logits.max_abs()));
}

/// Random encoded image with uniform colours.
template <class T>
Tensor<T> random_input(const BcosViTConfig& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<T> rgb(Dims{3, c.image_size, c.image_size});
  for (auto& v : rgb.values()) v = T(u(rng));
  return encode_image(rgb).pixels;
}

/// Random model whose priors, embedding and LayerNorm affine parameters are
/// non-trivial, so every variant departs from its initial symmetric state.
template <class T>
BcosViT<T> random_model(const BcosViTConfig& c, std::uint64_t seed) {
  BcosViT<T> m(c, seed);
  std::mt19937_64 rng(seed ^ 0x5eedull);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& [name, t] : m.params()) {
    const bool prior = name.find("att.prior") != std::string::npos;
    const bool ln = name.find(".ln.") != std::string::npos;
    if (!prior && !ln) continue;
    for (auto& v : t.values()) v = T(ln && name.find("scale") != std::string::npos ? 1 + 0.2 * n(rng) : n(rng));
  }
  return m;
}

/// Token-matrix logits of P and of P with its rows permuted; returns
/// max |difference|.
template <class T>
double permutation_gap(const BcosViT<T>& m, const Tensor<T>& P, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(P.rows());
  std::iota(perm.begin(), perm.end(), 0);
  do {
    std::shuffle(perm.begin(), perm.end(), rng);
  } while (std::is_sorted(perm.begin(), perm.end()));
  Tensor<T> Q(P.dims());
  for (std::size_t i = 0; i < P.rows(); ++i)
    std::copy(P.data() + perm[i] * P.cols(), P.data() + (perm[i] + 1) * P.cols(), Q.data() + i * P.cols());
  return max_abs_diff(forward_tokens(m, P), forward_tokens(m, Q));
}

inline std::vector<CheckResult> run_selfcheck(const SelfCheckOptions& opt) {
  std::vector<CheckResult> out;
  auto add = [&](std::string name, double tol, double observed, bool passed, std::string note = "") {
    out.push_back({std::move(name), tol, observed, passed, std::move(note)});
  };
  auto le = [&](std::string name, double tol, double observed) {
    add(std::move(name), tol, observed, std::isfinite(observed) && observed <= tol);
  };
  std::mt19937_64 rng(opt.seed);

  // Linearity, completeness and extractor agreement per positional variant.
  for (Positional p : {Positional::none, Positional::embedding, Positional::additive, Positional::multiplicative}) {
    auto cfg = preset_config("micro");
    cfg.positional = p;
    cfg.output_scale = 1;  // logits well away from the bias make the check sensitive
    cfg.fault_drop_skip = opt.fault == Fault::drop_skip;
    const auto m = random_model<float>(cfg, rng());
    const auto md = m.template cast<double>();
    double lin32 = 0, lin64 = 0, comp = 0, cross = 0;
    for (std::size_t i = 0; i < opt.inputs; ++i) {
      const Tensor<float> x = random_input<float>(cfg, rng);
      const auto s = extract_explicit(m, x);
      lin32 = std::max(lin32, linearity_error(s));
      lin64 = std::max(lin64, linearity_error(extract_explicit(md, x.cast<double>())));
      AdjointExtractor<float> adj(m, x);
      for (std::size_t k = 0; k < cfg.classes; ++k) {
        const auto map = contribution_map(s, x, k);
        const double target = double(s.logits[k]) - double(s.bias[k]);
        comp = std::max(comp, std::abs(double(map.values.sum()) - target) / (1.0 + std::abs(target)));
        const Tensor<float> row = adj.row(k);
        for (std::size_t j = 0; j < row.numel(); ++j)
          cross = std::max(cross, double(std::abs(row[j] - s.W(k, j))));
      }
    }
    const std::string v = to_string(p);
    le("linearity.f32." + v, 1e-4, lin32);
    le("linearity.f64." + v, 1e-8, lin64);
    le("completeness." + v, 1e-4, comp);
    le("extractor_agreement." + v, 1e-5, cross);
  }

  // B-cos boundedness and the alignment maximum.
  {
    double excess = -1e300, align = 0;
    std::uniform_int_distribution<int> bi(0, 3), dim(2, 12);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.1, 3.0);
    for (std::size_t i = 0; i < opt.bcos_cases; ++i) {
      const double b = 1.0 + 0.5 * bi(rng);
      const std::size_t d = std::size_t(dim(rng));
      Tensor<double> w(Dims{3, d}), a(Dims{d});
      for (auto& v : w.values()) v = n(rng);
      for (auto& v : a.values()) v = n(rng);
      const double gamma = u(rng);
      BcosLinear<double> layer(w, b, 1, gamma);
      const auto r = bcos_forward(layer, a);
      double na = 0;
      for (double v : a.values()) na += v * v;
      na = std::sqrt(na);
      for (std::size_t j = 0; j < 3; ++j) excess = std::max(excess, std::abs(r.out[j]) - gamma * na);
      // a = t * w_0 attains gamma * |a| on unit 0.
      const double t = u(rng);
      Tensor<double> al(Dims{d});
      double nw = 0;
      for (std::size_t c = 0; c < d; ++c) {
        al[c] = t * w(0, c);
        nw += al[c] * al[c];
      }
      const auto ra = bcos_forward(layer, al);
      align = std::max(align, std::abs(ra.out[0] - gamma * std::sqrt(nw)));
    }
    le("bcos.boundedness_excess", 1e-5, excess);
    le("bcos.alignment_maximum", 1e-9, align);
  }

  // Gradient audits.
  {
    GradCheckOptions gopt;
    if (opt.fault == Fault::grad) gopt.inject = 0.1;
    std::uint64_t s = opt.seed * 977;
    for (const auto& c : gradient_cases()) {
      try {
        const auto rep = grad_check(c.sample, c.loss, ++s, gopt);
        add("grad." + c.name, gopt.tol, rep.max_rel_error, rep.passed);
      } catch (const std::exception& e) {
        add("grad." + c.name, gopt.tol, std::numeric_limits<double>::quiet_NaN(), false, e.what());
      }
    }
  }

  // Rollout against a directly multiplied 3-token, 2-block instance.
  {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    auto stochastic = [&] {
      Tensor<double> a(Dims{2, 3, 3});
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t i = 0; i < 3; ++i) {
          double s = 0;
          for (std::size_t j = 0; j < 3; ++j) s += a(h, i, j) = u(rng);
          for (std::size_t j = 0; j < 3; ++j) a(h, i, j) /= s;
        }
      return a;
    };
    const auto a1 = stochastic(), a2 = stochastic();
    auto bar = [](const Tensor<double>& a) {
      double m[3][3];
      for (int i = 0; i < 3; ++i) {
        double s = 0;
        for (int j = 0; j < 3; ++j) {
          m[i][j] = 0.25 * (a(0, i, j) + a(1, i, j)) + (i == j ? 0.5 : 0.0);
          s += m[i][j];
        }
        for (int j = 0; j < 3; ++j) m[i][j] /= s;
      }
      return std::vector<double>(&m[0][0], &m[0][0] + 9);
    };
    const auto b1 = bar(a1), b2 = bar(a2);
    const auto r = rollout_matrix<double>({a1, a2});
    double err = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double e = 0;
        for (int k = 0; k < 3; ++k) e += b2[i * 3 + k] * b1[k * 3 + j];
        err = std::max(err, std::abs(e - r(i, j)));
      }
    le("rollout_oracle", 1e-6, err);
  }

  // Metric unit values.
  {
    GridSpec g;
    g.rgb = Tensor<float>(Dims{3, 32, 32});
    g.labels = {0, 1, 2, 3};
    le("metric.uniform_localisation", 0.0, std::abs(localisation_score(Tensor<float>(Dims{32, 32}, 1.0f), g, 2) - 0.25));
    PerturbationCurve most, least;
    most.fractions = least.fractions = perturbation_fractions();
    for (std::size_t i = 0; i < kPerturbationPoints; ++i) {
      least.confidences.push_back(1.0);
      most.confidences.push_back(1.0 - double(i) / 8.0);
    }
    le("metric.linear_drop_abc", 0.0, std::abs(area_between_curves(most, least) - 0.5));
  }

  // Token-order symmetry.
  {
    auto cfg = preset_config("micro");
    cfg.output_scale = 1;
    const auto m = random_model<float>(cfg, rng());
    std::normal_distribution<double> n(0.0, 50.0);
    Tensor<float> P(Dims{cfg.tokens(), cfg.dim});
    for (auto& v : P.values()) v = float(n(rng));
    le("permutation.invariant_none", 1e-5 * (1 + double(forward_tokens(m, P).max_abs())), permutation_gap(m, P, rng));
    cfg.positional = Positional::multiplicative;
    const auto mp = random_model<float>(cfg, rng());
    const double gap = permutation_gap(mp, P, rng);
    add("permutation.sensitive_multiplicative", 1e-3, gap, gap > 1e-3, "passes when the gap exceeds the tolerance");
  }
  return out;
}

inline std::string format_checks(const std::vector<CheckResult>& checks) {
  std::ostringstream os;
  os << std::setprecision(4);
  for (auto& c : checks) {
    os << (c.passed ? "PASS " : "FAIL ") << c.name << " tol=" << c.tolerance << " observed=" << c.observed;
    if (!c.note.empty()) os << " (" << c.note << ")";
    os << '\n';
  }
  return os.str();
}

}  // namespace bcosvit
