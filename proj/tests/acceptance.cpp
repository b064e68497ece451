// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Criteria 8 and 9 train six micro models and take roughly 15 minutes on one core.
#include "bcosvit/checkpoint.hpp"
#include "bcosvit/selfcheck.hpp"
#include "bcosvit/train.hpp"

#include <sys/wait.h>

#include <chrono>
#include <filesystem>
#include <iostream>

using namespace bcosvit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
  std::cout << (o.pass ? "PASS " : "FAIL ") << id << ' ' << name << ": " << o.detail << std::endl;
  failures += !o.pass;
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

BcosViTConfig micro(Positional p) {
  auto c = preset_config("micro");
  c.positional = p;
  c.output_scale = 1;  // keeps logits well away from the bias so the checks are sensitive
  return c;
}

const std::vector<Positional> kVariants{Positional::none, Positional::embedding, Positional::additive,
                                        Positional::multiplicative};

Outcome linearity() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst32 = 0, worst64 = 0;
  for (auto p : kVariants)
    for (bool ablation : {false, true}) {
      auto cfg = micro(p);
      if (ablation) {
        cfg.maxout_enabled = false;
        cfg.b_attention = 1;
      }
      const auto m = random_model<float>(cfg, rng());
      const auto md = m.cast<double>();
      for (int i = 0; i < 50; ++i) {
        const auto x = random_input<float>(cfg, rng);
        worst32 = std::max(worst32, linearity_error(extract_explicit(m, x)));
        worst64 = std::max(worst64, linearity_error(extract_explicit(md, x.cast<double>())));
      }
    }
  const double t = seconds_since(t0);
  return {worst32 <= 1e-4 && worst64 <= 1e-8 && t < 120,
          "8 configurations x 50 inputs, f32 " + fmt(worst32) + " <= 1e-4, f64 " + fmt(worst64) + " <= 1e-8, " +
              fmt(t) + " s < 120 s"};
}

Outcome completeness() {
  std::mt19937_64 rng(202);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto cfg = micro(kVariants[trial % 4]);
    const auto m = random_model<float>(cfg, rng());
    const auto x = random_input<float>(cfg, rng);
    const auto s = extract_explicit(m, x);
    const std::size_t k = std::size_t(trial) % cfg.classes;
    const double target = double(s.logits[k]) - double(s.bias[k]);
    worst = std::max(worst, std::abs(double(contribution_map(s, x, k).values.sum()) - target) / (1 + std::abs(target)));
  }
  return {worst <= 1e-4, "50 trials, relative error " + fmt(worst) + " <= 1e-4"};
}

Outcome extractor_agreement() {
  std::mt19937_64 rng(303);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto cfg = micro(kVariants[trial % 4]);
    const auto m = random_model<float>(cfg, rng());
    const auto x = random_input<float>(cfg, rng);
    const auto s = extract_explicit(m, x);
    AdjointExtractor<float> adj(m, x);
    for (std::size_t k = 0; k < cfg.classes; ++k) {
      const auto row = adj.row(k);
      for (std::size_t j = 0; j < row.numel(); ++j) worst = std::max(worst, double(std::abs(row[j] - s.W(k, j))));
    }
  }
  return {worst <= 1e-5, "50 trials, max |W_explicit - W_adjoint| " + fmt(worst) + " <= 1e-5"};
}

Outcome selfcheck_subset(const std::string& prefix, std::size_t bcos_cases, std::string what) {
  SelfCheckOptions o;
  o.seed = 404;
  o.inputs = 1;
  o.bcos_cases = bcos_cases;
  bool pass = true;
  std::size_t seen = 0;
  std::string detail;
  for (auto& c : run_selfcheck(o))
    if (c.name.rfind(prefix, 0) == 0) {
      ++seen;
      pass &= c.passed;
      detail += (detail.empty() ? "" : ", ") + c.name + " " + fmt(c.observed) + " (tol " + fmt(c.tolerance) + ")";
    }
  return {pass && seen > 0, what + "; " + detail};
}

Outcome gradient_audit() {
  std::size_t points = 0, failed = 0;
  double worst = 0;
  std::uint64_t seed = 505;
  for (const auto& c : gradient_cases())
    for (int i = 0; i < 8; ++i) {
      const auto rep = grad_check(c.sample, c.loss, ++seed);
      ++points;
      failed += !rep.passed;
      worst = std::max(worst, rep.max_rel_error);
    }
  return {points >= 100 && failed == 0 && worst <= 1e-3,
          std::to_string(points) + " audit points, " + std::to_string(failed) + " failed, max relative error " +
              fmt(worst) + " <= 1e-3"};
}

Outcome metric_units() {
  GridSpec g;
  g.rgb = Tensor<float>(Dims{3, 32, 32});
  g.labels = {0, 1, 2, 3};
  const double loc = localisation_score(Tensor<float>(Dims{32, 32}, 1.0f), g, 2);
  PerturbationCurve most, least;
  most.fractions = least.fractions = perturbation_fractions();
  for (std::size_t i = 0; i < kPerturbationPoints; ++i) {
    least.confidences.push_back(1.0);
    most.confidences.push_back(1.0 - double(i) / 8.0);
  }
  const double abc = area_between_curves(most, least);
  return {std::abs(loc - 0.25) < 1e-12 && std::abs(abc - 0.5) < 1e-12,
          "uniform localisation " + fmt(loc) + " = 0.25, linear-drop ABC " + fmt(abc) + " = 0.5"};
}

struct TrainedRun {
  double final_acc = 0, seconds = 0;
};

std::map<std::pair<Positional, int>, TrainedRun> runs;
std::optional<BcosViT<float>> mul_model;

Outcome training(const fs::path& dir) {
  ShapesDataset data;
  double mean_mul = 0, mean_none = 0, min_mul = 1, slowest = 0;
  for (int seed = 0; seed < 3; ++seed)
    for (auto p : {Positional::multiplicative, Positional::none}) {
      auto cfg = preset_config("micro");
      cfg.positional = p;
      BcosViT<float> m(cfg, std::uint64_t(seed));
      TrainConfig tc;
      tc.seed = std::uint64_t(seed);
      const auto t0 = Clock::now();
      const auto r = train(m, data, tc);
      TrainedRun run{r.history.back().val_acc, seconds_since(t0)};
      runs[{p, seed}] = run;
      std::cout << "  " << to_string(p) << " seed " << seed << ": val_acc " << fmt(run.final_acc) << " in "
                << fmt(run.seconds) << " s" << std::endl;
      slowest = std::max(slowest, run.seconds);
      if (p == Positional::multiplicative) {
        mean_mul += run.final_acc / 3;
        min_mul = std::min(min_mul, run.final_acc);
        if (seed == 0) {
          save_checkpoint(dir / "multiplicative_seed0.bckp", model_checkpoint(m));
          mul_model = m;
        }
      } else {
        mean_none += run.final_acc / 3;
      }
    }
  return {min_mul >= 0.9 && slowest < 1800 && mean_mul >= mean_none,
          "multiplicative min val_acc " + fmt(min_mul) + " >= 0.9, slowest run " + fmt(slowest) +
              " s < 1800 s, mean multiplicative " + fmt(mean_mul) + " >= mean none " + fmt(mean_none)};
}

Outcome benchmark() {
  if (!mul_model) return {false, "no trained multiplicative model"};
  BenchmarkOptions o;
  o.methods = {Method::inherent, Method::finatt, Method::rollout};
  const auto rep = run_benchmark(*mul_model, ShapesDataset{}, o);
  std::cout << rep.table();
  const auto& in = rep.row("inherent");
  const auto& fa = rep.row("finatt");
  const auto& ro = rep.row("rollout");
  const bool ok = in.ok && fa.ok && ro.ok;
  return {ok && in.localisation > std::max(fa.localisation, ro.localisation) && in.abc > std::max(fa.abc, ro.abc),
          "50 grids / 50 images; localisation inherent " + fmt(in.localisation) + " > finatt " +
              fmt(fa.localisation) + ", rollout " + fmt(ro.localisation) + "; ABC inherent " + fmt(in.abc) +
              " > finatt " + fmt(fa.abc) + ", rollout " + fmt(ro.abc)};
}

int run(const std::string& args) {
  const std::string cmd = std::string(BCOSVIT_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome selfcheck_cli(const fs::path& dir) {
  const int ok = run("selfcheck -o " + (dir / "sc_ok").string());
  const int skip = run("selfcheck --fault drop_skip -o " + (dir / "sc_skip").string());
  const int grad = run("selfcheck --fault grad -o " + (dir / "sc_grad").string());
  return {ok == 0 && skip == 1 && grad == 1, "exit codes clean " + std::to_string(ok) + " = 0, drop_skip " +
                                                 std::to_string(skip) + " = 1, grad " + std::to_string(grad) + " = 1"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path dir = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "bcosvit_acceptance";
  fs::create_directories(dir);
  auto guarded = [](int id, const std::string& name, auto&& fn) {
    try {
      report(id, name, fn());
    } catch (const std::exception& e) {
      report(id, name, {false, std::string("exception: ") + e.what()});
    }
  };
  guarded(1, "linearity", linearity);
  guarded(2, "completeness", completeness);
  guarded(3, "explicit/adjoint agreement", extractor_agreement);
  guarded(4, "B-cos properties", [] { return selfcheck_subset("bcos.", 10000, "10000 random layers"); });
  guarded(5, "gradient audit", gradient_audit);
  guarded(6, "rollout oracle", [] { return selfcheck_subset("rollout_oracle", 1, "3 tokens, 2 blocks"); });
  guarded(7, "metric unit values", metric_units);
  guarded(8, "training", [&] { return training(dir); });
  guarded(9, "benchmark ordering", benchmark);
  guarded(10, "permutation", [] { return selfcheck_subset("permutation.", 1, "random token matrices"); });
  guarded(11, "selfcheck exit codes", [&] { return selfcheck_cli(dir); });
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
