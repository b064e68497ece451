// Central finite-difference audit of Graph<double>::backward.
#pragma once

#include "bcosvit/autograd.hpp"

#include <random>

namespace bcosvit {

using ParamMap = std::map<std::string, Tensor<double>>;
using VarMap = std::map<std::string, Var>;

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0;
  std::map<std::string, double> rel_error;  // per parameter tensor
  int resamples = 0;
  double max_gradient = 0;  // largest |analytic| entry; 0 means the audit saw nothing
  double tolerance = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-3;
  int max_resamples = 8;
  /// Negative-control hook: the analytic gradient is multiplied by (1 + inject).
  double inject = 0;
};

namespace detail {
inline Var build_loss(Graph<double>& g, const ParamMap& params,
                      const std::function<Var(Graph<double>&, const VarMap&)>& loss_fn) {
  VarMap vars;
  for (const auto& [name, t] : params) vars.emplace(name, g.parameter(name, t));
  return loss_fn(g, vars);
}
}  // namespace detail

/// Samples an evaluation point, rejecting points within 10*eps of a
/// non-smooth locus, then compares backward() against central differences.
/// Relative error of a tensor is max|fd - an| / max(max|fd|, max|an|, 1e-10).
inline GradCheckReport grad_check(const std::function<ParamMap(std::mt19937_64&)>& sample,
                                  const std::function<Var(Graph<double>&, const VarMap&)>& loss_fn,
                                  std::uint64_t seed, const GradCheckOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  GradCheckReport report;
  report.tolerance = opt.tol;
  ParamMap params;
  for (int attempt = 0;; ++attempt) {
    params = sample(rng);
    Graph<double> probe;
    detail::build_loss(probe, params, loss_fn);
    if (probe.smooth_margin() >= 10 * opt.eps) break;
    if (attempt >= opt.max_resamples)
      throw Error("grad_check: evaluation point stays near a non-smooth locus after " +
                  std::to_string(opt.max_resamples) + " resamples");
    ++report.resamples;
  }

  Graph<double> g;
  Var loss = detail::build_loss(g, params, loss_fn);
  auto analytic = g.backward(loss);

  auto eval = [&](const ParamMap& p) {
    Graph<double> h;
    Var l = detail::build_loss(h, p, loss_fn);
    return h.value(l)[0];
  };

  report.passed = true;
  for (auto& [name, value] : params) {
    Tensor<double> an = analytic.at(name) * (1.0 + opt.inject);
    Tensor<double> fd(value.dims());
    ParamMap p = params;
    for (std::size_t i = 0; i < value.numel(); ++i) {
      const double orig = value[i];
      p[name][i] = orig + opt.eps;
      const double fp = eval(p);
      p[name][i] = orig - opt.eps;
      const double fm = eval(p);
      p[name][i] = orig;
      fd[i] = (fp - fm) / (2 * opt.eps);
    }
    report.max_gradient = std::max(report.max_gradient, an.max_abs());
    const double denom = std::max({fd.max_abs(), an.max_abs(), 1e-10});
    const double rel = max_abs_diff(fd, an) / denom;
    report.rel_error[name] = rel;
    report.max_rel_error = std::max(report.max_rel_error, rel);
    if (!(rel <= opt.tol)) report.passed = false;
  }
  if (!(report.max_gradient > 0)) report.passed = false;
  return report;
}

}  // namespace bcosvit
