#pragma once

#include "bcosvit/selfcheck.hpp"

#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>

namespace bcosvit::testing {

inline Tensor<double> randn(Dims d, std::mt19937_64& rng, double sd = 1.0) { return detail::randn(std::move(d), rng, sd); }

template <class T>
Tensor<T> random_rgb(std::size_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<T> rgb(Dims{3, size, size});
  for (auto& v : rgb.values()) v = T(u(rng));
  return rgb;
}

inline BcosViTConfig micro(Positional p = Positional::none) {
  auto c = preset_config("micro");
  c.positional = p;
  return c;
}

inline const std::vector<Positional> kVariants{Positional::none, Positional::embedding, Positional::additive,
                                               Positional::multiplicative};

/// Dense logits - bias - W x in double for a summary.
template <class T>
double relative_linearity_error(const LinearSummary<T>& s) {
  return linearity_error(s);
}

/// Fresh per-process scratch directory under the system temp path.
inline std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("bcosvit_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace bcosvit::testing
