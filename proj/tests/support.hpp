#pragma once

// Shared helpers for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "gbe/autograd.hpp"

namespace gbe::testing {

inline Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(s);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

struct GradCheck {
  double relative_error = 0.0;
  double analytic_norm = 0.0;
};

/// Compares d(sum f())/dx from the tape against central differences on up
/// to `probes` coordinates of x (all coordinates when x is small enough).
inline GradCheck check_gradient(const std::function<Var()>& f, Var& x, int probes = 64,
                                double h = 1e-5, std::uint64_t seed = 1) {
  const Tensor analytic = gradient(f(), x);
  const std::size_t n = x.value().numel();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (static_cast<std::size_t>(probes) < n) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(probes));
  }
  double diff = 0.0, an = 0.0, nn = 0.0;
  for (std::size_t i : idx) {
    const double orig = x.value()[i];
    x.mutable_value()[i] = orig + h;
    const double fp = f().value().sum();
    x.mutable_value()[i] = orig - h;
    const double fm = f().value().sum();
    x.mutable_value()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    diff += (numeric - analytic[i]) * (numeric - analytic[i]);
    an += analytic[i] * analytic[i];
    nn += numeric * numeric;
  }
  const double scale = std::max({std::sqrt(an), std::sqrt(nn), 1e-300});
  return {std::sqrt(diff) / scale, std::sqrt(an)};
}

}  // namespace gbe::testing
