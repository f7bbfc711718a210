#pragma once

// Central finite-difference helpers shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

namespace gradcheck {

inline constexpr double kStep = 1e-3;
inline constexpr double kRelTol = 1e-4;

struct Report {
  double max_rel_err = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates where the loss is not smooth within one step
};

/// Relative error with a floor so that two tiny values compare as equal.
inline double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / scale;
}

/// Probes `coords` entries of `x`. `loss` re-evaluates the scalar at the
/// current contents of `x`; `analytic[i]` is the claimed derivative.
/// With `kink_aware`, a coordinate whose central difference changes between
/// step and step/10 is treated as straddling a kink and skipped.
inline Report check(std::vector<double>& x, const std::vector<double>& analytic,
                    const std::function<double()>& loss, const std::vector<std::size_t>& coords,
                    bool kink_aware = false) {
  Report r;
  for (std::size_t i : coords) {
    const double keep = x[i];
    auto central = [&](double h) {
      x[i] = keep + h;
      const double up = loss();
      x[i] = keep - h;
      const double down = loss();
      x[i] = keep;
      return (up - down) / (2 * h);
    };
    const double fd = central(kStep);
    if (kink_aware && rel_err(fd, central(kStep / 10)) > kRelTol) {
      ++r.skipped;
      continue;
    }
    r.max_rel_err = std::max(r.max_rel_err, rel_err(fd, analytic[i]));
    ++r.checked;
  }
  return r;
}

/// Up to `n` distinct indices in [0, size).
inline std::vector<std::size_t> sample_coords(std::size_t size, std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> all(size);
  for (std::size_t i = 0; i < size; ++i) all[i] = i;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(size, n));
  return all;
}

inline std::vector<double> randn(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace gradcheck
