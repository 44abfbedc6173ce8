#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include "dudo/tensor.hpp"

namespace dudo {

/// Local k-space window of `window_k` consecutive phase-encode lines under acceleration `accel`
/// with a fully sampled central fraction `acs_fraction`.
struct FeasibilityQuery {
  int window_k = 2;
  double accel = 4.0;
  double acs_fraction = 0.125;
};

/// Probability that a single non-ACS line is not acquired; clamped into [0, 1].
inline double line_miss_probability(const FeasibilityQuery& q) {
  if (!(q.accel > 0.0)) throw ParameterError("acceleration must be positive");
  if (!(q.acs_fraction < 1.0) || q.acs_fraction < 0.0) throw ParameterError("acs_fraction must lie in [0, 1)");
  const double hit = (1.0 / q.accel - q.acs_fraction) / (1.0 - q.acs_fraction);
  return std::clamp(1.0 - hit, 0.0, 1.0);
}

/// Probability that at least two of the window's k lines are acquired, lines treated as
/// independent Bernoulli draws.
inline double feasibility_probability(const FeasibilityQuery& q) {
  if (q.window_k < 2) throw ParameterError("window must span at least 2 lines");
  const double p = line_miss_probability(q);
  const double k = q.window_k;
  const double none = std::pow(p, k);
  const double one = k * std::pow(p, k - 1.0) * (1.0 - p);
  return std::clamp(1.0 - none - one, 0.0, 1.0);
}

/// Simulated counterpart of feasibility_probability: fraction of `trials` random windows
/// holding two or more acquired lines. Deterministic for a fixed seed.
inline double monte_carlo_feasibility(const FeasibilityQuery& q, std::uint64_t trials, std::uint64_t seed) {
  if (trials < 1) throw ParameterError("trials must be >= 1");
  if (q.window_k < 2) throw ParameterError("window must span at least 2 lines");
  const double hit = 1.0 - line_miss_probability(q);
  // A 32-bit draw u counts as an acquired line when u < threshold.
  const double scaled = std::ldexp(hit, 32);
  const std::uint64_t threshold = scaled >= std::ldexp(1.0, 32) ? (std::uint64_t{1} << 32)
                                                                 : static_cast<std::uint64_t>(scaled);
  std::mt19937_64 rng(seed);
  std::uint64_t word = 0;
  bool have_half = false;
  auto draw = [&]() -> std::uint64_t {
    if (have_half) {
      have_half = false;
      return word >> 32;
    }
    word = rng();
    have_half = true;
    return word & 0xffffffffu;
  };
  std::uint64_t feasible = 0;
  for (std::uint64_t t = 0; t < trials; ++t) {
    int measured = 0;
    for (int line = 0; line < q.window_k && measured < 2; ++line) {
      if (draw() < threshold) ++measured;
    }
    if (measured >= 2) ++feasible;
  }
  return static_cast<double>(feasible) / static_cast<double>(trials);
}

struct FeasibilityCell {
  int window_k;
  double accel;
  double probability;
};

/// Dense (k, a) grid at fixed acs_fraction, k-major then a. Cells with a < 1 or an
/// infeasible acs_fraction are still evaluated (p is clamped).
inline std::vector<FeasibilityCell> feasibility_grid(int k_min, int k_max, const std::vector<double>& accels,
                                                     double acs_fraction) {
  if (k_min > k_max || accels.empty()) throw ParameterError("feasibility grid ranges must be non-empty");
  std::vector<FeasibilityCell> cells;
  cells.reserve(static_cast<std::size_t>(k_max - k_min + 1) * accels.size());
  for (int k = k_min; k <= k_max; ++k) {
    for (double a : accels) {
      cells.push_back({k, a, feasibility_probability({k, a, acs_fraction})});
    }
  }
  return cells;
}

/// Smallest grid acceleration whose maximum P over all window sizes is below `threshold`.
inline std::optional<double> min_accel_below(const std::vector<FeasibilityCell>& cells, double threshold) {
  std::map<double, double> worst;  // accel -> max over k
  for (const auto& c : cells) {
    auto [it, fresh] = worst.try_emplace(c.accel, c.probability);
    if (!fresh) it->second = std::max(it->second, c.probability);
  }
  for (const auto& [a, p] : worst)
    if (p < threshold) return a;
  return std::nullopt;
}

/// Seed for the Monte-Carlo stream of one grid cell; independent of evaluation order.
inline std::uint64_t cell_seed(std::uint64_t base, int window_k, double accel) {
  std::uint64_t z = base ^ (static_cast<std::uint64_t>(window_k) << 32) ^
                    static_cast<std::uint64_t>(std::llround(accel * 1000.0));
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace dudo
