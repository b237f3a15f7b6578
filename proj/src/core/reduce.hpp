#pragma once

#include <cmath>
#include <span>

#include "errors.hpp"

namespace ima {

/// Index-order pairwise tree sum: the result is independent of how the values
/// were produced (serial or parallel), so reductions stay reproducible.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double acc = 0.0;
    for (const double x : xs) acc += x;
    return acc;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

struct MeanStderr {
  double mean = 0.0;
  double std_error = 0.0;
  int count = 0;
};

inline MeanStderr mean_stderr(std::span<const double> xs) {
  if (xs.size() < 2) throw DomainError("mean_stderr needs at least 2 samples");
  const double n = static_cast<double>(xs.size());
  const double mean = pairwise_sum(xs) / n;
  double ss = 0.0;
  for (const double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / ((n - 1.0) * n)), static_cast<int>(xs.size())};
}

}  // namespace ima
