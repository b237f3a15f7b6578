#pragma once

#include <array>
#include <span>
#include <vector>

#include "mixing.hpp"

namespace ima::mixing {

struct QuadratureSpec {
  int nodes_per_axis = 2048;
  double source_half_width = 6.0;  // prior standard deviations covered per axis
  double margin_fraction = 0.05;   // widening of the pushed-forward bounding box
};

/// Conditional-CDF transform of the exact pushforward density, tabulated on a
/// uniform grid: (x1, x2) -> (F(x1), F(x2 | x1)). Output components are
/// uniform on (0,1) and independent.
class Darmois2d {
 public:
  Darmois2d(const MixingFunction& m, const SourcePrior& prior, QuadratureSpec spec = {});

  std::array<double, 2> transform(std::span<const double> x) const;

  /// Trapezoid integral of the tabulated density; 1 up to truncation error.
  double total_mass() const { return total_mass_; }
  double grid_lo(int axis) const { return lo_[axis]; }
  double grid_hi(int axis) const { return hi_[axis]; }

 private:
  double interp_marginal(double x1) const;
  double interp_conditional(int row, double x2) const;

  int nodes_;
  std::array<double, 2> lo_{}, hi_{};
  double dx1_ = 0.0, dx2_ = 0.0;
  double total_mass_ = 0.0;
  std::vector<double> marginal_cdf_;     // nodes_, normalized to [0,1]
  std::vector<double> conditional_cdf_;  // nodes_ x nodes_, row-major, each row in [0,1]
};

/// One-off convenience; builds the full table, so prefer the class for bulk use.
std::array<double, 2> darmois_2d(const MixingFunction& m, const SourcePrior& prior,
                                 std::span<const double> x, const QuadratureSpec& spec = {});

}  // namespace ima::mixing
