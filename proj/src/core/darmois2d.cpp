#include "darmois2d.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ima::mixing {

namespace {

constexpr double kMassTolerance = 1e-3;
constexpr double kOutputClip = 1e-12;

}  // namespace

Darmois2d::Darmois2d(const MixingFunction& m, const SourcePrior& prior, QuadratureSpec spec)
    : nodes_(spec.nodes_per_axis) {
  if (m.n != 2 || prior.n != 2) throw DomainError("Darmois2d requires a 2-dimensional setup");
  if (nodes_ < 16) throw DomainError("Darmois2d needs at least 16 quadrature nodes per axis");

  // Bounding box of the pushed-forward source box, widened by the margin.
  double s_lo = 0.0, s_hi = 1.0;
  if (prior.kind == PriorKind::standard_normal) {
    s_lo = -spec.source_half_width;
    s_hi = spec.source_half_width;
  }
  const int probe = 65;
  lo_ = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  hi_ = {-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  std::vector<double> x(2);
  for (int i = 0; i < probe; ++i)
    for (int j = 0; j < probe; ++j) {
      const double s[2] = {s_lo + (s_hi - s_lo) * i / (probe - 1),
                           s_lo + (s_hi - s_lo) * j / (probe - 1)};
      mix_forward<double>(m, s, x);
      for (int c = 0; c < 2; ++c) {
        lo_[c] = std::min(lo_[c], x[c]);
        hi_[c] = std::max(hi_[c], x[c]);
      }
    }
  for (int c = 0; c < 2; ++c) {
    const double pad = spec.margin_fraction * (hi_[c] - lo_[c]);
    lo_[c] -= pad;
    hi_[c] += pad;
  }
  dx1_ = (hi_[0] - lo_[0]) / (nodes_ - 1);
  dx2_ = (hi_[1] - lo_[1]) / (nodes_ - 1);

  // Density table, then in-place cumulative rows.
  const MixingEvaluator eval(m);
  std::vector<double> table(static_cast<std::size_t>(nodes_) * nodes_);
  for (int i = 0; i < nodes_; ++i) {
    x[0] = lo_[0] + dx1_ * i;
    double* row = table.data() + static_cast<std::size_t>(i) * nodes_;
    for (int j = 0; j < nodes_; ++j) {
      x[1] = lo_[1] + dx2_ * j;
      const double ld = eval.log_density(prior, x);
      row[j] = std::isfinite(ld) ? std::exp(ld) : 0.0;
    }
  }

  std::vector<double> row_mass(nodes_);
  for (int i = 0; i < nodes_; ++i) {
    double* row = table.data() + static_cast<std::size_t>(i) * nodes_;
    double prev = row[0];
    row[0] = 0.0;
    for (int j = 1; j < nodes_; ++j) {
      const double cur = row[j];
      row[j] = row[j - 1] + 0.5 * (prev + cur) * dx2_;
      prev = cur;
    }
    row_mass[i] = row[nodes_ - 1];
    if (row_mass[i] > 0.0) {
      for (int j = 0; j < nodes_; ++j) row[j] /= row_mass[i];
    } else {
      for (int j = 0; j < nodes_; ++j) row[j] = static_cast<double>(j) / (nodes_ - 1);
    }
  }
  conditional_cdf_ = std::move(table);

  marginal_cdf_.assign(nodes_, 0.0);
  for (int i = 1; i < nodes_; ++i)
    marginal_cdf_[i] = marginal_cdf_[i - 1] + 0.5 * (row_mass[i - 1] + row_mass[i]) * dx1_;
  total_mass_ = marginal_cdf_[nodes_ - 1];
  if (std::abs(total_mass_ - 1.0) > kMassTolerance)
    throw NoConvergence("Darmois2d quadrature mass " + std::to_string(total_mass_) +
                        " deviates from 1 by more than 1e-3; widen the grid or raise "
                        "nodes_per_axis");
  for (double& v : marginal_cdf_) v /= total_mass_;
}

double Darmois2d::interp_marginal(double x1) const {
  const double u = std::clamp((x1 - lo_[0]) / dx1_, 0.0, static_cast<double>(nodes_ - 1));
  const int i0 = std::min(static_cast<int>(u), nodes_ - 2);
  const double frac = u - i0;
  return marginal_cdf_[i0] + frac * (marginal_cdf_[i0 + 1] - marginal_cdf_[i0]);
}

double Darmois2d::interp_conditional(int row, double x2) const {
  const double* cdf = conditional_cdf_.data() + static_cast<std::size_t>(row) * nodes_;
  const double u = std::clamp((x2 - lo_[1]) / dx2_, 0.0, static_cast<double>(nodes_ - 1));
  const int j0 = std::min(static_cast<int>(u), nodes_ - 2);
  const double frac = u - j0;
  return cdf[j0] + frac * (cdf[j0 + 1] - cdf[j0]);
}

std::array<double, 2> Darmois2d::transform(std::span<const double> x) const {
  if (x.size() != 2) throw DomainError("Darmois2d::transform expects a 2-vector");
  const double u = std::clamp((x[0] - lo_[0]) / dx1_, 0.0, static_cast<double>(nodes_ - 1));
  const int i0 = std::min(static_cast<int>(u), nodes_ - 2);
  const double frac = u - i0;
  const double y1 = interp_marginal(x[0]);
  const double c0 = interp_conditional(i0, x[1]);
  const double c1 = interp_conditional(i0 + 1, x[1]);
  const double y2 = c0 + frac * (c1 - c0);
  return {std::clamp(y1, kOutputClip, 1.0 - kOutputClip),
          std::clamp(y2, kOutputClip, 1.0 - kOutputClip)};
}

std::array<double, 2> darmois_2d(const MixingFunction& m, const SourcePrior& prior,
                                 std::span<const double> x, const QuadratureSpec& spec) {
  return Darmois2d(m, prior, spec).transform(x);
}

}  // namespace ima::mixing
