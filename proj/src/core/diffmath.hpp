#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "matrix.hpp"
#include "tape.hpp"

namespace ima::diffmath {

/// Smooth map R^n -> R^n expressed over tape scalars.
using VectorFn = std::function<void(std::span<const ad::Var>, std::span<ad::Var>)>;

/// Scalar loss over a parameter vector, built on the given tape.
using LossFn = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

/// Exact Jacobian of `fn` at `point` via one reverse sweep per output row.
Matrix jacobian(const VectorFn& fn, std::span<const double> point);

/// Exact gradient of `loss` at `params`.
std::vector<double> grad(const LossFn& loss, std::span<const double> params);

/// Value-only evaluation of a LossFn (the tape is discarded).
double loss_value(const LossFn& loss, std::span<const double> params);

struct CheckReport {
  bool pass = false;
  double max_rel_error = 0.0;
  int worst_coordinate = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  double step = 0.0;
  double tol = 0.0;
};

/// Central-difference comparison of grad() against a numerical estimate.
CheckReport finite_diff_check(const LossFn& loss, std::span<const double> params, double step,
                              double tol);

}  // namespace ima::diffmath
