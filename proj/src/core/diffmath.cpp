#include "diffmath.hpp"

#include <cmath>

namespace ima::diffmath {

Matrix jacobian(const VectorFn& fn, std::span<const double> point) {
  const int n = static_cast<int>(point.size());
  if (n < 1) throw DomainError("jacobian requires n >= 1");
  ad::Tape tape;
  std::vector<ad::Var> in(static_cast<std::size_t>(n));
  std::vector<ad::Var> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) in[static_cast<std::size_t>(i)] = tape.leaf(point[static_cast<std::size_t>(i)]);
  fn(in, out);
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(out[static_cast<std::size_t>(i)].value())) {
      throw DomainError("jacobian: output coordinate " + std::to_string(i) + " is non-finite");
    }
  }
  Matrix j(n, n);
  for (int i = 0; i < n; ++i) {
    tape.backward(out[static_cast<std::size_t>(i)].index());
    for (int k = 0; k < n; ++k) j(i, k) = tape.adjoint(in[static_cast<std::size_t>(k)]);
  }
  return j;
}

std::vector<double> grad(const LossFn& loss, std::span<const double> params) {
  ad::Tape tape;
  std::vector<ad::Var> p(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) p[i] = tape.leaf(params[i]);
  const ad::Var out = loss(tape, p);
  if (!std::isfinite(out.value())) throw DomainError("grad: loss value is non-finite");
  tape.backward(out.index());
  std::vector<double> g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    g[i] = tape.adjoint(p[i]);
    if (!std::isfinite(g[i])) {
      throw DomainError("grad: gradient coordinate " + std::to_string(i) + " is non-finite");
    }
  }
  return g;
}

double loss_value(const LossFn& loss, std::span<const double> params) {
  ad::Tape tape;
  std::vector<ad::Var> p(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) p[i] = tape.leaf(params[i]);
  return loss(tape, p).value();
}

CheckReport finite_diff_check(const LossFn& loss, std::span<const double> params, double step,
                              double tol) {
  if (step <= 0.0) throw DomainError("finite_diff_check requires step > 0");
  CheckReport report;
  report.step = step;
  report.tol = tol;
  const std::vector<double> analytic = grad(loss, params);
  std::vector<double> shifted(params.begin(), params.end());
  for (std::size_t i = 0; i < params.size(); ++i) {
    shifted[i] = params[i] + step;
    const double up = loss_value(loss, shifted);
    shifted[i] = params[i] - step;
    const double down = loss_value(loss, shifted);
    shifted[i] = params[i];
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::fabs(numeric), std::fabs(analytic[i]), 1e-6});
    const double rel = std::fabs(numeric - analytic[i]) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coordinate = static_cast<int>(i);
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
    }
  }
  report.pass = report.max_rel_error < tol;
  return report;
}

}  // namespace ima::diffmath
