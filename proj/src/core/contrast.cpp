#include "contrast.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "rng.hpp"

namespace ima::contrast {

ContrastEstimate cima_global(const JacobianProvider& jacobian_at, const Matrix& points) {
  if (points.rows() < 2) throw DomainError("cima_global needs at least 2 points");
  std::vector<double> locals(points.rows());
  for (int k = 0; k < points.rows(); ++k) {
    try {
      locals[k] = cima_local(jacobian_at(points.row(k)));
    } catch (const SingularJacobian& e) {
      throw SingularJacobian("cima_global: singular Jacobian at point " + std::to_string(k) +
                                 ": " + e.what(),
                             e.condition_estimate());
    }
  }
  const MeanStderr ms = mean_stderr(locals);
  return {ms.mean, ms.std_error, ms.count};
}

Decomposition2D decompose_2d(const Matrix& jac, double log_base_density, double lambda) {
  if (jac.rows() != 2 || jac.cols() != 2) throw DomainError("decompose_2d requires a 2x2 Jacobian");
  if (lambda < 0.0 || lambda > 1.0) throw DomainError("decompose_2d requires lambda in [0,1]");
  const double log_det = logabsdet(jac);  // throws SingularJacobian when degenerate
  Decomposition2D d;
  d.norm_a = std::hypot(jac(0, 0), jac(1, 0));
  d.norm_b = std::hypot(jac(0, 1), jac(1, 1));
  const double cross = jac(0, 0) * jac(1, 1) - jac(0, 1) * jac(1, 0);
  const double dot = jac(0, 0) * jac(0, 1) + jac(1, 0) * jac(1, 1);
  d.theta = std::atan2(std::abs(cross), dot);
  d.term_i = log_base_density;
  d.term_ii = std::log(d.norm_a) + std::log(d.norm_b);
  // log|sin theta| as the closed difference, so the parallelogram-area
  // identity log|det| = log|a| + log|b| + log|sin theta| holds exactly.
  d.term_iii = log_det - d.term_ii;
  d.lambda = lambda;
  return d;
}

std::vector<ProfileRow> log_sin_theta_profile(std::span<const double> thetas) {
  std::vector<ProfileRow> rows;
  rows.reserve(thetas.size());
  for (const double t : thetas) {
    if (!(t > 0.0 && t < M_PI))
      throw DomainError("log_sin_theta_profile requires theta in the open interval (0, pi)");
    const double s = std::sin(t);
    rows.push_back({t, std::log(s), std::cos(t) / s});
  }
  return rows;
}

void write_profile_csv(std::span<const ProfileRow> rows, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  f << "theta,log_sin,grad\n";
  char buf[112];
  for (const ProfileRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", r.theta, r.log_sin, r.grad);
    f << buf;
  }
}

IsoperimetricReport isoperimetric_check(double area, int trials, std::uint64_t seed) {
  if (area <= 0.0) throw DomainError("isoperimetric_check requires area > 0");
  if (trials < 1) throw DomainError("isoperimetric_check requires at least one trial");
  Rng rng(mix_seed(seed, 0x150b3a7ull));
  IsoperimetricReport rep;
  rep.area = area;
  rep.trials = trials;
  rep.analytic_lower_bound = std::log(area);
  rep.min_sum = std::numeric_limits<double>::infinity();
  rep.all_above_bound = true;
  Matrix j(2, 2);
  int done = 0;
  while (done < trials) {
    for (int c = 0; c < 4; ++c) j.data()[c] = rng.normal();
    const double raw = std::abs(det(j));
    if (raw < 1e-12) continue;  // rejected draw, not a trial
    ++done;
    // Rescaling to |det| = area leaves the column angle unchanged.
    const double scale = std::sqrt(area / raw);
    const double na = scale * std::hypot(j(0, 0), j(1, 0));
    const double nb = scale * std::hypot(j(0, 1), j(1, 1));
    const double sum = std::log(na) + std::log(nb);
    if (sum < rep.analytic_lower_bound - 1e-12) rep.all_above_bound = false;
    if (sum < rep.min_sum) {
      rep.min_sum = sum;
      const double cross = j(0, 0) * j(1, 1) - j(0, 1) * j(1, 0);
      const double dot = j(0, 0) * j(0, 1) + j(1, 0) * j(1, 1);
      rep.min_theta = std::atan2(std::abs(cross), dot);
    }
  }
  rep.min_gap = rep.min_sum - rep.analytic_lower_bound;
  return rep;
}

void write_isoperimetric_csv(const IsoperimetricReport& report, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  f << "area,trials,min_sum,analytic_lower_bound,min_theta,min_gap,all_above_bound\n";
  char buf[176];
  std::snprintf(buf, sizeof buf, "%.17g,%d,%.17g,%.17g,%.17g,%.17g,%d\n", report.area,
                report.trials, report.min_sum, report.analytic_lower_bound, report.min_theta,
                report.min_gap, report.all_above_bound ? 1 : 0);
  f << buf;
}

}  // namespace ima::contrast
