#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "errors.hpp"
#include "reduce.hpp"
#include "rng.hpp"

namespace ima::metrics {

namespace {

/// 1-based ranks of a column, ties averaged.
std::vector<double> average_ranks(const Matrix& M, int col) {
  const int m = M.rows();
  std::vector<int> idx(static_cast<std::size_t>(m));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return M(a, col) < M(b, col); });
  std::vector<double> r(static_cast<std::size_t>(m));
  int i = 0;
  while (i < m) {
    int j = i;
    while (j + 1 < m && M(idx[static_cast<std::size_t>(j + 1)], col) ==
                            M(idx[static_cast<std::size_t>(i)], col))
      ++j;
    const double avg = 0.5 * (i + j) + 1.0;
    for (int k = i; k <= j; ++k) r[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])] = avg;
    i = j + 1;
  }
  return r;
}

struct RankedColumns {
  std::vector<std::vector<double>> centered;  // rank vectors, mean removed
  std::vector<double> norm;
};

RankedColumns rank_all(const Matrix& M, const char* label) {
  const int m = M.rows(), n = M.cols();
  RankedColumns out;
  out.centered.resize(static_cast<std::size_t>(n));
  out.norm.resize(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    double lo = M(0, j), hi = M(0, j);
    for (int k = 1; k < m; ++k) {
      lo = std::min(lo, M(k, j));
      hi = std::max(hi, M(k, j));
    }
    if (lo == hi)
      throw DomainError("spearman_matrix: column " + std::to_string(j) + " of " + label +
                        " is constant");
    std::vector<double> r = average_ranks(M, j);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= m;
    double nrm = 0.0;
    for (double& v : r) {
      v -= mean;
      nrm += v * v;
    }
    out.norm[static_cast<std::size_t>(j)] = std::sqrt(nrm);
    out.centered[static_cast<std::size_t>(j)] = std::move(r);
  }
  return out;
}

}  // namespace

Matrix spearman_matrix(const Matrix& A, const Matrix& B) {
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw DomainError("spearman_matrix: sample matrices must have equal shape");
  if (A.rows() < 3) throw DomainError("spearman_matrix: need at least 3 samples");
  const RankedColumns ra = rank_all(A, "A");
  const RankedColumns rb = rank_all(B, "B");
  const int n = A.cols();
  const int m = A.rows();
  Matrix corr(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double dot = 0.0;
      const auto& ci = ra.centered[static_cast<std::size_t>(i)];
      const auto& cj = rb.centered[static_cast<std::size_t>(j)];
      for (int k = 0; k < m; ++k)
        dot += ci[static_cast<std::size_t>(k)] * cj[static_cast<std::size_t>(k)];
      corr(i, j) = dot / (ra.norm[static_cast<std::size_t>(i)] * rb.norm[static_cast<std::size_t>(j)]);
    }
  }
  return corr;
}

AssignmentResult hungarian(const Matrix& cost) {
  const int n = cost.rows();
  if (cost.cols() != n) throw DomainError("hungarian: cost matrix must be square");
  if (n < 1) throw DomainError("hungarian: empty cost matrix");
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (!std::isfinite(cost(i, j))) throw DomainError("hungarian: cost entries must be finite");

  // shortest augmenting paths with row/column potentials, 1-based arrays
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<double> v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(n + 1), 0);
  std::vector<int> way(static_cast<std::size_t>(n + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur =
            cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  AssignmentResult res;
  res.assignment.assign(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) {
    const int i = p[static_cast<std::size_t>(j)];
    res.assignment[static_cast<std::size_t>(i - 1)] = j - 1;
    res.total_cost += cost(i - 1, j - 1);
  }
  return res;
}

MccResult mcc(const Matrix& true_sources, const Matrix& recovered) {
  const Matrix corr = spearman_matrix(true_sources, recovered);
  const int n = corr.rows();
  Matrix cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost(i, j) = -std::fabs(corr(i, j));
  const AssignmentResult match = hungarian(cost);
  MccResult res;
  res.assignment = match.assignment;
  res.matched_correlations.resize(static_cast<std::size_t>(n));
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double r = corr(i, res.assignment[static_cast<std::size_t>(i)]);
    res.matched_correlations[static_cast<std::size_t>(i)] = r;
    acc += std::fabs(r);
  }
  res.mcc = acc / n;
  return res;
}

KldEstimate kld_estimate(const mixing::MixingFunction& m, const mixing::SourcePrior& prior,
                         const flows::FlowModel& model, int sample_count, std::uint64_t seed) {
  if (sample_count < 100) throw DomainError("kld_estimate: need at least 100 samples");
  if (model.cfg.n != m.n || prior.n != m.n)
    throw DomainError("kld_estimate: dimension mismatch between mixing, prior, and model");
  const std::vector<double> flat = model.flatten();
  flows::detail::FlowScratch<double> scratch;
  Rng rng(mix_seed(seed, 0x6b1dull));
  std::vector<double> s(static_cast<std::size_t>(m.n));
  std::vector<double> x(static_cast<std::size_t>(m.n));
  std::vector<double> diffs(static_cast<std::size_t>(sample_count));
  for (int k = 0; k < sample_count; ++k) {
    prior.sample(rng, s);
    mixing::mix_forward<double>(m, s, x);
    const double true_ll = prior.log_density(s) - logabsdet(mixing::mix_jacobian(m, s));
    const flows::FlowEval<double> ev =
        flows::flow_eval<double>(model.cfg, flat, x, &scratch);
    const double model_ll =
        flows::base_log_density(model.cfg.base, std::span<const double>(ev.y)) + ev.log_det;
    diffs[static_cast<std::size_t>(k)] = true_ll - model_ll;
  }
  const MeanStderr ms = mean_stderr(diffs);
  return KldEstimate{ms.mean, ms.std_error};
}

std::string metrics_csv_header() {
  return "mixing_seed,L,n,reg_kind,strength,run_seed,mcc,kld,kld_se,cima,cima_se";
}

std::string metrics_csv_row(const MetricsRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%llu,%d,%d,%s,%.17g,%llu,%.17g,%.17g,%.17g,%.17g,%.17g",
                static_cast<unsigned long long>(r.mixing_seed), r.L, r.n, r.reg_kind.c_str(),
                r.strength, static_cast<unsigned long long>(r.run_seed), r.mcc, r.kld.kld_nats,
                r.kld.std_error, r.cima.value, r.cima.std_error);
  return buf;
}

}  // namespace ima::metrics
