#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "contrast.hpp"
#include "flows.hpp"
#include "matrix.hpp"
#include "mixing.hpp"

namespace ima::metrics {

/// Rank-correlation matrix between the columns of two equally-shaped sample
/// matrices: entry (i,j) is the Pearson correlation of the average-ranked
/// columns A[:,i] and B[:,j]. Ties get average ranks. A constant column has
/// no ranking information and is rejected, naming the offender.
Matrix spearman_matrix(const Matrix& A, const Matrix& B);

struct AssignmentResult {
  std::vector<int> assignment;  // assignment[row] = matched column
  double total_cost = 0.0;
};

/// Minimum-total-cost perfect matching of rows to columns (O(n^3),
/// shortest augmenting paths with potentials).
AssignmentResult hungarian(const Matrix& cost);

struct MccResult {
  double mcc = 0.0;                          // mean of |matched correlations|
  std::vector<int> assignment;               // true column -> recovered column
  std::vector<double> matched_correlations;  // signed, one per true column
};

/// Recovery score blind to the unresolvable ambiguities: columns are matched
/// by Hungarian assignment on -|spearman| and the score is the mean absolute
/// matched correlation, so permutations, sign flips, and strictly monotone
/// per-column warps all score 1.
MccResult mcc(const Matrix& true_sources, const Matrix& recovered);

struct KldEstimate {
  double kld_nats = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo estimate of KL(true || model) in nats: samples sources from
/// the prior, mixes them, and averages true minus model log-density. The
/// true density is exact (change of variables at the known source point).
KldEstimate kld_estimate(const mixing::MixingFunction& m, const mixing::SourcePrior& prior,
                         const flows::FlowModel& model, int sample_count, std::uint64_t seed);

/// One evaluated model in an experiment grid.
struct MetricsRecord {
  std::uint64_t mixing_seed = 0;
  int L = 0;
  int n = 0;
  std::string reg_kind = "none";
  double strength = 0.0;
  std::uint64_t run_seed = 0;
  double mcc = 0.0;
  KldEstimate kld;
  contrast::ContrastEstimate cima;
  std::vector<int> assignment;
  std::vector<double> matched_correlations;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);

}  // namespace ima::metrics
