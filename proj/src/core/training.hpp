#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flows.hpp"
#include "matrix.hpp"
#include "mixing.hpp"
#include "reduce.hpp"

namespace ima::training {

enum class RegKind { none, cima, l1, l2 };

std::string to_string(RegKind k);
RegKind reg_kind_from_string(const std::string& s);

struct RegularizerSpec {
  RegKind kind = RegKind::none;
  double strength = 0.0;

  /// Zero strength collapses to kind none; negative strength is rejected.
  static RegularizerSpec make(RegKind kind, double strength);
};

struct TrainConfig {
  int iterations = 20000;
  int batch_size = 256;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool fresh_resample = true;  // false: minibatch a fixed pre-drawn dataset
  int dataset_size = 0;        // only read when fresh_resample is false
  int eval_every = 2000;
  int eval_points = 2048;
  double grad_clip = 100.0;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

/// One held-out evaluation. `loss` is the negated objective, so lower is
/// better; the objective itself is loglik minus the active penalty.
struct EvalRecord {
  int iteration = 0;
  double loss = 0.0;
  double loglik = 0.0;
  double cima = 0.0;
  double cima_stderr = 0.0;
  double wallclock_s = 0.0;
};

struct TrajectoryLog {
  std::vector<EvalRecord> records;
};

void write_trajectory_csv(const TrajectoryLog& log, const std::string& path);

/// Generative process the model is fit against: observations are mixed
/// prior samples, drawn fresh on demand.
struct ObservationSource {
  mixing::MixingFunction fn;
  mixing::SourcePrior prior;

  void draw(Rng& rng, Matrix& out) const;  // fills every row of out
};

template <class S>
struct LossParts {
  S value{0.0};
  S loglik{0.0};
  S penalty{0.0};
};

/// Mean log-likelihood over the batch minus the regularization penalty, as a
/// maximization objective. The cima penalty is the batch mean of the local
/// contrast of the inverse Jacobian; l1/l2 run over `penalty_slots` only, so
/// biases (and masked-out entries) are never penalized.
template <class S>
LossParts<S> batch_loss_core(const flows::FlowConfig& cfg, std::span<const S> params,
                             std::span<const std::uint8_t> penalty_slots, const Matrix& batch,
                             const RegularizerSpec& reg) {
  using std::abs;
  using std::log;
  using ad::abs;
  using ad::log;
  const int b = batch.rows();
  if (b < 2) throw DomainError("batch_loss: batch must contain at least 2 points");
  if (batch.cols() != cfg.n) throw DomainError("batch_loss: batch width does not match the model");
  std::vector<S> lls, cimas;
  lls.reserve(static_cast<std::size_t>(b));
  if (reg.kind == RegKind::cima) cimas.reserve(static_cast<std::size_t>(b));
  flows::detail::FlowScratch<S> scratch;
  for (int k = 0; k < b; ++k) {
    const flows::FlowEval<S> ev = flows::flow_eval<S>(cfg, params, batch.row(k), &scratch);
    lls.push_back(flows::base_log_density(cfg.base, std::span<const S>(ev.y)) + ev.log_det);
    if (reg.kind == RegKind::cima) {
      // cima_local(matinv(J)) with logabsdet(matinv(J)) folded to -log_det
      const Mat<S> inv = matinv(ev.jac);
      S acc(0.0);
      for (int j = 0; j < cfg.n; ++j) acc += log(column_norm(inv, j));
      cimas.push_back(acc + ev.log_det);
    }
  }
  const double inv_b = 1.0 / b;
  LossParts<S> parts;
  parts.loglik = ad::sum(std::span<const S>(lls)) * S(inv_b);
  switch (reg.kind) {
    case RegKind::none:
      break;
    case RegKind::cima:
      parts.penalty = ad::sum(std::span<const S>(cimas)) * S(inv_b) * S(reg.strength);
      break;
    case RegKind::l1: {
      S acc(0.0);
      for (std::size_t i = 0; i < params.size(); ++i)
        if (penalty_slots[i] != 0) acc += abs(params[i]);
      parts.penalty = acc * S(reg.strength);
      break;
    }
    case RegKind::l2: {
      S acc(0.0);
      for (std::size_t i = 0; i < params.size(); ++i)
        if (penalty_slots[i] != 0) acc += params[i] * params[i];
      parts.penalty = acc * S(reg.strength);
      break;
    }
  }
  parts.value = parts.loglik - parts.penalty;
  return parts;
}

struct LossBreakdown {
  double value = 0.0;
  double loglik = 0.0;
  double penalty = 0.0;
};

/// Throws NoConvergence naming the diverged term when any part is non-finite.
LossBreakdown batch_loss_parts(const flows::FlowModel& m, const Matrix& batch,
                               const RegularizerSpec& reg);
double batch_loss(const flows::FlowModel& m, const Matrix& batch, const RegularizerSpec& reg);

struct TrainResult {
  flows::FlowModel model;
  TrajectoryLog log;
  bool aborted = false;
  std::string abort_reason;
  int completed_iterations = 0;
};

/// Adam ascent on batch_loss with re-normalization (and masking) after every
/// step. On a non-finite loss or gradient the run aborts and the returned
/// model is the last parameter state that produced a finite loss.
TrainResult train(const flows::FlowModel& init, const ObservationSource& source,
                  const TrainConfig& cfg, const RegularizerSpec& reg);

/// Identity of a training setup: stable hash over the flow, data source,
/// optimizer, and regularizer configuration.
std::string training_config_hash(const flows::FlowConfig& flow, const ObservationSource& source,
                                 const TrainConfig& cfg, const RegularizerSpec& reg);

struct EqualAreaReport {
  int points = 0;
  int base_matched = 0;  // |base gap| <= eps
  int implied_ok = 0;    // of those, |logdet gap| <= eps + tolerance
  double max_loglik_gap = 0.0;
  double max_base_gap = 0.0;
  double max_logdet_gap = 0.0;
  double fraction_ok = 1.0;  // implied_ok / base_matched (1 when none matched)
};

/// Report-only comparison of two models claimed to fit the same density:
/// wherever the base log-densities agree within eps, the log-dets must agree
/// within eps plus the models' log-likelihood gap tolerance.
EqualAreaReport equal_area_check(const flows::FlowModel& a, const flows::FlowModel& b,
                                 const Matrix& points, double eps, double tolerance);

}  // namespace ima::training
