#include "training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "hash.hpp"

namespace ima::training {

namespace {

using nlohmann::json;

void validate(const TrainConfig& cfg) {
  if (cfg.iterations < 1) throw ConfigError("train config: iterations must be >= 1");
  if (cfg.batch_size < 2) throw ConfigError("train config: batch_size must be >= 2");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be > 0");
  if (!(cfg.adam_beta1 >= 0.0 && cfg.adam_beta1 < 1.0) ||
      !(cfg.adam_beta2 >= 0.0 && cfg.adam_beta2 < 1.0))
    throw ConfigError("train config: adam betas must lie in [0, 1)");
  if (!(cfg.adam_eps > 0.0)) throw ConfigError("train config: adam_eps must be > 0");
  if (cfg.eval_every < 1) throw ConfigError("train config: eval_every must be >= 1");
  if (cfg.eval_points < 2) throw ConfigError("train config: eval_points must be >= 2");
  if (!cfg.fresh_resample && cfg.dataset_size < cfg.batch_size)
    throw ConfigError("train config: dataset_size must be >= batch_size in fixed-dataset mode");
  if (!(cfg.grad_clip > 0.0)) throw ConfigError("train config: grad_clip must be > 0");
}

json config_json(const TrainConfig& cfg) {
  return json{{"iterations", cfg.iterations},
              {"batch_size", cfg.batch_size},
              {"learning_rate", cfg.learning_rate},
              {"adam_beta1", cfg.adam_beta1},
              {"adam_beta2", cfg.adam_beta2},
              {"adam_eps", cfg.adam_eps},
              {"seed", cfg.seed},
              {"data_source", cfg.fresh_resample ? "fresh_resample" : "fixed_dataset"},
              {"dataset_size", cfg.dataset_size},
              {"eval_every", cfg.eval_every},
              {"eval_points", cfg.eval_points},
              {"grad_clip", cfg.grad_clip}};
}

}  // namespace

std::string to_string(RegKind k) {
  switch (k) {
    case RegKind::none:
      return "none";
    case RegKind::cima:
      return "cima";
    case RegKind::l1:
      return "l1";
    default:
      return "l2";
  }
}

RegKind reg_kind_from_string(const std::string& s) {
  if (s == "none") return RegKind::none;
  if (s == "cima") return RegKind::cima;
  if (s == "l1") return RegKind::l1;
  if (s == "l2") return RegKind::l2;
  throw ConfigError("unknown regularizer kind: " + s);
}

RegularizerSpec RegularizerSpec::make(RegKind kind, double strength) {
  if (strength < 0.0) throw ConfigError("regularizer strength must be >= 0");
  if (strength == 0.0) return RegularizerSpec{RegKind::none, 0.0};
  if (kind == RegKind::none) throw ConfigError("regularizer kind none cannot carry a strength");
  return RegularizerSpec{kind, strength};
}

std::string train_config_to_json(const TrainConfig& cfg) { return config_json(cfg).dump(2); }

TrainConfig train_config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: invalid JSON: ") + e.what());
  }
  static const char* known[] = {"iterations", "batch_size", "learning_rate", "adam_beta1",
                                "adam_beta2", "adam_eps",   "seed",          "data_source",
                                "dataset_size", "eval_every", "eval_points", "grad_clip"};
  for (const auto& [key, value] : doc.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("train config: unknown key: " + key);
  }
  TrainConfig cfg;
  try {
    cfg.iterations = doc.value("iterations", cfg.iterations);
    cfg.batch_size = doc.value("batch_size", cfg.batch_size);
    cfg.learning_rate = doc.value("learning_rate", cfg.learning_rate);
    cfg.adam_beta1 = doc.value("adam_beta1", cfg.adam_beta1);
    cfg.adam_beta2 = doc.value("adam_beta2", cfg.adam_beta2);
    cfg.adam_eps = doc.value("adam_eps", cfg.adam_eps);
    cfg.seed = doc.value("seed", cfg.seed);
    if (doc.contains("data_source")) {
      const std::string mode = doc.at("data_source").get<std::string>();
      if (mode == "fresh_resample") {
        cfg.fresh_resample = true;
      } else if (mode == "fixed_dataset") {
        cfg.fresh_resample = false;
      } else {
        throw ConfigError("train config: unknown data_source: " + mode);
      }
    }
    cfg.dataset_size = doc.value("dataset_size", cfg.dataset_size);
    cfg.eval_every = doc.value("eval_every", cfg.eval_every);
    cfg.eval_points = doc.value("eval_points", cfg.eval_points);
    cfg.grad_clip = doc.value("grad_clip", cfg.grad_clip);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: mistyped field: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

void write_trajectory_csv(const TrajectoryLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << "iteration,loss,loglik,cima,cima_stderr,wallclock_s\n";
  char buf[512];
  for (const EvalRecord& r : log.records) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.iteration, r.loss,
                  r.loglik, r.cima, r.cima_stderr, r.wallclock_s);
    out << buf;
  }
}

void ObservationSource::draw(Rng& rng, Matrix& out) const {
  std::vector<double> s(static_cast<std::size_t>(fn.n));
  for (int k = 0; k < out.rows(); ++k) {
    prior.sample(rng, s);
    mixing::mix_forward<double>(fn, s, out.row(k));
  }
}

LossBreakdown batch_loss_parts(const flows::FlowModel& m, const Matrix& batch,
                               const RegularizerSpec& reg) {
  const std::vector<double> flat = m.flatten();
  const std::vector<std::uint8_t> slots = m.weight_slots();
  const LossParts<double> parts =
      batch_loss_core<double>(m.cfg, flat, slots, batch, reg);
  if (!std::isfinite(parts.loglik))
    throw NoConvergence("batch_loss: log-likelihood term is non-finite");
  if (!std::isfinite(parts.penalty))
    throw NoConvergence("batch_loss: " + to_string(reg.kind) + " penalty term is non-finite");
  return LossBreakdown{parts.value, parts.loglik, parts.penalty};
}

double batch_loss(const flows::FlowModel& m, const Matrix& batch, const RegularizerSpec& reg) {
  return batch_loss_parts(m, batch, reg).value;
}

std::string training_config_hash(const flows::FlowConfig& flow, const ObservationSource& source,
                                 const TrainConfig& cfg, const RegularizerSpec& reg) {
  json doc;
  doc["flow"] = json{{"n", flow.n},
                     {"block_count", flow.block_count},
                     {"hidden_width", flow.hidden_width},
                     {"kind", flows::to_string(flow.kind)},
                     {"base", flows::to_string(flow.base)},
                     {"seed", flow.seed},
                     {"lipschitz", flow.lipschitz},
                     {"alpha", flow.alpha},
                     {"power_iters", flow.power_iters}};
  doc["source"] = json{{"mixing_seed", source.fn.seed},
                       {"L", source.fn.L},
                       {"n", source.fn.n},
                       {"init", std::string(mixing::to_string(source.fn.init_kind))},
                       {"alpha", source.fn.alpha},
                       {"prior", std::string(mixing::to_string(source.prior.kind))}};
  doc["train"] = config_json(cfg);
  doc["regularizer"] = json{{"kind", to_string(reg.kind)}, {"strength", reg.strength}};
  return fnv1a_hex(doc.dump());
}

namespace {

struct EvalScratch {
  flows::detail::FlowScratch<double> flow;
  std::vector<double> lls, cimas;
};

EvalRecord evaluate(const flows::FlowConfig& fcfg, std::span<const double> theta,
                    std::span<const std::uint8_t> penalty_slots, const Matrix& eval_batch,
                    const RegularizerSpec& reg, int iteration, double wallclock_s,
                    EvalScratch& sc) {
  using contrast::cima_local;
  const int count = eval_batch.rows();
  sc.lls.resize(static_cast<std::size_t>(count));
  sc.cimas.resize(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const flows::FlowEval<double> ev =
        flows::flow_eval<double>(fcfg, theta, eval_batch.row(k), &sc.flow);
    sc.lls[static_cast<std::size_t>(k)] =
        flows::base_log_density(fcfg.base, std::span<const double>(ev.y)) + ev.log_det;
    sc.cimas[static_cast<std::size_t>(k)] = cima_local(matinv(ev.jac));
  }
  const MeanStderr ll = mean_stderr(sc.lls);
  const MeanStderr ci = mean_stderr(sc.cimas);
  double penalty = 0.0;
  if (reg.kind == RegKind::cima) {
    penalty = reg.strength * ci.mean;
  } else if (reg.kind == RegKind::l1) {
    double acc = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i)
      if (penalty_slots[i] != 0) acc += std::fabs(theta[i]);
    penalty = reg.strength * acc;
  } else if (reg.kind == RegKind::l2) {
    double acc = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i)
      if (penalty_slots[i] != 0) acc += theta[i] * theta[i];
    penalty = reg.strength * acc;
  }
  EvalRecord rec;
  rec.iteration = iteration;
  rec.loglik = ll.mean;
  rec.cima = ci.mean;
  rec.cima_stderr = ci.std_error;
  rec.loss = -(ll.mean - penalty);
  rec.wallclock_s = wallclock_s;
  return rec;
}

}  // namespace

TrainResult train(const flows::FlowModel& init, const ObservationSource& source,
                  const TrainConfig& cfg, const RegularizerSpec& reg) {
  validate(cfg);
  if (init.cfg.n != source.fn.n)
    throw ConfigError("train: model dimension does not match the data source");
  if (reg.kind == RegKind::none && reg.strength != 0.0)
    throw ConfigError("train: regularizer kind none cannot carry a strength");

  TrainResult result;
  result.model = init;
  result.model.training_config_hash = training_config_hash(init.cfg, source, cfg, reg);
  flows::FlowModel& model = result.model;

  const int n = model.cfg.n;
  std::vector<double> theta = model.flatten();
  const std::size_t P = theta.size();
  const std::vector<std::uint8_t> penalty_slots = model.weight_slots();
  const std::vector<std::uint8_t> frozen = model.masked_slots();

  Rng data_rng(mix_seed(cfg.seed, 0xba7c43ull));
  Matrix fixed(1, 1);
  if (!cfg.fresh_resample) {
    fixed = Matrix(cfg.dataset_size, n);
    source.draw(data_rng, fixed);
  }
  Matrix eval_batch(cfg.eval_points, n);
  {
    Rng eval_rng(mix_seed(cfg.seed, 0xe7a1ull));
    source.draw(eval_rng, eval_batch);
  }

  Matrix batch(cfg.batch_size, n);
  std::vector<double> g(P), m1(P, 0.0), m2(P, 0.0);
  std::vector<ad::Var> leaves(P);
  ad::Tape tape;
  EvalScratch eval_scratch;
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&t0]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  result.log.records.push_back(
      evaluate(model.cfg, theta, penalty_slots, eval_batch, reg, 0, elapsed(), eval_scratch));
  if (!std::isfinite(result.log.records.back().loglik) ||
      !std::isfinite(result.log.records.back().cima)) {
    result.aborted = true;
    result.abort_reason = "held-out evaluation diverged at the initial state";
    result.completed_iterations = 0;
    return result;
  }

  std::vector<double> last_valid = theta;
  const auto abort_run = [&](int iteration, const std::string& reason) {
    result.aborted = true;
    result.abort_reason = reason;
    result.completed_iterations = iteration - 1;
    model.set_from_flat(last_valid);
    model.apply_masks();
  };

  for (int it = 1; it <= cfg.iterations; ++it) {
    if (cfg.fresh_resample) {
      source.draw(data_rng, batch);
    } else {
      for (int k = 0; k < cfg.batch_size; ++k) {
        const auto row = static_cast<int>(data_rng.next_u64() %
                                          static_cast<std::uint64_t>(cfg.dataset_size));
        const std::span<const double> src = fixed.row(row);
        std::copy(src.begin(), src.end(), batch.row(k).begin());
      }
    }

    tape.clear();
    for (std::size_t i = 0; i < P; ++i) leaves[i] = tape.leaf(theta[i]);
    LossParts<ad::Var> parts;
    try {
      parts = batch_loss_core<ad::Var>(model.cfg, std::span<const ad::Var>(leaves), penalty_slots,
                                       batch, reg);
    } catch (const std::runtime_error& e) {
      abort_run(it, std::string("batch loss raised: ") + e.what());
      return result;
    }
    if (!std::isfinite(parts.loglik.value())) {
      abort_run(it, "log-likelihood term diverged");
      return result;
    }
    if (!std::isfinite(parts.penalty.value())) {
      abort_run(it, to_string(reg.kind) + " penalty term diverged");
      return result;
    }
    last_valid = theta;

    tape.backward(parts.value.index());
    double norm2 = 0.0;
    for (std::size_t i = 0; i < P; ++i) {
      g[i] = frozen[i] != 0 ? 0.0 : tape.adjoint(leaves[i]);
      norm2 += g[i] * g[i];
    }
    if (!std::isfinite(norm2)) {
      abort_run(it, "gradient diverged");
      return result;
    }
    if (norm2 > cfg.grad_clip * cfg.grad_clip) {
      const double scale = cfg.grad_clip / std::sqrt(norm2);
      for (double& gi : g) gi *= scale;
    }

    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, it);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, it);
    for (std::size_t i = 0; i < P; ++i) {
      m1[i] = cfg.adam_beta1 * m1[i] + (1.0 - cfg.adam_beta1) * g[i];
      m2[i] = cfg.adam_beta2 * m2[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
      // ascent step on the maximization objective
      theta[i] += cfg.learning_rate * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + cfg.adam_eps);
    }

    model.set_from_flat(theta);
    model.normalize_blocks();
    model.flatten_into(theta);
    result.completed_iterations = it;

    if (it % cfg.eval_every == 0 || it == cfg.iterations) {
      const EvalRecord rec = evaluate(model.cfg, theta, penalty_slots, eval_batch, reg, it,
                                      elapsed(), eval_scratch);
      if (!std::isfinite(rec.loglik) || !std::isfinite(rec.cima)) {
        abort_run(it + 1, "held-out evaluation diverged");
        return result;
      }
      result.log.records.push_back(rec);
    }
  }
  return result;
}

EqualAreaReport equal_area_check(const flows::FlowModel& a, const flows::FlowModel& b,
                                 const Matrix& points, double eps, double tolerance) {
  if (a.cfg.n != b.cfg.n || points.cols() != a.cfg.n)
    throw DomainError("equal_area_check: dimension mismatch");
  const std::vector<double> fa = a.flatten(), fb = b.flatten();
  flows::detail::FlowScratch<double> sa, sb;
  EqualAreaReport rep;
  rep.points = points.rows();
  for (int k = 0; k < points.rows(); ++k) {
    const flows::FlowEval<double> ea = flows::flow_eval<double>(a.cfg, fa, points.row(k), &sa);
    const flows::FlowEval<double> eb = flows::flow_eval<double>(b.cfg, fb, points.row(k), &sb);
    const double base_a = flows::base_log_density(a.cfg.base, std::span<const double>(ea.y));
    const double base_b = flows::base_log_density(b.cfg.base, std::span<const double>(eb.y));
    const double base_gap = std::fabs(base_a - base_b);
    const double det_gap = std::fabs(ea.log_det - eb.log_det);
    const double ll_gap = std::fabs((base_a + ea.log_det) - (base_b + eb.log_det));
    rep.max_base_gap = std::max(rep.max_base_gap, base_gap);
    rep.max_logdet_gap = std::max(rep.max_logdet_gap, det_gap);
    rep.max_loglik_gap = std::max(rep.max_loglik_gap, ll_gap);
    if (base_gap <= eps) {
      ++rep.base_matched;
      if (det_gap <= eps + tolerance) ++rep.implied_ok;
    }
  }
  rep.fraction_ok =
      rep.base_matched == 0 ? 1.0 : static_cast<double>(rep.implied_ok) / rep.base_matched;
  return rep;
}

}  // namespace ima::training
