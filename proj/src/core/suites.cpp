#include "suites.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "contrast.hpp"
#include "darmois2d.hpp"
#include "errors.hpp"
#include "hash.hpp"
#include "plotspec.hpp"
#include "reduce.hpp"
#include "rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ima::suites {
namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt4(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// JSON has no NaN literal; non-finite round-trips through null.
json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double num_from(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

void atomic_write(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("suite: cannot write " + tmp.string());
    out << text;
    if (!out) throw ConfigError("suite: short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string reg_label(const RegCell& r) {
  if (r.kind == training::RegKind::none) return "none";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s_%g", training::to_string(r.kind).c_str(), r.strength);
  return buf;
}

// Contrast-regularization strength of a cell; generic penalties do not have
// one, so they map to NaN and never join lambda comparisons.
double lambda_of(const RegCell& r) {
  if (r.kind == training::RegKind::none) return 0.0;
  if (r.kind == training::RegKind::cima) return r.strength;
  return std::numeric_limits<double>::quiet_NaN();
}

constexpr std::uint64_t kMixingSeedBase = 1000;

// Evaluation streams, keyed off the mixing seed so every cell fit against the
// same ground truth is scored on identical draws.
constexpr std::uint64_t kStreamTruePoints = 0xC1A0;
constexpr std::uint64_t kStreamMetricData = 0xDA7A;
constexpr std::uint64_t kStreamKld = 0x17D1;
constexpr std::uint64_t kStreamScatter = 0x5CA7;

json reg_cells_json(const std::vector<RegCell>& regs) {
  json arr = json::array();
  for (const auto& r : regs)
    arr.push_back({{"kind", training::to_string(r.kind)}, {"strength", r.strength}});
  return arr;
}

json config_doc(const SuiteConfig& cfg) {
  json j;
  j["suite"] = cfg.suite;
  j["n"] = cfg.n;
  j["L_grid"] = cfg.L_grid;
  j["init"] = mixing::to_string(cfg.init_kind);
  j["prior"] = mixing::to_string(cfg.prior);
  j["seeds"] = cfg.seeds;
  j["regularizers"] = reg_cells_json(cfg.regularizers);
  j["flow"] = {{"kind", flows::to_string(cfg.flow_kind)},
               {"base", flows::to_string(cfg.base_kind)},
               {"blocks", cfg.block_count},
               {"hidden_width", cfg.hidden_width}};
  j["train"] = json::parse(training::train_config_to_json(cfg.train));
  j["metric_samples"] = cfg.metric_samples;
  j["scatter_points"] = cfg.scatter_points;
  j["out_dir"] = cfg.out_dir;
  return j;
}

void validate_suite(const SuiteConfig& cfg) {
  bool known = false;
  for (const auto& name : suite_names()) known = known || name == cfg.suite;
  if (!known) throw ConfigError("suite config: unknown suite: " + cfg.suite);
  if (cfg.n < 2) throw ConfigError("suite config: n must be at least 2");
  if (cfg.L_grid.empty()) throw ConfigError("suite config: L_grid must not be empty");
  for (int L : cfg.L_grid)
    if (L < 1) throw ConfigError("suite config: every L must be at least 1");
  if (cfg.seeds.empty()) throw ConfigError("suite config: seeds must not be empty");
  if (cfg.regularizers.empty())
    throw ConfigError("suite config: regularizers must not be empty");
  if (cfg.block_count < 1 || cfg.hidden_width < 1)
    throw ConfigError("suite config: flow must have positive blocks and width");
  if (cfg.metric_samples < 100)
    throw ConfigError("suite config: metric_samples must be at least 100");
  if (cfg.scatter_points < 2)
    throw ConfigError("suite config: scatter_points must be at least 2");
}

// One grid point, fully specified before any work starts.
struct CellPlan {
  int L = 0;
  RegCell reg;
  std::uint64_t run_seed = 0;
  std::uint64_t mixing_seed = 0;
  flows::FlowConfig flow;
  training::ObservationSource source;
  training::TrainConfig train;
  training::RegularizerSpec rspec;
  std::string hash;
};

std::vector<CellPlan> build_plans(const SuiteConfig& cfg) {
  std::vector<CellPlan> plans;
  for (int L : cfg.L_grid) {
    for (const auto& reg : cfg.regularizers) {
      for (std::uint64_t seed : cfg.seeds) {
        CellPlan p;
        p.L = L;
        p.reg = reg;
        p.run_seed = seed;
        p.mixing_seed = kMixingSeedBase + seed;
        p.flow.n = cfg.n;
        p.flow.block_count = cfg.block_count;
        p.flow.hidden_width = cfg.hidden_width;
        p.flow.kind = cfg.flow_kind;
        p.flow.base = cfg.base_kind;
        p.flow.seed = seed;
        p.source.fn = mixing::sample_mixing(cfg.n, L, cfg.init_kind, p.mixing_seed);
        p.source.prior = mixing::SourcePrior{cfg.prior, cfg.n};
        p.train = cfg.train;
        p.train.seed = seed;
        p.rspec = training::RegularizerSpec::make(reg.kind, reg.strength);
        p.hash = training::training_config_hash(p.flow, p.source, p.train, p.rspec);
        plans.push_back(std::move(p));
      }
    }
  }
  return plans;
}

json cell_to_json(const CellResult& r) {
  json j;
  j["code_version"] = kCodeVersion;
  j["hash"] = r.hash;
  j["mixing_seed"] = r.mixing_seed;
  j["run_seed"] = r.run_seed;
  j["L"] = r.L;
  j["n"] = r.n;
  j["reg"] = {{"kind", training::to_string(r.reg.kind)}, {"strength", r.reg.strength}};
  j["aborted"] = r.aborted;
  j["abort_reason"] = r.abort_reason;
  j["cima_true"] = num_or_null(r.cima_true);
  j["cima_true_se"] = num_or_null(r.cima_true_se);
  json m;
  m["mcc"] = num_or_null(r.metrics.mcc);
  m["kld"] = num_or_null(r.metrics.kld.kld_nats);
  m["kld_se"] = num_or_null(r.metrics.kld.std_error);
  m["cima"] = num_or_null(r.metrics.cima.value);
  m["cima_se"] = num_or_null(r.metrics.cima.std_error);
  m["cima_count"] = r.metrics.cima.sample_count;
  m["assignment"] = r.metrics.assignment;
  json matched = json::array();
  for (double c : r.metrics.matched_correlations) matched.push_back(num_or_null(c));
  m["matched_correlations"] = matched;
  j["metrics"] = m;
  json traj = json::array();
  for (const auto& rec : r.trajectory.records)
    traj.push_back({rec.iteration, num_or_null(rec.loss), num_or_null(rec.loglik),
                    num_or_null(rec.cima), num_or_null(rec.cima_stderr), rec.wallclock_s});
  j["trajectory"] = traj;
  return j;
}

bool cell_from_json(const std::string& text, const CellPlan& plan, CellResult& out) {
  try {
    const json j = json::parse(text);
    if (j.at("code_version").get<std::string>() != kCodeVersion) return false;
    if (j.at("hash").get<std::string>() != plan.hash) return false;
    CellResult r;
    r.hash = plan.hash;
    r.mixing_seed = j.at("mixing_seed").get<std::uint64_t>();
    r.run_seed = j.at("run_seed").get<std::uint64_t>();
    r.L = j.at("L").get<int>();
    r.n = j.at("n").get<int>();
    r.reg.kind = training::reg_kind_from_string(j.at("reg").at("kind").get<std::string>());
    r.reg.strength = j.at("reg").at("strength").get<double>();
    r.aborted = j.at("aborted").get<bool>();
    r.abort_reason = j.at("abort_reason").get<std::string>();
    r.cima_true = num_from(j.at("cima_true"));
    r.cima_true_se = num_from(j.at("cima_true_se"));
    const json& m = j.at("metrics");
    r.metrics.mixing_seed = r.mixing_seed;
    r.metrics.L = r.L;
    r.metrics.n = r.n;
    r.metrics.reg_kind = training::to_string(r.reg.kind);
    r.metrics.strength = r.reg.strength;
    r.metrics.run_seed = r.run_seed;
    r.metrics.mcc = num_from(m.at("mcc"));
    r.metrics.kld.kld_nats = num_from(m.at("kld"));
    r.metrics.kld.std_error = num_from(m.at("kld_se"));
    r.metrics.cima.value = num_from(m.at("cima"));
    r.metrics.cima.std_error = num_from(m.at("cima_se"));
    r.metrics.cima.sample_count = m.at("cima_count").get<int>();
    r.metrics.assignment = m.at("assignment").get<std::vector<int>>();
    r.metrics.matched_correlations.clear();
    for (const auto& c : m.at("matched_correlations"))
      r.metrics.matched_correlations.push_back(num_from(c));
    for (const auto& row : j.at("trajectory")) {
      training::EvalRecord rec;
      rec.iteration = row.at(0).get<int>();
      rec.loss = num_from(row.at(1));
      rec.loglik = num_from(row.at(2));
      rec.cima = num_from(row.at(3));
      rec.cima_stderr = num_from(row.at(4));
      rec.wallclock_s = row.at(5).get<double>();
      r.trajectory.records.push_back(rec);
    }
    out = std::move(r);
    return true;
  } catch (const std::exception&) {
    return false;  // corrupt or stale cache entry, recompute
  }
}

contrast::ContrastEstimate true_contrast(const CellPlan& plan, int samples) {
  const int n = plan.source.fn.n;
  Matrix pts(samples, n);
  Rng rng(mix_seed(plan.mixing_seed, kStreamTruePoints));
  for (int i = 0; i < samples; ++i) plan.source.prior.sample(rng, pts.row(i));
  const auto jac_at = [&](std::span<const double> s) {
    return mixing::mix_jacobian(plan.source.fn, s);
  };
  return contrast::cima_global(jac_at, pts);
}

metrics::MetricsRecord model_metrics(const CellPlan& plan, const flows::FlowModel& model,
                                     int samples) {
  metrics::MetricsRecord rec;
  const int n = model.cfg.n;
  const auto data = mixing::sample_dataset(plan.source.fn, plan.source.prior, samples,
                                           mix_seed(plan.mixing_seed, kStreamMetricData));
  const std::vector<double> flat = model.flatten();
  flows::detail::FlowScratch<double> scratch;
  Matrix recovered(samples, n);
  std::vector<double> cimas(static_cast<std::size_t>(samples));
  for (int i = 0; i < samples; ++i) {
    const auto ev = flows::flow_eval<double>(model.cfg, flat, data.observations.row(i), &scratch);
    for (int jcol = 0; jcol < n; ++jcol) recovered(i, jcol) = ev.y[static_cast<std::size_t>(jcol)];
    cimas[static_cast<std::size_t>(i)] = contrast::cima_local(matinv(ev.jac));
  }
  const auto match = metrics::mcc(data.sources, recovered);
  rec.mcc = match.mcc;
  rec.assignment = match.assignment;
  rec.matched_correlations = match.matched_correlations;
  rec.kld = metrics::kld_estimate(plan.source.fn, plan.source.prior, model, samples,
                                  mix_seed(plan.mixing_seed, kStreamKld));
  const auto ms = mean_stderr(cimas);
  rec.cima = contrast::ContrastEstimate{ms.mean, ms.std_error, samples};
  return rec;
}

CellResult compute_cell(const SuiteConfig& cfg, const CellPlan& plan, const fs::path& cells_dir) {
  CellResult r;
  r.hash = plan.hash;
  r.mixing_seed = plan.mixing_seed;
  r.run_seed = plan.run_seed;
  r.L = plan.L;
  r.n = cfg.n;
  r.reg = plan.reg;
  r.metrics.mixing_seed = plan.mixing_seed;
  r.metrics.L = plan.L;
  r.metrics.n = cfg.n;
  r.metrics.reg_kind = training::to_string(plan.reg.kind);
  r.metrics.strength = plan.reg.strength;
  r.metrics.run_seed = plan.run_seed;
  r.metrics.mcc = std::numeric_limits<double>::quiet_NaN();
  r.metrics.kld = {std::numeric_limits<double>::quiet_NaN(),
                   std::numeric_limits<double>::quiet_NaN()};
  r.metrics.cima = {std::numeric_limits<double>::quiet_NaN(),
                    std::numeric_limits<double>::quiet_NaN(), 0};

  const flows::FlowModel init = flows::build_flow(plan.flow);
  auto trained = training::train(init, plan.source, plan.train, plan.rspec);
  r.aborted = trained.aborted;
  r.abort_reason = trained.abort_reason;
  r.trajectory = std::move(trained.log);

  const auto truth = true_contrast(plan, cfg.metric_samples);
  r.cima_true = truth.value;
  r.cima_true_se = truth.std_error;
  if (!r.aborted) {
    auto rec = model_metrics(plan, trained.model, cfg.metric_samples);
    rec.mixing_seed = plan.mixing_seed;
    rec.L = plan.L;
    rec.n = cfg.n;
    rec.reg_kind = training::to_string(plan.reg.kind);
    rec.strength = plan.reg.strength;
    rec.run_seed = plan.run_seed;
    r.metrics = std::move(rec);
  }

  atomic_write(cells_dir / (plan.hash + ".flow.json"), flows::flow_to_json(trained.model));
  atomic_write(cells_dir / (plan.hash + ".json"), cell_to_json(r).dump(2) + "\n");
  return r;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// ---- output assembly ----------------------------------------------------

struct SuitePaths {
  fs::path root;   // out_dir
  fs::path cells;  // out_dir/cells
  fs::path suite;  // out_dir/<suite>
};

void write_darmois_csv(const SuiteConfig& cfg, SuiteResult& res, const SuitePaths& paths) {
  std::string csv = "L,seed,cima_true,cima_darmois,kld_darmois,manifest\n";
  for (const auto& c : res.cells) {
    csv += std::to_string(c.L) + "," + std::to_string(c.run_seed) + "," + fmt(c.cima_true) +
           "," + fmt(c.metrics.cima.value) + "," + fmt(c.metrics.kld.kld_nats) + "," +
           res.manifest_hash + "\n";
  }
  atomic_write(paths.suite / "results.csv", csv);
  res.outputs.push_back(cfg.suite + "/results.csv");
}

void write_metrics_csv(const SuiteConfig& cfg, SuiteResult& res, const SuitePaths& paths) {
  std::string csv = metrics::metrics_csv_header() + ",manifest\n";
  for (const auto& c : res.cells)
    csv += metrics::metrics_csv_row(c.metrics) + "," + res.manifest_hash + "\n";
  atomic_write(paths.suite / "metrics.csv", csv);
  res.outputs.push_back(cfg.suite + "/metrics.csv");
}

void write_dynamics_outputs(const SuiteConfig& cfg, SuiteResult& res, const SuitePaths& paths) {
  std::string csv =
      "reg_kind,strength,seed,loglik_first,loglik_last,cima_first,cima_last,manifest\n";
  for (const auto& c : res.cells) {
    const std::string name =
        "trajectory_" + reg_label(c.reg) + "_seed" + std::to_string(c.run_seed) + ".csv";
    training::write_trajectory_csv(c.trajectory, (paths.suite / name).string());
    res.outputs.push_back(cfg.suite + "/" + name);
    if (c.trajectory.records.empty()) continue;
    const auto& first = c.trajectory.records.front();
    const auto& last = c.trajectory.records.back();
    csv += training::to_string(c.reg.kind) + "," + fmt(c.reg.strength) + "," +
           std::to_string(c.run_seed) + "," + fmt(first.loglik) + "," + fmt(last.loglik) +
           "," + fmt(first.cima) + "," + fmt(last.cima) + "," + res.manifest_hash + "\n";
  }
  atomic_write(paths.suite / "dynamics_summary.csv", csv);
  res.outputs.push_back(cfg.suite + "/dynamics_summary.csv");
}

// Hue encodes the angle of the (centered) source point and lightness its
// radius, so any rendering of the recovered columns can be judged against the
// source chart by color alone.
void scatter_colors(const Matrix& sources, std::vector<double>& hue,
                    std::vector<double>& light) {
  const int m = sources.rows();
  double c0 = 0.0, c1 = 0.0;
  for (int i = 0; i < m; ++i) {
    c0 += sources(i, 0);
    c1 += sources(i, 1);
  }
  c0 /= m;
  c1 /= m;
  hue.resize(static_cast<std::size_t>(m));
  light.resize(static_cast<std::size_t>(m));
  double rmax = 0.0;
  for (int i = 0; i < m; ++i) {
    const double dx = sources(i, 0) - c0, dy = sources(i, 1) - c1;
    hue[static_cast<std::size_t>(i)] = (std::atan2(dy, dx) + M_PI) / (2.0 * M_PI);
    light[static_cast<std::size_t>(i)] = std::hypot(dx, dy);
    rmax = std::max(rmax, light[static_cast<std::size_t>(i)]);
  }
  for (double& r : light) r = rmax > 0.0 ? 0.2 + 0.75 * (r / rmax) : 0.2;
}

void write_point_csv(const fs::path& path, const Matrix& pts, const std::vector<double>& hue,
                     const std::vector<double>& light) {
  std::string csv = "v1,v2,hue,lightness\n";
  for (int i = 0; i < pts.rows(); ++i)
    csv += fmt(pts(i, 0)) + "," + fmt(pts(i, 1)) + "," + fmt(hue[static_cast<std::size_t>(i)]) +
           "," + fmt(light[static_cast<std::size_t>(i)]) + "\n";
  atomic_write(path, csv);
}

void write_scatter_outputs(const SuiteConfig& cfg, const std::vector<CellPlan>& plans,
                           SuiteResult& res, const SuitePaths& paths,
                           const Progress& progress) {
  const std::uint64_t seed = cfg.seeds.front();
  const int L = cfg.L_grid.front();
  const std::uint64_t mseed = kMixingSeedBase + seed;
  const auto m = mixing::sample_mixing(cfg.n, L, cfg.init_kind, mseed);
  const mixing::SourcePrior prior{cfg.prior, cfg.n};

  const int count = cfg.scatter_points;
  Matrix S(count, 2), X(count, 2);
  Rng rng(mix_seed(mseed, kStreamScatter));
  std::vector<double> x(2);
  for (int i = 0; i < count; ++i) {
    prior.sample(rng, S.row(i));
    mixing::mix_forward<double>(m, S.row(i), x);
    X(i, 0) = x[0];
    X(i, 1) = x[1];
  }
  std::vector<double> hue, light;
  scatter_colors(S, hue, light);

  write_point_csv(paths.suite / "scatter_sources.csv", S, hue, light);
  res.outputs.push_back(cfg.suite + "/scatter_sources.csv");
  write_point_csv(paths.suite / "scatter_observations.csv", X, hue, light);
  res.outputs.push_back(cfg.suite + "/scatter_observations.csv");

  {
    const mixing::Darmois2d darmois(m, prior);
    Matrix U(count, 2);
    for (int i = 0; i < count; ++i) {
      const auto u = darmois.transform(X.row(i));
      U(i, 0) = u[0];
      U(i, 1) = u[1];
    }
    write_point_csv(paths.suite / "scatter_darmois.csv", U, hue, light);
    res.outputs.push_back(cfg.suite + "/scatter_darmois.csv");
  }

  for (const auto& plan : plans) {
    if (plan.L != L || plan.run_seed != seed) continue;
    const CellResult* cell = nullptr;
    for (const auto& c : res.cells)
      if (c.hash == plan.hash) cell = &c;
    const fs::path ckpt = paths.cells / (plan.hash + ".flow.json");
    if (cell == nullptr || cell->aborted || !fs::exists(ckpt)) {
      if (progress)
        progress("scatter: skipping " + reg_label(plan.reg) + " (no usable model)");
      continue;
    }
    const auto model = flows::load_flow(ckpt.string());
    Matrix Y(count, 2);
    flows::detail::FlowScratch<double> scratch;
    const std::vector<double> flat = model.flatten();
    for (int i = 0; i < count; ++i) {
      const auto ev = flows::flow_eval<double>(model.cfg, flat, X.row(i), &scratch);
      Y(i, 0) = ev.y[0];
      Y(i, 1) = ev.y[1];
    }
    const std::string name = "scatter_recovered_" + reg_label(plan.reg) + ".csv";
    write_point_csv(paths.suite / name, Y, hue, light);
    res.outputs.push_back(cfg.suite + "/" + name);
  }
}

std::string plot_kind_for(const std::string& suite) {
  if (suite == "fig1") return "fig1";
  if (suite == "figA_uniform") return "figA_uniform";
  if (suite == "reg_comparison") return "reg_comparison";
  if (suite == "dynamics" || suite == "dynamics2d") return "dynamics";
  return "recovery";
}

std::string plot_source_for(const std::string& suite) {
  if (suite == "fig1" || suite == "figA_uniform") return "results.csv";
  if (suite == "dynamics" || suite == "dynamics2d") return "dynamics_summary.csv";
  return "metrics.csv";
}

// ---- per-suite assertions ----------------------------------------------

using Cells = std::vector<const CellResult*>;

Cells completed(const SuiteResult& res) {
  Cells out;
  for (const auto& c : res.cells)
    if (!c.aborted) out.push_back(&c);
  return out;
}

std::vector<double> pluck(const Cells& cells, double (*field)(const CellResult&)) {
  std::vector<double> out;
  for (const auto* c : cells) out.push_back(field(*c));
  return out;
}

Cells where_L(const Cells& cells, int L) {
  Cells out;
  for (const auto* c : cells)
    if (c->L == L) out.push_back(c);
  return out;
}

Cells where_lambda(const Cells& cells, double lam) {
  Cells out;
  for (const auto* c : cells)
    if (lambda_of(c->reg) == lam) out.push_back(c);
  return out;
}

double f_cima_true(const CellResult& c) { return c.cima_true; }
double f_cima_model(const CellResult& c) { return c.metrics.cima.value; }
double f_kld(const CellResult& c) { return c.metrics.kld.kld_nats; }
double f_mcc(const CellResult& c) { return c.metrics.mcc; }

CheckLine completion_line(const SuiteConfig& cfg, const SuiteResult& res) {
  int aborted = 0;
  for (const auto& c : res.cells) aborted += c.aborted ? 1 : 0;
  CheckLine line;
  line.name = cfg.suite + ": all cells completed";
  line.pass = aborted == 0;
  line.detail = std::to_string(aborted) + " aborted of " + std::to_string(res.cells.size());
  return line;
}

std::vector<double> sorted_lambdas(const SuiteConfig& cfg) {
  std::vector<double> lams;
  for (const auto& r : cfg.regularizers) {
    const double lam = lambda_of(r);
    if (std::isnan(lam)) continue;
    if (std::find(lams.begin(), lams.end(), lam) == lams.end()) lams.push_back(lam);
  }
  std::sort(lams.begin(), lams.end());
  return lams;
}

std::vector<CheckLine> check_darmois_suite(const SuiteConfig& cfg, const SuiteResult& res,
                                           bool uniform_variant) {
  std::vector<CheckLine> lines;
  lines.push_back(completion_line(cfg, res));
  const Cells done = completed(res);

  std::vector<double> med_true, med_model, med_kld;
  std::string meds;
  for (int L : cfg.L_grid) {
    const Cells at = where_L(done, L);
    med_true.push_back(median(pluck(at, f_cima_true)));
    med_model.push_back(median(pluck(at, f_cima_model)));
    med_kld.push_back(median(pluck(at, f_kld)));
    meds += " L" + std::to_string(L) + ":true=" + fmt4(med_true.back()) +
            ",learned=" + fmt4(med_model.back());
  }

  if (!uniform_variant) {
    CheckLine inc;
    inc.name = cfg.suite + ": true contrast median nondecreasing in depth";
    inc.pass = true;
    for (std::size_t i = 1; i < med_true.size(); ++i)
      inc.pass = inc.pass && med_true[i] >= med_true[i - 1] - 1e-12;
    inc.detail = meds;
    lines.push_back(inc);

    CheckLine gap;
    gap.name = cfg.suite + ": learned contrast exceeds true contrast at shallow depth";
    gap.pass = true;
    std::string det;
    for (std::size_t i = 0; i < cfg.L_grid.size(); ++i) {
      const int L = cfg.L_grid[i];
      if (L != 2 && L != 4 && L != 8) continue;
      gap.pass = gap.pass && med_model[i] > med_true[i];
      det += " L" + std::to_string(L) + ":" + fmt4(med_model[i]) + ">" + fmt4(med_true[i]);
    }
    gap.detail = det.empty() ? "no depths in {2,4,8}" : det;
    if (det.empty()) gap.pass = false;
    lines.push_back(gap);

    CheckLine kld;
    kld.name = cfg.suite + ": fit error median nondecreasing over shallow depths";
    kld.pass = true;
    double prev = -std::numeric_limits<double>::infinity();
    std::string det2;
    int used = 0;
    for (std::size_t i = 0; i < cfg.L_grid.size(); ++i) {
      const int L = cfg.L_grid[i];
      if (L != 2 && L != 4 && L != 8) continue;
      kld.pass = kld.pass && med_kld[i] >= prev - 1e-12;
      prev = med_kld[i];
      det2 += " L" + std::to_string(L) + ":" + fmt4(med_kld[i]);
      ++used;
    }
    kld.detail = det2;
    if (used == 0) kld.pass = false;
    lines.push_back(kld);
  } else {
    CheckLine below;
    below.name = cfg.suite + ": learned contrast stays below true contrast at every depth";
    below.pass = true;
    for (std::size_t i = 0; i < med_true.size(); ++i)
      below.pass = below.pass && med_model[i] < med_true[i];
    below.detail = meds;
    lines.push_back(below);
  }
  return lines;
}

std::vector<CheckLine> check_recovery_suite(const SuiteConfig& cfg, const SuiteResult& res) {
  std::vector<CheckLine> lines;
  lines.push_back(completion_line(cfg, res));
  const Cells done = completed(res);
  const std::vector<double> lams = sorted_lambdas(cfg);

  // Depth used for the strength comparisons: 4 when present, else the deepest.
  int L_star = cfg.L_grid.back();
  for (int L : cfg.L_grid)
    if (L == 4) L_star = 4;
  const Cells at_star = where_L(done, L_star);

  {
    CheckLine dec;
    dec.name = cfg.suite + ": final contrast strictly decreasing in penalty strength";
    dec.pass = lams.size() >= 2;
    std::string det;
    double prev = std::numeric_limits<double>::infinity();
    for (double lam : lams) {
      const double med = median(pluck(where_lambda(at_star, lam), f_cima_model));
      dec.pass = dec.pass && med < prev;
      prev = med;
      det += " lam" + fmt4(lam) + ":" + fmt4(med);
    }
    dec.detail = "L=" + std::to_string(L_star) + det;
    lines.push_back(dec);
  }

  if (lams.size() >= 2) {
    const double lam_hi = lams.back();
    CheckLine gain;
    gain.name = cfg.suite + ": recovery gain from the contrast penalty";
    const double m0 = median(pluck(where_lambda(at_star, 0.0), f_mcc));
    const double m1 = median(pluck(where_lambda(at_star, lam_hi), f_mcc));
    gain.pass = m1 - m0 >= 0.05;
    gain.detail = "L=" + std::to_string(L_star) + " mcc(lam=" + fmt4(lam_hi) + ")=" + fmt4(m1) +
                  " mcc(lam=0)=" + fmt4(m0);
    lines.push_back(gain);

    if (cfg.L_grid.size() >= 2) {
      CheckLine depth;
      depth.name = cfg.suite + ": recovery nonincreasing in depth at fixed strength";
      depth.pass = true;
      std::string det;
      for (double lam : lams) {
        double prev = std::numeric_limits<double>::infinity();
        det += " lam" + fmt4(lam) + ":";
        for (int L : cfg.L_grid) {
          const double med = median(pluck(where_lambda(where_L(done, L), lam), f_mcc));
          depth.pass = depth.pass && med <= prev + 1e-12;
          prev = med;
          det += fmt4(med) + " ";
        }
      }
      depth.detail = det;
      lines.push_back(depth);
    }

    CheckLine dom;
    dom.name = cfg.suite + ": penalized recovery at least matches unpenalized at every depth";
    dom.pass = true;
    std::string det;
    for (int L : cfg.L_grid) {
      const Cells at = where_L(done, L);
      const double m0L = median(pluck(where_lambda(at, 0.0), f_mcc));
      const double m1L = median(pluck(where_lambda(at, lam_hi), f_mcc));
      dom.pass = dom.pass && m1L >= m0L;
      det += " L" + std::to_string(L) + ":" + fmt4(m1L) + ">=" + fmt4(m0L);
    }
    dom.detail = det;
    lines.push_back(dom);
  }
  return lines;
}

std::vector<CheckLine> check_dynamics_suite(const SuiteConfig& cfg, const SuiteResult& res) {
  std::vector<CheckLine> lines;
  lines.push_back(completion_line(cfg, res));
  const Cells done = completed(res);
  const std::vector<double> lams = sorted_lambdas(cfg);
  const double lam_hi = lams.empty() ? 0.0 : lams.back();

  const auto increase = [](const CellResult& c) {
    const auto& rec = c.trajectory.records;
    if (rec.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    return rec.back().cima - rec.front().cima;
  };
  const auto ll_gain = [](const CellResult& c) {
    const auto& rec = c.trajectory.records;
    if (rec.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    return rec.back().loglik - rec.front().loglik;
  };

  {
    CheckLine up;
    up.name = cfg.suite + ": unpenalized training raises the contrast in most seeds";
    const Cells base = where_lambda(done, 0.0);
    int rising = 0;
    std::string det;
    for (const auto* c : base) {
      const double d = increase(*c);
      rising += d > 0.0 ? 1 : 0;
      det += " seed" + std::to_string(c->run_seed) + ":" + fmt4(d);
    }
    up.pass = !base.empty() && 5 * rising >= 4 * static_cast<int>(base.size());
    up.detail = det;
    lines.push_back(up);
  }

  {
    CheckLine damp;
    damp.name = cfg.suite + ": the penalty damps contrast growth on every matched seed";
    damp.pass = lam_hi > 0.0;
    std::string det;
    int matched = 0;
    for (const auto* a : where_lambda(done, 0.0)) {
      for (const auto* b : where_lambda(done, lam_hi)) {
        if (b->run_seed != a->run_seed) continue;
        ++matched;
        const double d0 = increase(*a), d1 = increase(*b);
        damp.pass = damp.pass && d1 < d0;
        det += " seed" + std::to_string(a->run_seed) + ":" + fmt4(d1) + "<" + fmt4(d0);
      }
    }
    if (matched == 0) damp.pass = false;
    damp.detail = det.empty() ? "no matched seeds" : det;
    lines.push_back(damp);
  }

  {
    CheckLine ll;
    ll.name = cfg.suite + ": held-out likelihood improves for every run";
    ll.pass = !done.empty();
    double worst = std::numeric_limits<double>::infinity();
    for (const auto* c : done) {
      const double d = ll_gain(*c);
      ll.pass = ll.pass && d > 0.0;
      worst = std::min(worst, d);
    }
    ll.detail = "smallest gain " + fmt4(worst);
    lines.push_back(ll);
  }
  return lines;
}

std::vector<CheckLine> check_reg_comparison(const SuiteConfig& cfg, const SuiteResult& res) {
  std::vector<CheckLine> lines;
  lines.push_back(completion_line(cfg, res));
  const Cells done = completed(res);

  const auto cell_median = [&](training::RegKind kind, double strength, double (*f)(const CellResult&)) {
    Cells at;
    for (const auto* c : done)
      if (c->reg.kind == kind && c->reg.strength == strength) at.push_back(c);
    return median(pluck(at, f));
  };

  const double base_cima = cell_median(training::RegKind::none, 0.0, f_cima_model);
  const double base_mcc = cell_median(training::RegKind::none, 0.0, f_mcc);

  for (const training::RegKind kind : {training::RegKind::l1, training::RegKind::l2}) {
    std::vector<double> strengths;
    for (const auto& r : cfg.regularizers)
      if (r.kind == kind) strengths.push_back(r.strength);
    if (strengths.empty()) continue;
    std::sort(strengths.begin(), strengths.end());
    const std::string kname = training::to_string(kind);

    CheckLine flat;
    flat.name = cfg.suite + ": " + kname + " leaves the final contrast nearly unchanged";
    std::vector<double> meds = {base_cima};
    std::string det = " 0:" + fmt4(base_cima);
    for (double s : strengths) {
      meds.push_back(cell_median(kind, s, f_cima_model));
      det += " " + fmt4(s) + ":" + fmt4(meds.back());
    }
    const double lo = *std::min_element(meds.begin(), meds.end());
    const double hi = *std::max_element(meds.begin(), meds.end());
    flat.pass = hi > 0.0 && (hi - lo) / hi < 0.25;
    flat.detail = det;
    lines.push_back(flat);

    CheckLine nogain;
    nogain.name = cfg.suite + ": " + kname + " does not buy recovery";
    nogain.pass = true;
    std::string det2 = " base:" + fmt4(base_mcc);
    for (double s : strengths) {
      const double m = cell_median(kind, s, f_mcc);
      nogain.pass = nogain.pass && m - base_mcc < 0.02;
      det2 += " " + fmt4(s) + ":" + fmt4(m);
    }
    nogain.detail = det2;
    lines.push_back(nogain);
  }

  {
    CheckLine beats;
    beats.name = cfg.suite + ": the contrast penalty outperforms generic penalties on recovery";
    double lam_hi = 0.0;
    for (const auto& r : cfg.regularizers)
      if (r.kind == training::RegKind::cima) lam_hi = std::max(lam_hi, r.strength);
    const double champ = cell_median(training::RegKind::cima, lam_hi, f_mcc);
    beats.pass = lam_hi > 0.0;
    std::string det = " cima@" + fmt4(lam_hi) + ":" + fmt4(champ);
    for (const auto& r : cfg.regularizers) {
      if (r.kind != training::RegKind::l1 && r.kind != training::RegKind::l2) continue;
      const double m = cell_median(r.kind, r.strength, f_mcc);
      beats.pass = beats.pass && champ > m;
      det += " " + reg_label(r) + ":" + fmt4(m);
    }
    beats.detail = det;
    lines.push_back(beats);
  }
  return lines;
}

}  // namespace

std::vector<std::string> suite_names() {
  return {"fig1",       "figA_uniform", "recovery",      "recovery2d",
          "dynamics",   "dynamics2d",   "reg_comparison"};
}

SuiteConfig default_suite_config(const std::string& name) {
  SuiteConfig cfg;
  cfg.suite = name;
  cfg.train.batch_size = 64;
  if (name == "fig1") {
    cfg.n = 5;
    cfg.L_grid = {2, 4, 8, 12, 16, 20};
    cfg.flow_kind = flows::FlowKind::triangular;
    cfg.base_kind = flows::BaseKind::gaussian;
  } else if (name == "figA_uniform") {
    cfg.n = 5;
    cfg.L_grid = {2, 3, 4, 5};
    cfg.init_kind = mixing::InitKind::uniform;
    cfg.flow_kind = flows::FlowKind::triangular;
    cfg.base_kind = flows::BaseKind::gaussian;
  } else if (name == "recovery") {
    cfg.n = 5;
    cfg.L_grid = {2, 4, 8};
    cfg.regularizers = {RegCell{training::RegKind::none, 0.0},
                        RegCell{training::RegKind::cima, 0.5},
                        RegCell{training::RegKind::cima, 1.0}};
  } else if (name == "recovery2d") {
    cfg.n = 2;
    cfg.L_grid = {4};
    cfg.prior = mixing::PriorKind::uniform01;
    cfg.regularizers = {RegCell{training::RegKind::none, 0.0},
                        RegCell{training::RegKind::cima, 0.5},
                        RegCell{training::RegKind::cima, 1.0}};
  } else if (name == "dynamics") {
    cfg.n = 5;
    cfg.L_grid = {4};
    cfg.regularizers = {RegCell{training::RegKind::none, 0.0},
                        RegCell{training::RegKind::cima, 0.5},
                        RegCell{training::RegKind::cima, 1.0}};
  } else if (name == "dynamics2d") {
    cfg.n = 2;
    cfg.L_grid = {4};
    cfg.regularizers = {RegCell{training::RegKind::none, 0.0},
                        RegCell{training::RegKind::cima, 0.5},
                        RegCell{training::RegKind::cima, 1.0}};
  } else if (name == "reg_comparison") {
    cfg.n = 5;
    cfg.L_grid = {4};
    cfg.regularizers = {RegCell{training::RegKind::none, 0.0},
                        RegCell{training::RegKind::cima, 0.5},
                        RegCell{training::RegKind::cima, 1.0},
                        RegCell{training::RegKind::l1, 1e-4},
                        RegCell{training::RegKind::l1, 5e-4},
                        RegCell{training::RegKind::l1, 1e-3},
                        RegCell{training::RegKind::l2, 1e-4},
                        RegCell{training::RegKind::l2, 5e-4},
                        RegCell{training::RegKind::l2, 1e-3}};
  } else {
    std::string known;
    for (const auto& s : suite_names()) {
      if (!known.empty()) known += ", ";
      known += s;
    }
    throw ConfigError("suite config: unknown suite: " + name + " (known: " + known + ")");
  }
  return cfg;
}

std::string suite_config_to_json(const SuiteConfig& cfg) { return config_doc(cfg).dump(2) + "\n"; }

SuiteConfig suite_config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("suite config: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("suite config: expected a JSON object");
  static const char* known[] = {"suite",          "n",     "L_grid",         "init",
                                "prior",          "seeds", "regularizers",   "flow",
                                "train",          "metric_samples", "scatter_points", "out_dir"};
  for (const auto& [key, value] : doc.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("suite config: unknown key: " + key);
  }
  if (!doc.contains("suite")) throw ConfigError("suite config: missing key: suite");

  SuiteConfig cfg;
  try {
    cfg = default_suite_config(doc.at("suite").get<std::string>());
    cfg.n = doc.value("n", cfg.n);
    if (doc.contains("L_grid")) cfg.L_grid = doc.at("L_grid").get<std::vector<int>>();
    if (doc.contains("init"))
      cfg.init_kind = mixing::init_kind_from_string(doc.at("init").get<std::string>());
    if (doc.contains("prior"))
      cfg.prior = mixing::prior_kind_from_string(doc.at("prior").get<std::string>());
    if (doc.contains("seeds")) cfg.seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
    if (doc.contains("regularizers")) {
      cfg.regularizers.clear();
      for (const auto& item : doc.at("regularizers")) {
        for (const auto& [key, value] : item.items())
          if (key != "kind" && key != "strength")
            throw ConfigError("suite config: unknown key in regularizer: " + key);
        RegCell cell;
        cell.kind = training::reg_kind_from_string(item.at("kind").get<std::string>());
        cell.strength = item.value("strength", 0.0);
        const auto spec = training::RegularizerSpec::make(cell.kind, cell.strength);
        cell.kind = spec.kind;
        cell.strength = spec.strength;
        cfg.regularizers.push_back(cell);
      }
    }
    if (doc.contains("flow")) {
      const json& f = doc.at("flow");
      for (const auto& [key, value] : f.items())
        if (key != "kind" && key != "base" && key != "blocks" && key != "hidden_width")
          throw ConfigError("suite config: unknown key in flow: " + key);
      if (f.contains("kind"))
        cfg.flow_kind = flows::flow_kind_from_string(f.at("kind").get<std::string>());
      if (f.contains("base"))
        cfg.base_kind = flows::base_kind_from_string(f.at("base").get<std::string>());
      cfg.block_count = f.value("blocks", cfg.block_count);
      cfg.hidden_width = f.value("hidden_width", cfg.hidden_width);
    }
    if (doc.contains("train")) {
      // Overlay onto the preset's trainer settings, not the bare defaults.
      json merged = json::parse(training::train_config_to_json(cfg.train));
      for (const auto& [key, value] : doc.at("train").items()) merged[key] = value;
      cfg.train = training::train_config_from_json(merged.dump());
    }
    cfg.metric_samples = doc.value("metric_samples", cfg.metric_samples);
    cfg.scatter_points = doc.value("scatter_points", cfg.scatter_points);
    cfg.out_dir = doc.value("out_dir", cfg.out_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("suite config: mistyped field: ") + e.what());
  }
  validate_suite(cfg);
  return cfg;
}

std::string manifest_hash_for(const SuiteConfig& cfg) {
  json doc = config_doc(cfg);
  doc.erase("out_dir");  // moving the output tree does not change the grid
  return fnv1a_hex(doc.dump() + "\n" + kCodeVersion);
}

SuiteResult run_suite(const SuiteConfig& cfg, int threads, const Progress& progress) {
  validate_suite(cfg);
  SuiteResult res;
  res.suite = cfg.suite;
  res.manifest_hash = manifest_hash_for(cfg);

  SuitePaths paths;
  paths.root = cfg.out_dir;
  paths.cells = paths.root / "cells";
  paths.suite = paths.root / cfg.suite;
  fs::create_directories(paths.cells);
  fs::create_directories(paths.suite);

  const std::vector<CellPlan> plans = build_plans(cfg);
  res.cells.resize(plans.size());

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::atomic<int> cache_hits{0};
  std::exception_ptr failure;
  const auto note = [&](const std::string& msg) {
    if (!progress) return;
    std::lock_guard<std::mutex> lock(mu);
    progress(msg);
  };

  const auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= plans.size()) return;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (failure) return;
      }
      const CellPlan& plan = plans[i];
      const std::string tag = "cell " + std::to_string(i + 1) + "/" +
                              std::to_string(plans.size()) + " L=" + std::to_string(plan.L) +
                              " reg=" + reg_label(plan.reg) +
                              " seed=" + std::to_string(plan.run_seed);
      try {
        const fs::path cache = paths.cells / (plan.hash + ".json");
        if (fs::exists(cache)) {
          std::ifstream in(cache, std::ios::binary);
          std::ostringstream buf;
          buf << in.rdbuf();
          CellResult cached;
          if (cell_from_json(buf.str(), plan, cached)) {
            cached.from_cache = true;
            res.cells[i] = std::move(cached);
            cache_hits.fetch_add(1);
            note(tag + " cached");
            continue;
          }
        }
        note(tag + " training");
        const auto t0 = std::chrono::steady_clock::now();
        res.cells[i] = compute_cell(cfg, plan, paths.cells);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.1fs", secs);
        note(tag + (res.cells[i].aborted ? " aborted after " : " done in ") + buf);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };

  const int nthreads = std::max(1, std::min<int>(threads, static_cast<int>(plans.size())));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  res.cache_hits = cache_hits.load();

  if (cfg.suite == "fig1" || cfg.suite == "figA_uniform") {
    write_darmois_csv(cfg, res, paths);
  } else if (cfg.suite == "dynamics" || cfg.suite == "dynamics2d") {
    write_dynamics_outputs(cfg, res, paths);
  } else {
    write_metrics_csv(cfg, res, paths);
  }
  if (cfg.n == 2 && (cfg.suite == "recovery" || cfg.suite == "recovery2d"))
    write_scatter_outputs(cfg, plans, res, paths, progress);

  const std::string plot_name = cfg.suite + ".plot";
  plotspec::write_plot_spec((paths.suite / plot_source_for(cfg.suite)).string(),
                            plot_kind_for(cfg.suite), (paths.suite / plot_name).string());
  res.outputs.push_back(cfg.suite + "/" + plot_name);

  json manifest;
  manifest["suite"] = cfg.suite;
  manifest["manifest_hash"] = res.manifest_hash;
  manifest["code_version"] = kCodeVersion;
  manifest["config"] = config_doc(cfg);
  std::vector<std::string> outputs = res.outputs;
  std::sort(outputs.begin(), outputs.end());
  manifest["outputs"] = outputs;
  atomic_write(paths.suite / "manifest.json", manifest.dump(2) + "\n");
  res.outputs.push_back(cfg.suite + "/manifest.json");
  return res;
}

std::vector<CheckLine> check_suite(const SuiteConfig& cfg, const SuiteResult& result) {
  if (cfg.suite == "fig1") return check_darmois_suite(cfg, result, false);
  if (cfg.suite == "figA_uniform") return check_darmois_suite(cfg, result, true);
  if (cfg.suite == "recovery" || cfg.suite == "recovery2d")
    return check_recovery_suite(cfg, result);
  if (cfg.suite == "dynamics" || cfg.suite == "dynamics2d")
    return check_dynamics_suite(cfg, result);
  if (cfg.suite == "reg_comparison") return check_reg_comparison(cfg, result);
  throw ConfigError("check_suite: unknown suite: " + cfg.suite);
}

}  // namespace ima::suites
