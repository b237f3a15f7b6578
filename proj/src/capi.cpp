#include "ima/ima.h"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <new>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core/acceptance.hpp"
#include "core/contrast.hpp"
#include "core/darmois2d.hpp"
#include "core/errors.hpp"
#include "core/flows.hpp"
#include "core/matrix.hpp"
#include "core/metrics.hpp"
#include "core/mixing.hpp"
#include "core/reduce.hpp"
#include "core/rng.hpp"
#include "core/suites.hpp"
#include "core/training.hpp"

using nlohmann::json;

struct ima_mixing {
  ima::mixing::MixingFunction fn;
};

struct ima_flow {
  ima::flows::FlowModel model;
};

namespace {

thread_local std::string g_last_error;

ima_status fail(ima_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

// Runs fn under the exception-to-status mapping. fn may return void (success
// means IMA_OK) or an ima_status of its own.
template <typename Fn>
ima_status guarded(Fn&& fn) {
  try {
    if constexpr (std::is_void_v<std::invoke_result_t<Fn&>>) {
      fn();
      return IMA_OK;
    } else {
      return fn();
    }
  } catch (const ima::ConfigError& e) {
    return fail(IMA_ERR_CONFIG, e.what());
  } catch (const ima::DomainError& e) {
    return fail(IMA_ERR_DOMAIN, e.what());
  } catch (const ima::SingularJacobian& e) {
    return fail(IMA_ERR_SINGULAR, e.what());
  } catch (const ima::NoConvergence& e) {
    return fail(IMA_ERR_NO_CONVERGENCE, e.what());
  } catch (const std::exception& e) {
    return fail(IMA_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(IMA_ERR_INTERNAL, "unknown exception");
  }
}

void require(const void* p, const char* name) {
  if (p == nullptr) throw ima::DomainError(std::string(name) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

ima::mixing::SourcePrior prior_of(const char* name, int n) {
  require(name, "prior");
  return {ima::mixing::prior_kind_from_string(name), n};
}

json parse_object(const char* text, const char* what) {
  if (text == nullptr || *text == '\0') return json::object();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ima::ConfigError(std::string(what) + ": " + e.what());
  }
  if (!j.is_object()) throw ima::ConfigError(std::string(what) + ": expected a JSON object");
  return j;
}

// Adapts the C callback to the std::function progress type the core takes.
std::function<void(const std::string&)> wrap_progress(ima_progress_fn progress, void* user) {
  if (progress == nullptr) return {};
  return [progress, user](const std::string& msg) { progress(msg.c_str(), user); };
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

extern "C" {

const char* ima_last_error(void) { return g_last_error.c_str(); }

void ima_string_free(char* s) { std::free(s); }

const char* ima_code_version(void) { return ima::suites::kCodeVersion; }

/* ---- mixing ----------------------------------------------------------- */

ima_status ima_mixing_generate(int n, int L, const char* init_kind, uint64_t seed,
                               ima_mixing** out) {
  return guarded([&] {
    require(out, "out");
    require(init_kind, "init_kind");
    auto fn = ima::mixing::sample_mixing(n, L, ima::mixing::init_kind_from_string(init_kind), seed);
    *out = new ima_mixing{std::move(fn)};
  });
}

ima_status ima_mixing_load(const char* path, ima_mixing** out) {
  return guarded([&] {
    require(out, "out");
    require(path, "path");
    *out = new ima_mixing{ima::mixing::load_mixing(path)};
  });
}

ima_status ima_mixing_save(const ima_mixing* m, const char* path) {
  return guarded([&] {
    require(m, "mixing");
    require(path, "path");
    ima::mixing::save_mixing(m->fn, path);
  });
}

void ima_mixing_free(ima_mixing* m) { delete m; }

int ima_mixing_dim(const ima_mixing* m) { return m ? m->fn.n : 0; }

int ima_mixing_depth(const ima_mixing* m) { return m ? m->fn.L : 0; }

ima_status ima_mixing_forward(const ima_mixing* m, const double* s, double* x_out) {
  return guarded([&] {
    require(m, "mixing");
    require(s, "s");
    require(x_out, "x_out");
    const int n = m->fn.n;
    ima::mixing::mix_forward<double>(m->fn, {s, static_cast<std::size_t>(n)},
                                     {x_out, static_cast<std::size_t>(n)});
  });
}

ima_status ima_mixing_inverse(const ima_mixing* m, const double* x, double* s_out) {
  return guarded([&] {
    require(m, "mixing");
    require(x, "x");
    require(s_out, "s_out");
    const int n = m->fn.n;
    const auto s = ima::mixing::mix_inverse(m->fn, {x, static_cast<std::size_t>(n)});
    std::copy(s.begin(), s.end(), s_out);
  });
}

ima_status ima_mixing_contrast(const ima_mixing* m, const char* prior, int count, uint64_t seed,
                               double* value_out, double* std_error_out) {
  return guarded([&] {
    require(m, "mixing");
    require(value_out, "value_out");
    if (count < 2) throw ima::DomainError("contrast sample count must be >= 2");
    const auto p = prior_of(prior, m->fn.n);
    ima::Matrix pts(count, m->fn.n);
    ima::Rng rng(seed);
    for (int i = 0; i < count; ++i) p.sample(rng, pts.row(i));
    const auto est = ima::contrast::cima_global(
        [&](std::span<const double> s) { return ima::mixing::mix_jacobian(m->fn, s); }, pts);
    *value_out = est.value;
    if (std_error_out) *std_error_out = est.std_error;
  });
}

ima_status ima_mixing_dataset_csv(const ima_mixing* m, const char* prior, int count, uint64_t seed,
                                  const char* csv_path) {
  return guarded([&] {
    require(m, "mixing");
    require(csv_path, "csv_path");
    const auto p = prior_of(prior, m->fn.n);
    ima::mixing::write_dataset_csv(ima::mixing::sample_dataset(m->fn, p, count, seed), csv_path);
  });
}

ima_status ima_darmois2d_csv(const ima_mixing* m, const char* prior, int count, uint64_t seed,
                             const char* csv_path) {
  return guarded([&] {
    require(m, "mixing");
    require(csv_path, "csv_path");
    if (m->fn.n != 2)
      throw ima::DomainError("conditional-CDF transform is only defined for 2 dimensions");
    const auto p = prior_of(prior, 2);
    const ima::mixing::Darmois2d darmois(m->fn, p);
    const auto data = ima::mixing::sample_dataset(m->fn, p, count, seed);
    std::ofstream f(csv_path);
    if (!f) throw ima::ConfigError(std::string("cannot open '") + csv_path + "' for writing");
    f << "x1,x2,u1,u2\n";
    for (int i = 0; i < count; ++i) {
      const auto x = data.observations.row(i);
      const auto u = darmois.transform(x);
      f << fmt17(x[0]) << ',' << fmt17(x[1]) << ',' << fmt17(u[0]) << ',' << fmt17(u[1]) << '\n';
    }
    if (!f.good()) throw ima::ConfigError(std::string("short write to '") + csv_path + "'");
  });
}

/* ---- flows ------------------------------------------------------------ */

ima_status ima_flow_load(const char* path, ima_flow** out) {
  return guarded([&] {
    require(out, "out");
    require(path, "path");
    *out = new ima_flow{ima::flows::load_flow(path)};
  });
}

ima_status ima_flow_save(const ima_flow* f, const char* path) {
  return guarded([&] {
    require(f, "flow");
    require(path, "path");
    ima::flows::save_flow(f->model, path);
  });
}

void ima_flow_free(ima_flow* f) { delete f; }

int ima_flow_dim(const ima_flow* f) { return f ? f->model.cfg.n : 0; }

ima_status ima_flow_forward(const ima_flow* f, const double* x, double* y_out) {
  return guarded([&] {
    require(f, "flow");
    require(x, "x");
    require(y_out, "y_out");
    const int n = f->model.cfg.n;
    const auto ev = ima::flows::flow_forward(f->model, {x, static_cast<std::size_t>(n)});
    std::copy(ev.y.begin(), ev.y.end(), y_out);
  });
}

ima_status ima_flow_inverse(const ima_flow* f, const double* y, double* x_out) {
  return guarded([&] {
    require(f, "flow");
    require(y, "y");
    require(x_out, "x_out");
    const int n = f->model.cfg.n;
    const auto x = ima::flows::flow_inverse(f->model, {y, static_cast<std::size_t>(n)});
    std::copy(x.begin(), x.end(), x_out);
  });
}

ima_status ima_flow_log_likelihood(const ima_flow* f, const double* x, double* out) {
  return guarded([&] {
    require(f, "flow");
    require(x, "x");
    require(out, "out");
    const int n = f->model.cfg.n;
    *out = ima::flows::model_log_likelihood(f->model, {x, static_cast<std::size_t>(n)});
  });
}

ima_status ima_flow_contrast_term(const ima_flow* f, const double* x, double* out) {
  return guarded([&] {
    require(f, "flow");
    require(x, "x");
    require(out, "out");
    const int n = f->model.cfg.n;
    *out = ima::flows::model_cima_term(f->model, {x, static_cast<std::size_t>(n)});
  });
}

ima_status ima_flow_contrast_csv(const ima_flow* f, const char* dataset_csv, double* value_out,
                                 double* std_error_out) {
  return guarded([&] {
    require(f, "flow");
    require(dataset_csv, "dataset_csv");
    require(value_out, "value_out");
    const auto data = ima::mixing::read_dataset_csv(dataset_csv);
    const int n = f->model.cfg.n;
    if (data.observations.cols() != n)
      throw ima::DomainError("dataset dimension " + std::to_string(data.observations.cols()) +
                             " does not match flow dimension " + std::to_string(n));
    const int count = data.observations.rows();
    if (count < 2) throw ima::DomainError("contrast over a dataset needs >= 2 rows");
    const std::vector<double> flat = f->model.flatten();
    ima::flows::detail::FlowScratch<double> scratch;
    std::vector<double> terms(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const auto ev =
          ima::flows::flow_eval<double>(f->model.cfg, flat, data.observations.row(i), &scratch);
      terms[static_cast<std::size_t>(i)] = ima::contrast::cima_local(ima::matinv(ev.jac));
    }
    const auto ms = ima::mean_stderr(terms);
    *value_out = ms.mean;
    if (std_error_out) *std_error_out = ms.std_error;
  });
}

/* ---- training --------------------------------------------------------- */

ima_status ima_train_run(const ima_mixing* m, const char* prior, const char* flow_json,
                         const char* train_json, const char* reg_json, const char* out_dir) {
  return guarded([&]() -> ima_status {
    require(m, "mixing");
    require(out_dir, "out_dir");

    ima::flows::FlowConfig fc;
    fc.n = m->fn.n;
    {
      const json j = parse_object(flow_json, "flow config");
      for (const auto& [key, value] : j.items()) {
        try {
          if (key == "blocks") {
            fc.block_count = value.get<int>();
          } else if (key == "hidden_width") {
            fc.hidden_width = value.get<int>();
          } else if (key == "kind") {
            fc.kind = ima::flows::flow_kind_from_string(value.get<std::string>());
          } else if (key == "base") {
            fc.base = ima::flows::base_kind_from_string(value.get<std::string>());
          } else if (key == "seed") {
            fc.seed = value.get<std::uint64_t>();
          } else {
            throw ima::ConfigError("flow config: unknown key: " + key);
          }
        } catch (const json::exception&) {
          throw ima::ConfigError("flow config: mistyped field: " + key);
        }
      }
    }

    const auto tc = ima::training::train_config_from_json(train_json ? train_json : "{}");

    ima::training::RegularizerSpec reg{};
    {
      const json j = parse_object(reg_json, "regularizer config");
      auto kind = ima::training::RegKind::none;
      double strength = 0.0;
      for (const auto& [key, value] : j.items()) {
        try {
          if (key == "kind") {
            kind = ima::training::reg_kind_from_string(value.get<std::string>());
          } else if (key == "strength") {
            strength = value.get<double>();
          } else {
            throw ima::ConfigError("regularizer config: unknown key: " + key);
          }
        } catch (const json::exception&) {
          throw ima::ConfigError("regularizer config: mistyped field: " + key);
        }
      }
      reg = ima::training::RegularizerSpec::make(kind, strength);
    }

    const ima::training::ObservationSource source{m->fn, prior_of(prior, m->fn.n)};
    auto result = ima::training::train(ima::flows::build_flow(fc), source, tc, reg);
    result.model.training_config_hash = ima::training::training_config_hash(fc, source, tc, reg);

    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir(out_dir);
    ima::flows::save_flow(result.model, (dir / "model.flow.json").string());
    ima::training::write_trajectory_csv(result.log, (dir / "trajectory.csv").string());

    if (result.aborted)
      return fail(IMA_ERR_NO_CONVERGENCE, "training aborted after " +
                                              std::to_string(result.completed_iterations) +
                                              " iterations: " + result.abort_reason);
    return IMA_OK;
  });
}

/* ---- evaluation ------------------------------------------------------- */

const char* ima_metrics_header(void) {
  static const std::string header = ima::metrics::metrics_csv_header();
  return header.c_str();
}

ima_status ima_metrics_eval(const ima_mixing* m, const char* prior, const ima_flow* f, int count,
                            uint64_t seed, char** row_out) {
  return guarded([&] {
    require(m, "mixing");
    require(f, "flow");
    require(row_out, "row_out");
    const int n = m->fn.n;
    if (f->model.cfg.n != n)
      throw ima::DomainError("flow dimension " + std::to_string(f->model.cfg.n) +
                             " does not match mixing dimension " + std::to_string(n));
    const auto p = prior_of(prior, n);

    ima::metrics::MetricsRecord rec;
    rec.mixing_seed = m->fn.seed;
    rec.L = m->fn.L;
    rec.n = n;
    rec.run_seed = seed;

    const auto data = ima::mixing::sample_dataset(m->fn, p, count, ima::mix_seed(seed, 1));
    const std::vector<double> flat = f->model.flatten();
    ima::flows::detail::FlowScratch<double> scratch;
    ima::Matrix recovered(count, n);
    std::vector<double> terms(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const auto ev =
          ima::flows::flow_eval<double>(f->model.cfg, flat, data.observations.row(i), &scratch);
      for (int j = 0; j < n; ++j) recovered(i, j) = ev.y[static_cast<std::size_t>(j)];
      terms[static_cast<std::size_t>(i)] = ima::contrast::cima_local(ima::matinv(ev.jac));
    }
    const auto match = ima::metrics::mcc(data.sources, recovered);
    rec.mcc = match.mcc;
    rec.assignment = match.assignment;
    rec.matched_correlations = match.matched_correlations;
    rec.kld = ima::metrics::kld_estimate(m->fn, p, f->model, count, ima::mix_seed(seed, 2));
    const auto ms = ima::mean_stderr(terms);
    rec.cima = ima::contrast::ContrastEstimate{ms.mean, ms.std_error, count};

    *row_out = dup_string(ima::metrics::metrics_csv_row(rec));
  });
}

/* ---- suites ----------------------------------------------------------- */

ima_status ima_suite_default_config(const char* name, char** json_out) {
  return guarded([&] {
    require(name, "name");
    require(json_out, "json_out");
    *json_out = dup_string(ima::suites::suite_config_to_json(ima::suites::default_suite_config(name)));
  });
}

ima_status ima_suite_run(const char* name, const char* config_json, const char* out_dir,
                         int threads, int check, ima_progress_fn progress, void* user,
                         int* failed_out, char** report_out) {
  return guarded([&] {
    if ((name == nullptr) == (config_json == nullptr))
      throw ima::ConfigError("pass exactly one of a suite name or a config JSON");
    auto cfg = name ? ima::suites::default_suite_config(name)
                    : ima::suites::suite_config_from_json(config_json);
    if (out_dir) cfg.out_dir = out_dir;

    const auto result =
        ima::suites::run_suite(cfg, threads < 1 ? 1 : threads, wrap_progress(progress, user));

    std::string report;
    report += "suite " + result.suite + "\n";
    report += "manifest " + result.manifest_hash + "\n";
    report += "cells " + std::to_string(result.cells.size()) + " (" +
              std::to_string(result.cache_hits) + " cached)\n";
    for (const auto& path : result.outputs) report += "wrote " + path + "\n";

    int failed = 0;
    if (check != 0) {
      for (const auto& line : ima::suites::check_suite(cfg, result)) {
        if (!line.pass) ++failed;
        report += std::string(line.pass ? "PASS " : "FAIL ") + line.name + " -- " + line.detail + "\n";
      }
    }
    if (failed_out) *failed_out = failed;
    if (report_out) *report_out = dup_string(report);
  });
}

ima_status ima_check_run(int fast, int deep, const char* out_dir, int threads,
                         ima_progress_fn progress, void* user, int* failed_out,
                         char** report_out) {
  return guarded([&] {
    if (fast == 0 && deep == 0)
      throw ima::ConfigError("nothing to check: enable fast and/or deep");
    const auto show = wrap_progress(progress, user);

    std::vector<ima::acceptance::CriterionResult> results;
    if (fast != 0) results = ima::acceptance::run_fast(show);
    if (deep != 0) {
      auto more = ima::acceptance::run_suites(out_dir ? out_dir : "acceptance_runs",
                                              threads < 1 ? 1 : threads, show);
      results.insert(results.end(), more.begin(), more.end());
    }

    int failed = 0;
    std::string report;
    for (const auto& r : results) {
      if (!r.pass) ++failed;
      report += ima::acceptance::format_line(r) + "\n";
    }
    if (failed_out) *failed_out = failed;
    if (report_out) *report_out = dup_string(report);
  });
}

}  // extern "C"
