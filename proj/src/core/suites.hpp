#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flows.hpp"
#include "metrics.hpp"
#include "mixing.hpp"
#include "training.hpp"

namespace ima::suites {

/// Hashed into every manifest so outputs stay traceable to the code that
/// produced them.
inline constexpr const char* kCodeVersion = "ima-core 0.1.0";

struct RegCell {
  training::RegKind kind = training::RegKind::none;
  double strength = 0.0;
};

/// Full description of one experiment grid. Everything here is serialized
/// into the manifest; two configs hash equal iff their grids are identical.
struct SuiteConfig {
  std::string suite;
  int n = 2;
  std::vector<int> L_grid = {2, 4, 8};
  mixing::InitKind init_kind = mixing::InitKind::orthogonal;
  mixing::PriorKind prior = mixing::PriorKind::standard_normal;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<RegCell> regularizers = {RegCell{}};
  flows::FlowKind flow_kind = flows::FlowKind::full;
  flows::BaseKind base_kind = flows::BaseKind::logistic;
  int block_count = 4;
  int hidden_width = 16;
  training::TrainConfig train;
  int metric_samples = 10000;
  int scatter_points = 2000;  // only read by 2-dimensional recovery grids
  std::string out_dir = "suite_runs";
};

std::vector<std::string> suite_names();
SuiteConfig default_suite_config(const std::string& name);
std::string suite_config_to_json(const SuiteConfig& cfg);
SuiteConfig suite_config_from_json(const std::string& text);  // unknown keys rejected

/// One grid point: a mixing instance plus one trained model and its
/// evaluation. Identified by the training-config hash, which covers the
/// mixing, flow, optimizer, and regularizer settings.
struct CellResult {
  std::string hash;
  std::uint64_t mixing_seed = 0;
  std::uint64_t run_seed = 0;
  int L = 0;
  int n = 0;
  RegCell reg;
  bool aborted = false;
  std::string abort_reason;
  bool from_cache = false;
  double cima_true = 0.0;
  double cima_true_se = 0.0;
  metrics::MetricsRecord metrics;
  training::TrajectoryLog trajectory;
};

struct SuiteResult {
  std::string suite;
  std::string manifest_hash;
  std::vector<CellResult> cells;
  std::vector<std::string> outputs;  // paths written, relative to out_dir
  int cache_hits = 0;
};

using Progress = std::function<void(const std::string&)>;

/// Runs every cell of the grid (skipping cached ones), assembles the suite's
/// CSV outputs, plot spec, and manifest under cfg.out_dir, and returns the
/// cells for in-memory checks. `threads` bounds the worker pool.
SuiteResult run_suite(const SuiteConfig& cfg, int threads = 1, const Progress& progress = {});

struct CheckLine {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// The suite's acceptance-tagged assertions, evaluated over completed cells.
std::vector<CheckLine> check_suite(const SuiteConfig& cfg, const SuiteResult& result);

/// Stable identity of a configuration (grid plus code version).
std::string manifest_hash_for(const SuiteConfig& cfg);

}  // namespace ima::suites
