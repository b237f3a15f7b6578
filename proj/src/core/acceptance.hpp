#pragma once

#include <functional>
#include <string>
#include <vector>

namespace ima::acceptance {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
};

using Progress = std::function<void(const std::string&)>;

/// Deterministic property criteria (ids 1-9). Self-contained, runs in
/// seconds, no filesystem state beyond temporaries.
std::vector<CriterionResult> run_fast(const Progress& progress = {});

/// Desk-scale directional criteria (ids 10-16): runs the registered suites
/// under `out_dir` and evaluates their tagged assertions. Completed cells are
/// reused from the cache, so only the first run is expensive.
std::vector<CriterionResult> run_suites(const std::string& out_dir, int threads,
                                        const Progress& progress = {});

/// "criterion NN PASS name -- detail"
std::string format_line(const CriterionResult& r);

}  // namespace ima::acceptance
