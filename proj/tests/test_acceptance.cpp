#include "core/acceptance.hpp"

#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <string>
#include <thread>

using namespace ima;

namespace {

void show(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
}

}  // namespace

TEST_CASE("acceptance: exact and property-based criteria") {
  const auto results = acceptance::run_fast(show);
  REQUIRE(results.size() == 9);
  for (const auto& r : results) CHECK_MESSAGE(r.pass, acceptance::format_line(r));
}

// Desk-scale directional reproductions. First run trains every suite cell and
// takes a while; the cell cache under the output directory makes reruns fast.
// IMA_ACCEPT_DIR relocates the cache, IMA_ACCEPT_THREADS bounds the pool.
TEST_CASE("acceptance: desk-scale directional criteria") {
  const char* dir = std::getenv("IMA_ACCEPT_DIR");
  const std::string out = dir != nullptr ? dir : "acceptance_runs";
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* t = std::getenv("IMA_ACCEPT_THREADS")) threads = std::atoi(t);
  threads = std::max(1, std::min(threads, 16));

  const auto results = acceptance::run_suites(out, threads, show);
  REQUIRE(results.size() == 7);
  for (const auto& r : results) CHECK_MESSAGE(r.pass, acceptance::format_line(r));
}
