#pragma once

// Invariant suite run by `mma selfcheck` and by the acceptance tests.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace mma {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfCheckOptions {
  std::int64_t bound_cases = 1000;
  std::int64_t defense_cases = 20;
  std::uint64_t seed = 1234;
};

std::vector<CheckResult> run_invariant_suite(const SelfCheckOptions& options = {});
// Prints one line per check; true when all passed.
bool report_checks(const std::vector<CheckResult>& results, std::ostream& out);

}  // namespace mma
