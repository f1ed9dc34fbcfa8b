#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace edgefl::verify {

struct CheckResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
  double budget_seconds = 0.0;

  // "PASS 3 gradient correctness: ... (1.20 s)"
  std::string line() const;
};

struct Options {
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  // Scratch space for scenario runs.
  std::filesystem::path work_dir = "verify_runs";
  // Criteria to run; empty means all.
  std::vector<int> only;
};

CheckResult check_stacking();
CheckResult check_alignment();
CheckResult check_gradients();
CheckResult check_cancellation();
CheckResult check_clustering();
CheckResult check_handoff();
CheckResult check_frechet();
CheckResult check_accounting();

// 7, 8 and 10 share scenario runs.
struct ScenarioChecks {
  CheckResult personalization;
  CheckResult isolation;
  CheckResult determinism;
};
ScenarioChecks check_scenarios(const Options& options);

// Runs the selected criteria in order, calling on_result after each one.
std::vector<CheckResult> run(const Options& options,
                             const std::function<void(const CheckResult&)>& on_result = {});

}  // namespace edgefl::verify
