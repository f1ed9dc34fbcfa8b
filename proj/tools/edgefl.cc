#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "edgefl/errors.h"
#include "edgefl/scenario.h"
#include "edgefl/verify.h"

namespace {

using edgefl::scenario::ScenarioConfig;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> rounds;
  std::optional<std::string> out;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--seed", seed, "Scenario seed");
    cmd->add_option("--rounds", rounds, "Federated training rounds");
    cmd->add_option("--out", out, "Output directory");
  }

  ScenarioConfig apply(ScenarioConfig config) const {
    if (seed) config.seed = *seed;
    if (rounds) config.rounds = *rounds;
    if (out) config.output_dir = *out;
    config.validate();
    return config;
  }
};

int fail(const std::string& kind, const std::string& message) {
  nlohmann::ordered_json record = {{"status", "error"}, {"kind", kind}, {"message", message}};
  std::cerr << record.dump() << "\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated low-rank adaptation of a toy diffusion model across edge clients"};
  app.require_subcommand(1);

  Overrides run_flags;
  std::string run_config;
  auto* run = app.add_subcommand("run", "Train, run the hybrid grid and write artifacts");
  run->add_option("config", run_config, "Scenario file (JSON)")->required()->check(CLI::ExistingFile);
  run_flags.add_to(run);

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Print the summary of a finished run");
  report->add_option("dir", report_dir, "Run directory")->required();

  Overrides sweep_flags;
  std::string sweep_config;
  std::vector<std::uint64_t> sweep_seeds;
  auto* sweep = app.add_subcommand("sweep", "Repeat the scenario and grid over several seeds");
  sweep->add_option("config", sweep_config, "Scenario file (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--seeds", sweep_seeds, "Seeds to run (default: seed, seed+1, seed+2)")
      ->delimiter(',');
  sweep_flags.add_to(sweep);

  std::vector<int> verify_only;
  std::vector<std::uint64_t> verify_seeds = {0, 1, 2};
  std::string verify_out = "verify_runs";
  auto* verify = app.add_subcommand("verify", "Run the acceptance checks");
  verify->add_option("--only", verify_only, "Criteria to run (default: all)")->delimiter(',');
  verify->add_option("--seeds", verify_seeds, "Scenario seeds")->delimiter(',');
  verify->add_option("--out", verify_out, "Scratch directory for scenario runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what());
  }

  try {
    if (*run) {
      const auto config = run_flags.apply(edgefl::scenario::load_config(run_config));
      edgefl::scenario::run_scenario(config);
      std::cout << edgefl::scenario::report(config.output_dir);
    } else if (*report) {
      std::cout << edgefl::scenario::report(report_dir);
    } else if (*sweep) {
      const auto config = sweep_flags.apply(edgefl::scenario::load_config(sweep_config));
      if (sweep_seeds.empty())
        for (std::uint64_t k = 0; k < 3; ++k) sweep_seeds.push_back(config.seed + k);
      const auto result = edgefl::scenario::sweep(config, sweep_seeds);
      std::cout << result.summary_csv;
    } else if (*verify) {
      edgefl::verify::Options options;
      options.only = verify_only;
      options.seeds = verify_seeds;
      options.work_dir = verify_out;
      bool ok = true;
      edgefl::verify::run(options, [&](const edgefl::verify::CheckResult& r) {
        std::cout << r.line() << std::endl;
        ok = ok && r.passed;
      });
      return ok ? 0 : 1;
    }
  } catch (const edgefl::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
