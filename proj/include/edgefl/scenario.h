#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "edgefl/diffusion.h"
#include "edgefl/protocol.h"

namespace edgefl::scenario {

struct StyleGroup {
  std::string style;
  int clients = 1;
  std::vector<int> ranks = {16};  // one entry per client, or one shared entry

  bool operator==(const StyleGroup&) const = default;
};

struct ScenarioConfig {
  std::uint64_t seed = 0;
  int rounds = 1;
  std::vector<StyleGroup> styles = {{"ring", 1, {16}}, {"spiral", 1, {16}}, {"moons", 1, {16}}};
  int samples_per_client = 100;

  struct Training {
    int epochs = 30;
    double learning_rate = 0.05;
    int batch_size = 2;
    double max_grad_norm = 2.0;  // 0 disables clipping
    bool operator==(const Training&) const = default;
  } training;

  struct Aggregation {
    double tau_c = 0.5;
    double tau_ded = 0.8;
    double lambda_snt = 4.0;
    bool weight_by_samples = false;
    bool operator==(const Aggregation&) const = default;
  } aggregation;

  struct Schedule {
    int steps = 50;
    double beta_start = 1e-4;
    double beta_end = 0.12;
    bool operator==(const Schedule&) const = default;
  } schedule;

  struct Backbone {
    std::uint64_t seed = 42;
    int pretrain_steps = 3000;
    int batch_size = 128;
    double learning_rate = 2e-3;
    bool operator==(const Backbone&) const = default;
  } backbone;

  struct Hybrid {
    std::vector<double> rho = {0.2, 0.3};
    std::vector<double> mix_loras = {0.7, 0.8, 0.9, 1.0};
    std::vector<double> local_scale = {0.75, 0.85, 0.95};
    int samples = 1000;
    bool operator==(const Hybrid&) const = default;
  } hybrid;

  int eval_samples = 1000;
  std::string output_dir = "run";

  bool operator==(const ScenarioConfig&) const = default;

  // Throws ConfigError naming the offending key.
  void validate() const;
  int client_count() const;
};

ScenarioConfig config_from_json(std::string_view text);
std::string config_to_json(const ScenarioConfig& config);
ScenarioConfig load_config(const std::filesystem::path& path);

struct MetricRow {
  std::string phase;  // baseline | round | hybrid
  int round = 0;
  int client_id = 0;
  std::string style;
  double rho = 0.0;
  double mix_loras = 0.0;
  double local_scale = 0.0;
  double frechet = 0.0;
  double baseline_frechet = 0.0;
  double ratio = 0.0;
};

struct ScenarioResult {
  std::vector<MetricRow> rows;
  std::vector<protocol::RoundReport> rounds;
  std::string report_json;
  std::string metrics_csv;
  std::string message_log;
  std::map<std::string, protocol::Bytes> adapter_files;  // relative path -> frame
  std::size_t full_denoiser_bytes = 0;
};

// Runs everything in memory.
ScenarioResult simulate(const ScenarioConfig& config);

// Simulates and writes metrics.csv, report.json, message_log.txt and
// adapters/ under config.output_dir.
ScenarioResult run_scenario(const ScenarioConfig& config);

// Pretrained backbone for the given settings, cached per process.
const diffusion::Denoiser& pretrained_backbone(const ScenarioConfig& config);
void clear_backbone_cache();

std::string metrics_to_csv(const std::vector<MetricRow>& rows);
std::vector<MetricRow> metrics_from_csv(std::string_view text);

// Console summary of a finished run directory.
std::string report(const std::filesystem::path& run_dir);

struct SweepResult {
  std::vector<std::uint64_t> seeds;
  std::vector<ScenarioResult> runs;
  std::string summary_csv;
};

// One run per seed under <output_dir>/seed_<n>, plus summary.csv with the
// per-seed mean ratio for every hybrid cell.
SweepResult sweep(const ScenarioConfig& config, const std::vector<std::uint64_t>& seeds);

}  // namespace edgefl::scenario
