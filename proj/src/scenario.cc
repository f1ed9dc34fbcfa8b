#include "edgefl/scenario.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "edgefl/errors.h"
#include "edgefl/federation.h"
#include "edgefl/metrics.h"
#include "edgefl/rng.h"

namespace edgefl::scenario {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw ConfigError(key + ": " + what);
}

// Walks a JSON object, rejecting any key not read through it.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) bad(where(""), "expected an object");
  }

  ~Section() = default;

  template <class T>
  void read(const std::string& key, T& target) {
    seen_.insert(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    try {
      target = it->template get<T>();
    } catch (const json::exception&) {
      bad(where(key), "wrong type");
    }
  }

  bool has(const std::string& key) const { return node_.contains(key); }

  const json& child(const std::string& key) {
    seen_.insert(key);
    return node_.at(key);
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, value] : node_.items())
      if (!seen_.contains(key)) bad(where(key), "unknown key");
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& key, const std::string& what) {
  if (!ok) bad(key, what);
}

void check_grid(const std::vector<double>& values, double lo, double hi, bool hi_open,
                const std::string& key) {
  check(!values.empty(), key, "must not be empty");
  for (double v : values) {
    const bool in = v >= lo && (hi_open ? v < hi : v <= hi);
    char range[64];
    std::snprintf(range, sizeof range, "[%g, %g%c", lo, hi, hi_open ? ')' : ']');
    check(in, key, "value " + std::to_string(v) + " outside " + range);
  }
}

}  // namespace

int ScenarioConfig::client_count() const {
  int n = 0;
  for (const auto& g : styles) n += g.clients;
  return n;
}

void ScenarioConfig::validate() const {
  check(rounds >= 0 && rounds <= 100, "rounds", "must be in [0, 100]");
  check(!styles.empty(), "styles", "must list at least one style");
  const auto& known = diffusion::style_names();
  const int bound = diffusion::Denoiser::Architecture{}.hidden;
  for (std::size_t i = 0; i < styles.size(); ++i) {
    const std::string key = "styles[" + std::to_string(i) + "]";
    const auto& g = styles[i];
    check(std::find(known.begin(), known.end(), g.style) != known.end(), key + ".style",
          "unknown style '" + g.style + "'");
    check(g.clients >= 1 && g.clients <= 64, key + ".clients", "must be in [1, 64]");
    check(g.ranks.size() == 1 || static_cast<int>(g.ranks.size()) == g.clients, key + ".ranks",
          "needs one entry or one per client");
    for (int r : g.ranks) {
      check(federation::is_allowed_rank(r), key + ".ranks",
            "rank " + std::to_string(r) + " not in {4, 8, 16, 64, 128}");
      check(r <= bound, key + ".ranks",
            "rank " + std::to_string(r) + " exceeds the backbone layer width " +
                std::to_string(bound));
    }
  }
  check(samples_per_client >= 2 && samples_per_client <= 100000, "samples_per_client",
        "must be in [2, 100000]");
  check(training.epochs >= 0 && training.epochs <= 10000, "training.epochs",
        "must be in [0, 10000]");
  check(training.learning_rate > 0.0 && training.learning_rate <= 1.0, "training.learning_rate",
        "must be in (0, 1]");
  check(training.batch_size >= 1 && training.batch_size <= samples_per_client,
        "training.batch_size", "must be in [1, samples_per_client]");
  check(std::isfinite(training.max_grad_norm) && training.max_grad_norm >= 0.0,
        "training.max_grad_norm", "must be finite and >= 0");
  check(aggregation.tau_c > 0.0 && aggregation.tau_c < 1.0, "aggregation.tau_c",
        "must be in (0, 1)");
  check(aggregation.tau_ded > 0.0 && aggregation.tau_ded <= 2.0, "aggregation.tau_ded",
        "must be in (0, 2]");
  check(aggregation.lambda_snt >= 0.0 && aggregation.lambda_snt <= 100.0,
        "aggregation.lambda_snt", "must be in [0, 100]");
  check(schedule.steps >= 2 && schedule.steps <= 1000, "schedule.steps", "must be in [2, 1000]");
  check(schedule.beta_start > 0.0 && schedule.beta_start < schedule.beta_end &&
            schedule.beta_end < 1.0,
        "schedule", "needs 0 < beta_start < beta_end < 1");
  try {
    diffusion::DiffusionSchedule::linear(schedule.steps, schedule.beta_start, schedule.beta_end);
  } catch (const Error& e) {
    bad("schedule", e.what());
  }
  check(backbone.pretrain_steps >= 0 && backbone.pretrain_steps <= 1000000,
        "backbone.pretrain_steps", "must be in [0, 1000000]");
  check(backbone.batch_size >= 1 && backbone.batch_size <= 4096, "backbone.batch_size",
        "must be in [1, 4096]");
  check(backbone.learning_rate > 0.0 && backbone.learning_rate <= 1.0, "backbone.learning_rate",
        "must be in (0, 1]");
  check_grid(hybrid.rho, 0.0, 1.0, true, "hybrid.rho");
  for (double r : hybrid.rho)
    check(protocol::server_steps(r, schedule.steps) < schedule.steps, "hybrid.rho",
          "leaves no client steps");
  check_grid(hybrid.mix_loras, 0.7, 1.0, false, "hybrid.mix_loras");
  check_grid(hybrid.local_scale, 0.75, 0.95, false, "hybrid.local_scale");
  check(hybrid.samples >= 2 && hybrid.samples <= 1000000, "hybrid.samples",
        "must be in [2, 1000000]");
  check(eval_samples >= 2 && eval_samples <= 1000000, "eval_samples", "must be in [2, 1000000]");
  check(!output_dir.empty(), "output_dir", "must not be empty");
}

ScenarioConfig config_from_json(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("parse error: ") + e.what());
  }
  ScenarioConfig c;
  Section top(root, "");
  top.read("seed", c.seed);
  top.read("rounds", c.rounds);
  top.read("samples_per_client", c.samples_per_client);
  top.read("eval_samples", c.eval_samples);
  top.read("output_dir", c.output_dir);
  if (top.has("styles")) {
    const json& list = top.child("styles");
    if (!list.is_array()) bad("styles", "expected an array");
    c.styles.clear();
    for (std::size_t i = 0; i < list.size(); ++i) {
      StyleGroup g;
      Section s(list[i], "styles[" + std::to_string(i) + "]");
      s.read("style", g.style);
      s.read("clients", g.clients);
      s.read("ranks", g.ranks);
      s.finish();
      c.styles.push_back(std::move(g));
    }
  }
  if (top.has("training")) {
    Section s(top.child("training"), "training");
    s.read("epochs", c.training.epochs);
    s.read("learning_rate", c.training.learning_rate);
    s.read("batch_size", c.training.batch_size);
    s.read("max_grad_norm", c.training.max_grad_norm);
    s.finish();
  }
  if (top.has("aggregation")) {
    Section s(top.child("aggregation"), "aggregation");
    s.read("tau_c", c.aggregation.tau_c);
    s.read("tau_ded", c.aggregation.tau_ded);
    s.read("lambda_snt", c.aggregation.lambda_snt);
    s.read("weight_by_samples", c.aggregation.weight_by_samples);
    s.finish();
  }
  if (top.has("schedule")) {
    Section s(top.child("schedule"), "schedule");
    s.read("steps", c.schedule.steps);
    s.read("beta_start", c.schedule.beta_start);
    s.read("beta_end", c.schedule.beta_end);
    s.finish();
  }
  if (top.has("backbone")) {
    Section s(top.child("backbone"), "backbone");
    s.read("seed", c.backbone.seed);
    s.read("pretrain_steps", c.backbone.pretrain_steps);
    s.read("batch_size", c.backbone.batch_size);
    s.read("learning_rate", c.backbone.learning_rate);
    s.finish();
  }
  if (top.has("hybrid")) {
    Section s(top.child("hybrid"), "hybrid");
    s.read("rho", c.hybrid.rho);
    s.read("mix_loras", c.hybrid.mix_loras);
    s.read("local_scale", c.hybrid.local_scale);
    s.read("samples", c.hybrid.samples);
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

namespace {

ordered_json config_json(const ScenarioConfig& c, bool with_output) {
  ordered_json j;
  j["seed"] = c.seed;
  j["rounds"] = c.rounds;
  j["styles"] = ordered_json::array();
  for (const auto& g : c.styles)
    j["styles"].push_back({{"style", g.style}, {"clients", g.clients}, {"ranks", g.ranks}});
  j["samples_per_client"] = c.samples_per_client;
  j["training"] = {{"epochs", c.training.epochs},
                   {"learning_rate", c.training.learning_rate},
                   {"batch_size", c.training.batch_size},
                   {"max_grad_norm", c.training.max_grad_norm}};
  j["aggregation"] = {{"tau_c", c.aggregation.tau_c},
                      {"tau_ded", c.aggregation.tau_ded},
                      {"lambda_snt", c.aggregation.lambda_snt},
                      {"weight_by_samples", c.aggregation.weight_by_samples}};
  j["schedule"] = {{"steps", c.schedule.steps},
                   {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end}};
  j["backbone"] = {{"seed", c.backbone.seed},
                   {"pretrain_steps", c.backbone.pretrain_steps},
                   {"batch_size", c.backbone.batch_size},
                   {"learning_rate", c.backbone.learning_rate}};
  j["hybrid"] = {{"rho", c.hybrid.rho},
                 {"mix_loras", c.hybrid.mix_loras},
                 {"local_scale", c.hybrid.local_scale},
                 {"samples", c.hybrid.samples}};
  j["eval_samples"] = c.eval_samples;
  if (with_output) j["output_dir"] = c.output_dir;
  return j;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

}  // namespace

std::string config_to_json(const ScenarioConfig& config) {
  return config_json(config, true).dump(2) + "\n";
}

ScenarioConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Metrics table

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

constexpr std::string_view kCsvHeader =
    "phase,round,client_id,style,rho,mix_loras,local_scale,frechet,baseline_frechet,ratio";

}  // namespace

std::string metrics_to_csv(const std::vector<MetricRow>& rows) {
  std::string out(kCsvHeader);
  out += "\n";
  for (const auto& r : rows) {
    out += r.phase + "," + std::to_string(r.round) + "," + std::to_string(r.client_id) + "," +
           r.style + "," + num(r.rho) + "," + num(r.mix_loras) + "," + num(r.local_scale) + "," +
           num(r.frechet) + "," + num(r.baseline_frechet) + "," + num(r.ratio) + "\n";
  }
  return out;
}

std::vector<MetricRow> metrics_from_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw ArgumentError("metrics.csv: unexpected header");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw ArgumentError("metrics.csv: malformed row '" + line + "'");
    MetricRow r;
    r.phase = f[0];
    r.round = std::stoi(f[1]);
    r.client_id = std::stoi(f[2]);
    r.style = f[3];
    r.rho = std::stod(f[4]);
    r.mix_loras = std::stod(f[5]);
    r.local_scale = std::stod(f[6]);
    r.frechet = std::stod(f[7]);
    r.baseline_frechet = std::stod(f[8]);
    r.ratio = std::stod(f[9]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Scenario

namespace {
using BackboneKey = std::tuple<std::uint64_t, int, int, double, int, double, double>;
std::map<BackboneKey, diffusion::Denoiser>& backbone_cache() {
  static std::map<BackboneKey, diffusion::Denoiser> cache;
  return cache;
}
}  // namespace

void clear_backbone_cache() { backbone_cache().clear(); }

const diffusion::Denoiser& pretrained_backbone(const ScenarioConfig& config) {
  using Key = BackboneKey;
  auto& cache = backbone_cache();
  const auto& b = config.backbone;
  const auto& s = config.schedule;
  const Key key{b.seed, b.pretrain_steps, b.batch_size, b.learning_rate,
                s.steps, s.beta_start, s.beta_end};
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  RngStream init(RngStream::for_purpose(b.seed, 0, 0, Purpose::kInit).key());
  diffusion::Denoiser net = diffusion::Denoiser::create(init);
  RngStream rng(RngStream::for_purpose(b.seed, 0, 0, Purpose::kPretrain).key());
  const auto schedule = diffusion::DiffusionSchedule::linear(s.steps, s.beta_start, s.beta_end);
  if (b.pretrain_steps > 0)
    diffusion::pretrain(net, schedule, {b.pretrain_steps, b.batch_size, b.learning_rate}, rng);
  return cache.emplace(key, std::move(net)).first->second;
}

namespace {

struct ClientMeta {
  int client_id;
  std::string style;
  int rank;
};

ordered_json round_json(const protocol::RoundReport& r, const std::map<int, std::string>& truth,
                        const std::vector<metrics::EnergyRow>& energy) {
  ordered_json j;
  j["round"] = r.round;
  j["clusters"] = r.assignment.members;
  j["purity"] = metrics::cluster_purity(r.assignment, truth);
  j["coefficients"] = ordered_json::array();
  for (const auto& c : r.coefficients.clusters)
    j["coefficients"].push_back({{"cluster_id", c.cluster_id},
                                 {"ded", c.ded},
                                 {"snt_dist", c.snt_dist},
                                 {"weight", c.weight},
                                 {"filtered", c.filtered}});
  j["global_rank"] = r.global_rank;
  ordered_json losses = ordered_json::object();
  for (const auto& [id, v] : r.final_loss) losses[std::to_string(id)] = v;
  j["final_loss"] = losses;
  ordered_json uploads = ordered_json::object();
  for (const auto& m : r.messages)
    if (m.variant == "AdapterUpload") uploads[std::to_string(m.sender.id)] = m.bytes;
  j["bytes"] = {{"uplink", r.uplink_bytes},
                {"downlink", r.downlink_bytes},
                {"server", r.server_bytes},
                {"total", r.total_bytes()},
                {"messages", r.messages.size()},
                {"adapter_upload", uploads}};
  j["flags"] = {{"rank_overflow", r.rank_overflow},
                {"degenerate_snt", r.degenerate_snt},
                {"all_filtered_fallback", r.all_filtered_fallback}};
  j["energy"] = ordered_json::array();
  for (const auto& e : energy)
    j["energy"].push_back({{"layer", e.layer},
                           {"member_energy", e.member_energy},
                           {"fedavg_energy", e.fedavg_energy},
                           {"stacked_energy", e.stacked_energy},
                           {"cancellation_ratio", e.cancellation_ratio}});
  return j;
}

}  // namespace

ScenarioResult simulate(const ScenarioConfig& config) {
  config.validate();
  ScenarioResult result;
  protocol::World world;
  world.base = pretrained_backbone(config);
  world.schedule = diffusion::DiffusionSchedule::linear(
      config.schedule.steps, config.schedule.beta_start, config.schedule.beta_end);
  world.seed = config.seed;
  world.embedding_salt = config.seed;
  result.full_denoiser_bytes = protocol::encode_denoiser(world.base).size();

  std::vector<ClientMeta> meta;
  std::map<int, std::string> truth;
  std::map<int, diffusion::SampleBatch> held_out;
  int next_id = 0;
  for (const auto& g : config.styles) {
    for (int k = 0; k < g.clients; ++k) {
      const int id = next_id++;
      const int rank = g.ranks.size() == 1 ? g.ranks[0] : g.ranks[static_cast<std::size_t>(k)];
      const auto uid = static_cast<std::uint64_t>(id);
      federation::ClientProfile p;
      p.client_id = id;
      p.rank = rank;
      RngStream data = RngStream::for_purpose(config.seed, uid, 0, Purpose::kData);
      p.data = diffusion::make_style_dataset(g.style, config.samples_per_client, data);
      p.data.style.reset();
      p.sample_count = config.samples_per_client;
      RngStream init = RngStream::for_purpose(config.seed, uid, 0, Purpose::kInit);
      p.adapters = world.base.make_adapters(rank, init);
      p.token = diffusion::StyleToken::neutral(diffusion::Denoiser::kTokenDim);
      p.embedding = federation::encode_domain(p.token, world.embedding_salt, id);
      p.validate();
      world.clients.push_back(std::move(p));
      meta.push_back({id, g.style, rank});
      truth[id] = g.style;
      RngStream eval = RngStream::for_purpose(config.seed, uid, 0, Purpose::kEvaluation);
      held_out[id] = diffusion::make_style_dataset(g.style, config.eval_samples, eval);
    }
  }

  // Untrained reference: backbone alone with the neutral token.
  const auto neutral = diffusion::StyleToken::neutral(diffusion::Denoiser::kTokenDim);
  const RngStream reference_stream(derive_key(config.seed, {static_cast<std::uint64_t>(Purpose::kEvaluation), 1}));
  const diffusion::SampleBatch untrained = diffusion::ddpm_sample(
      world.base, nullptr, 0.0, neutral, config.eval_samples, world.schedule, reference_stream);
  std::map<int, double> base_frechet;
  for (const auto& m : meta) {
    const double f = metrics::frechet_2d(untrained.points, held_out[m.client_id].points);
    base_frechet[m.client_id] = f;
    result.rows.push_back({"baseline", 0, m.client_id, m.style, 0.0, 0.0, 0.0, f, f, 1.0});
  }

  protocol::RoundConfig round_config;
  round_config.finetune = {config.training.epochs, config.training.learning_rate,
                           config.training.batch_size, 1.0, config.training.max_grad_norm};
  round_config.tau_c = config.aggregation.tau_c;
  round_config.tau_ded = config.aggregation.tau_ded;
  round_config.lambda_snt = config.aggregation.lambda_snt;
  round_config.weight_by_samples = config.aggregation.weight_by_samples;

  ordered_json rounds_json = ordered_json::array();
  for (int r = 0; r < config.rounds; ++r) {
    protocol::RoundReport report = protocol::run_training_round(world, round_config);
    std::vector<lowrank::AdapterSet> member_sets;
    std::vector<int> counts;
    for (const auto& up : world.tes.uploads) {
      member_sets.push_back(up.adapters);
      counts.push_back(up.sample_count);
    }
    const auto fedavg = federation::fedavg_aggregate(member_sets, counts);
    const auto energy = metrics::energy_report(member_sets, fedavg, *world.ies.global);
    rounds_json.push_back(round_json(report, truth, energy));

    const RngStream local_stream(derive_key(
        config.seed, {static_cast<std::uint64_t>(Purpose::kEvaluation), 2,
                      static_cast<std::uint64_t>(report.round)}));
    for (const auto& m : meta) {
      const auto& c = world.clients[static_cast<std::size_t>(m.client_id)];
      const auto local = diffusion::ddpm_sample(world.base, &c.adapters, 1.0, c.token,
                                                config.eval_samples, world.schedule, local_stream);
      const double f = metrics::frechet_2d(local.points, held_out[m.client_id].points);
      const double b = base_frechet[m.client_id];
      result.rows.push_back(
          {"round", report.round, m.client_id, m.style, 0.0, 0.0, 0.0, f, b, f / b});
    }
    result.rounds.push_back(std::move(report));
  }

  ordered_json hybrid_json = ordered_json::array();
  if (config.rounds > 0) {
    const std::uint64_t stream_id =
        derive_key(config.seed, {static_cast<std::uint64_t>(Purpose::kSampling), 1});
    for (double rho : config.hybrid.rho)
      for (double mix : config.hybrid.mix_loras)
        for (double scale : config.hybrid.local_scale) {
          protocol::HybridConfig h;
          h.rho = rho;
          h.mix_loras = mix;
          h.local_scale = scale;
          h.sample_count = config.hybrid.samples;
          h.stream_id = stream_id;
          const auto ours = protocol::hybrid_infer(world, h);
          h.use_global = false;
          const auto plain = protocol::hybrid_infer(world, h);
          double mean = 0.0;
          bool all_improved = true;
          for (const auto& m : meta) {
            const auto& ref = held_out[m.client_id].points;
            const double f = metrics::frechet_2d(ours.samples.at(m.client_id).points, ref);
            const double b = metrics::frechet_2d(plain.samples.at(m.client_id).points, ref);
            const double ratio = f / b;
            mean += ratio / static_cast<double>(meta.size());
            all_improved = all_improved && ratio <= 1.0;
            result.rows.push_back({"hybrid", config.rounds, m.client_id, m.style, rho, mix, scale,
                                   f, b, ratio});
          }
          hybrid_json.push_back({{"rho", rho},
                                 {"mix_loras", mix},
                                 {"local_scale", scale},
                                 {"server_steps", ours.server_steps},
                                 {"client_steps", ours.client_steps},
                                 {"mean_ratio", mean},
                                 {"every_style_improved", all_improved}});
        }
  }

  ordered_json report;
  report["config"] = config_json(config, false);
  report["clients"] = ordered_json::array();
  for (const auto& m : meta)
    report["clients"].push_back(
        {{"client_id", m.client_id}, {"style", m.style}, {"rank", m.rank}});
  report["full_denoiser_bytes"] = result.full_denoiser_bytes;
  ordered_json base_json = ordered_json::object();
  for (const auto& [id, f] : base_frechet) base_json[std::to_string(id)] = f;
  report["untrained_frechet"] = base_json;
  report["rounds"] = rounds_json;
  report["hybrid"] = hybrid_json;
  std::size_t total = 0;
  for (const auto& rec : world.router.log()) total += rec.bytes;
  report["log_bytes"] = total;
  report["log_messages"] = world.router.log().size();
  result.report_json = report.dump(2) + "\n";
  result.metrics_csv = metrics_to_csv(result.rows);

  for (const auto& rec : world.router.log()) result.message_log += protocol::to_json_line(rec) + "\n";
  for (const auto& c : world.clients)
    result.adapter_files["client_" + std::to_string(c.client_id) + ".bin"] =
        protocol::encode_adapter_set(c.adapters);
  for (const auto& model : world.tes.cluster_models)
    result.adapter_files["cluster_" + std::to_string(model.cluster_id) + ".bin"] =
        protocol::encode_adapter_set(model.adapters);
  if (world.ies.global)
    result.adapter_files["global.bin"] = protocol::encode_adapter_set(*world.ies.global);
  return result;
}

ScenarioResult run_scenario(const ScenarioConfig& config) {
  ScenarioResult result = simulate(config);
  const fs::path dir(config.output_dir);
  fs::create_directories(dir / "adapters");
  write_file(dir / "metrics.csv", result.metrics_csv);
  write_file(dir / "report.json", result.report_json);
  write_file(dir / "message_log.txt", result.message_log);
  for (const auto& [name, bytes] : result.adapter_files)
    write_file(dir / "adapters" / name,
               std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  return result;
}

// ---------------------------------------------------------------------------
// Report

std::string report(const fs::path& run_dir) {
  for (const char* name : {"report.json", "metrics.csv"})
    if (!fs::exists(run_dir / name))
      throw ArgumentError("report: missing " + (run_dir / name).string());
  json rep;
  try {
    rep = json::parse(read_file(run_dir / "report.json"));
  } catch (const json::parse_error& e) {
    throw ArgumentError(std::string("report: report.json is malformed: ") + e.what());
  }
  const auto rows = metrics_from_csv(read_file(run_dir / "metrics.csv"));

  std::ostringstream out;
  char line[256];
  out << "Untrained backbone Frechet distance per client\n";
  for (const auto& r : rows)
    if (r.phase == "baseline") {
      std::snprintf(line, sizeof line, "  client %-3d %-8s %10.4f\n", r.client_id, r.style.c_str(),
                    r.frechet);
      out << line;
    }

  for (const auto& round : rep.value("rounds", json::array())) {
    std::snprintf(line, sizeof line, "\nRound %d: %zu cluster(s), purity %.3f\n",
                  round.at("round").get<int>(), round.at("clusters").size(),
                  round.at("purity").get<double>());
    out << line;
    for (const auto& c : round.at("coefficients")) {
      std::snprintf(line, sizeof line, "  cluster %d  ded %.4f  snt %.4f  weight %.4f%s\n",
                    c.at("cluster_id").get<int>(), c.at("ded").get<double>(),
                    c.at("snt_dist").get<double>(), c.at("weight").get<double>(),
                    c.at("filtered").get<bool>() ? "  (filtered)" : "");
      out << line;
    }
    for (const auto& e : round.at("energy")) {
      std::snprintf(line, sizeof line,
                    "  layer %-4s fedavg/member energy %.4f  stacked energy %.4g\n",
                    e.at("layer").get<std::string>().c_str(),
                    e.at("cancellation_ratio").get<double>(), e.at("stacked_energy").get<double>());
      out << line;
    }
    const auto& b = round.at("bytes");
    std::snprintf(line, sizeof line, "  bytes: uplink %zu  downlink %zu  server %zu  total %zu\n",
                  b.at("uplink").get<std::size_t>(), b.at("downlink").get<std::size_t>(),
                  b.at("server").get<std::size_t>(), b.at("total").get<std::size_t>());
    out << line;
  }

  bool any_hybrid = false;
  for (const auto& r : rows) any_hybrid = any_hybrid || r.phase == "hybrid";
  if (any_hybrid) {
    out << "\nHybrid inference, Frechet ratio ours / no-global-adapter baseline\n";
    out << "  rho   mix   scale   mean ratio   per client\n";
    std::map<std::tuple<double, double, double>, std::vector<const MetricRow*>> cells;
    for (const auto& r : rows)
      if (r.phase == "hybrid") cells[{r.rho, r.mix_loras, r.local_scale}].push_back(&r);
    for (const auto& [key, members] : cells) {
      double mean = 0.0;
      for (const auto* r : members) mean += r->ratio / static_cast<double>(members.size());
      std::snprintf(line, sizeof line, "  %.2f  %.2f  %.2f    %.4f%s  ", std::get<0>(key),
                    std::get<1>(key), std::get<2>(key), mean, mean < 1.0 ? " *" : "  ");
      out << line;
      for (const auto* r : members) {
        std::snprintf(line, sizeof line, " %s=%.3f%s", r->style.c_str(), r->ratio,
                      r->ratio < 1.0 ? "*" : "");
        out << line;
      }
      out << "\n";
    }
    out << "  (* ratio below 1: improvement over the baseline)\n";
  } else {
    out << "\nNo hybrid cells (no training rounds were run)\n";
  }
  std::snprintf(line, sizeof line, "\nMessages: %zu, logged bytes: %zu, full backbone: %zu bytes\n",
                rep.at("log_messages").get<std::size_t>(), rep.at("log_bytes").get<std::size_t>(),
                rep.at("full_denoiser_bytes").get<std::size_t>());
  out << line;
  return out.str();
}

// ---------------------------------------------------------------------------
// Sweep

SweepResult sweep(const ScenarioConfig& config, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ArgumentError("sweep: no seeds");
  SweepResult out;
  out.seeds = seeds;
  std::map<std::tuple<double, double, double>, std::vector<double>> per_cell;
  for (std::uint64_t seed : seeds) {
    ScenarioConfig c = config;
    c.seed = seed;
    c.output_dir = (fs::path(config.output_dir) / ("seed_" + std::to_string(seed))).string();
    ScenarioResult r = run_scenario(c);
    std::map<std::tuple<double, double, double>, std::pair<double, int>> sums;
    for (const auto& row : r.rows)
      if (row.phase == "hybrid") {
        auto& s = sums[{row.rho, row.mix_loras, row.local_scale}];
        s.first += row.ratio;
        ++s.second;
      }
    for (const auto& [key, s] : sums) per_cell[key].push_back(s.first / s.second);
    out.runs.push_back(std::move(r));
  }
  std::string csv = "rho,mix_loras,local_scale";
  for (auto s : seeds) csv += ",seed_" + std::to_string(s);
  csv += ",mean\n";
  for (const auto& [key, values] : per_cell) {
    csv += num(std::get<0>(key)) + "," + num(std::get<1>(key)) + "," + num(std::get<2>(key));
    double mean = 0.0;
    for (double v : values) {
      csv += "," + num(v);
      mean += v / static_cast<double>(values.size());
    }
    csv += "," + num(mean) + "\n";
  }
  out.summary_csv = csv;
  fs::create_directories(config.output_dir);
  write_file(fs::path(config.output_dir) / "summary.csv", csv);
  return out;
}

}  // namespace edgefl::scenario
