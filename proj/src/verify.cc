#include "edgefl/verify.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <Eigen/SVD>

#include "edgefl/diffusion.h"
#include "edgefl/errors.h"
#include "edgefl/federation.h"
#include "edgefl/lowrank.h"
#include "edgefl/metrics.h"
#include "edgefl/protocol.h"
#include "edgefl/rng.h"
#include "edgefl/scenario.h"

namespace edgefl::verify {

namespace fs = std::filesystem;
using lowrank::LoraAdapter;
using lowrank::Matrix;

namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, value);
  return buf;
}

CheckResult finish(int id, std::string name, bool ok, std::string detail, Clock::time_point start,
                   double budget) {
  CheckResult r;
  r.id = id;
  r.name = std::move(name);
  r.seconds = elapsed(start);
  r.budget_seconds = budget;
  r.passed = ok && r.seconds <= budget;
  r.detail = std::move(detail);
  if (ok && r.seconds > budget) r.detail += "; over time budget";
  return r;
}

LoraAdapter random_adapter(const std::string& id, int rank, Eigen::Index d_in, Eigen::Index d_out,
                           RngStream& rng) {
  LoraAdapter a;
  a.layer_id = id;
  a.down = rng.normal_matrix(rank, d_in);
  a.up = rng.normal_matrix(d_out, rank);
  a.alpha = 1.0 + rng.uniform() * 2.0 * rank;
  return a;
}

// Delta by explicit products, independent of LoraAdapter::delta.
Matrix dense_delta(const LoraAdapter& a) {
  return (a.alpha / static_cast<double>(a.rank())) * (a.up * a.down);
}

std::string fetch(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

// Expected AdapterUpload frame size from the architecture alone.
std::size_t upload_bytes_oracle(int rank, const std::vector<std::pair<int, int>>& layer_dims,
                                const std::vector<std::string>& layer_ids) {
  std::size_t n = 16;                                    // header
  n += 4 + 4;                                            // client id, sample count
  n += 4 + 8 * federation::kEmbeddingDim;                // embedding
  n += 1;                                                // fallback flag
  n += 4;                                                // layer count
  for (std::size_t i = 0; i < layer_ids.size(); ++i) {
    const auto [d_in, d_out] = layer_dims[i];
    n += 4 + layer_ids[i].size() + 8;                    // id, alpha
    n += 8 + 8 * static_cast<std::size_t>(rank * d_in);  // down
    n += 8 + 8 * static_cast<std::size_t>(d_out * rank); // up
  }
  return n;
}

std::size_t denoiser_bytes_oracle(int data_dim, int cond_dim, int hidden, int hidden_layers,
                                  const std::vector<std::string>& adaptable) {
  std::size_t n = 16 + 4;
  int width = data_dim + cond_dim;
  for (int l = 0; l <= hidden_layers; ++l) {
    const int out = l == hidden_layers ? data_dim : hidden;
    const std::string id = "fc" + std::to_string(l);
    n += 4 + id.size() + 1;
    n += 8 + 8 * static_cast<std::size_t>(out * width);
    n += 4 + 8 * static_cast<std::size_t>(out);
    width = out;
  }
  n += 4;
  for (const auto& id : adaptable) n += 4 + id.size();
  return n;
}

}  // namespace

std::string CheckResult::line() const {
  std::string s = passed ? "PASS " : "FAIL ";
  s += std::to_string(id) + " " + name + ": " + detail;
  s += " (" + fmt("%.2f", seconds) + " s, budget " + fmt("%.0f", budget_seconds) + " s)";
  return s;
}

CheckResult check_stacking() {
  const auto start = Clock::now();
  RngStream rng(0x5a11);
  const int ranks[] = {4, 8, 16, 64};
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    const int count = 2 + static_cast<int>(rng.below(3));
    std::vector<LoraAdapter> members;
    std::vector<double> coeffs;
    Matrix expected = Matrix::Zero(260, 300);
    for (int i = 0; i < count; ++i) {
      members.push_back(random_adapter("w", ranks[rng.below(4)], 300, 260, rng));
      coeffs.push_back(rng.uniform());
    }
    double total = 0.0;
    for (double w : coeffs) total += w;
    for (double& w : coeffs) w /= total;
    for (int i = 0; i < count; ++i) expected += coeffs[static_cast<std::size_t>(i)] * dense_delta(members[static_cast<std::size_t>(i)]);
    const LoraAdapter stacked = lowrank::stack_adapters(members, coeffs);
    const double err = (dense_delta(stacked) - expected).norm() / expected.norm();
    worst = std::max(worst, err);
  }
  return finish(1, "stacking exactness", worst <= 1e-9,
                "100 cases, worst relative error " + fmt("%.3g", worst), start, 5.0);
}

CheckResult check_alignment() {
  const auto start = Clock::now();
  RngStream rng(0xa119);
  std::vector<LoraAdapter> members;
  for (int r : {4, 16, 64}) members.push_back(random_adapter("w", r, 96, 80, rng));
  const std::vector<int> ranks = {4, 16, 64};
  const int median = lowrank::median_rank(ranks);

  const LoraAdapter padded = lowrank::align_rank(members[0], median);
  const double pad_change = (padded.delta() - members[0].delta()).cwiseAbs().maxCoeff();

  const LoraAdapter truncated = lowrank::align_rank(members[2], median);
  const Matrix full = dense_delta(members[2]);
  const double err = (full - dense_delta(truncated)).norm();
  const Eigen::JacobiSVD<Matrix> oracle(full);
  const auto sv = oracle.singularValues();
  const double eckart_young = std::sqrt(sv.tail(sv.size() - median).squaredNorm());
  const double gap = std::abs(err - eckart_young) / std::max(1.0, eckart_young);

  const bool ok = median == 16 && padded.rank() == 16 && truncated.rank() == 16 &&
                  pad_change == 0.0 && gap <= 1e-8;
  return finish(2, "median-aligned padding", ok,
                "median " + std::to_string(median) + ", padding change " + fmt("%g", pad_change) +
                    ", truncation error " + fmt("%.6f", err) + " vs oracle " +
                    fmt("%.6f", eckart_young) + " (gap " + fmt("%.2g", gap) + ")",
                start, 5.0);
}

CheckResult check_gradients() {
  const auto start = Clock::now();
  using diffusion::Denoiser;
  const auto schedule = diffusion::DiffusionSchedule::linear();
  const double h = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  const int ranks[] = {4, 8, 16};
  for (int config = 0; config < 3; ++config) {
    RngStream rng(derive_key(0x96ad, {static_cast<std::uint64_t>(config)}));
    const Denoiser net = Denoiser::create(rng);
    auto adapters = net.make_adapters(ranks[config], rng);
    for (auto& [id, a] : adapters) a.up = rng.normal_matrix(a.up.rows(), a.up.cols()) * 0.1;
    diffusion::StyleToken token;
    token.values = rng.normal_matrix(Denoiser::kTokenDim, 1).col(0);
    token.provenance = diffusion::TokenProvenance::kLearned;
    const double scale = 0.5 + rng.uniform();
    const int n = 4;
    const Matrix x0 = rng.normal_matrix(n, 2);
    const Matrix noise = rng.normal_matrix(n, 2);
    std::vector<int> steps;
    for (int i = 0; i < n; ++i) steps.push_back(1 + static_cast<int>(rng.below(schedule.steps)));

    const auto grads =
        diffusion::loss_and_gradients(net, &adapters, scale, token, x0, steps, noise, schedule);
    auto loss_at = [&](const lowrank::AdapterSet& a, const diffusion::StyleToken& t) {
      return diffusion::loss_and_gradients(net, &a, scale, t, x0, steps, noise, schedule).loss;
    };
    auto compare = [&](double analytic, double numeric) {
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-5});
      worst = std::max(worst, rel);
      ++checked;
    };
    for (auto& [id, a] : adapters) {
      for (Matrix* factor : {&a.up, &a.down}) {
        const Matrix& g = factor == &a.up ? grads.adapter_grads.at(id).up
                                          : grads.adapter_grads.at(id).down;
        for (Eigen::Index k = 0; k < factor->size(); ++k) {
          const double saved = factor->data()[k];
          factor->data()[k] = saved + h;
          const double plus = loss_at(adapters, token);
          factor->data()[k] = saved - h;
          const double minus = loss_at(adapters, token);
          factor->data()[k] = saved;
          compare(g.data()[k], (plus - minus) / (2.0 * h));
        }
      }
    }
    for (Eigen::Index k = 0; k < token.values.size(); ++k) {
      auto t = token;
      t.values[k] += h;
      const double plus = loss_at(adapters, t);
      t.values[k] -= 2.0 * h;
      const double minus = loss_at(adapters, t);
      compare(grads.token_grad[k], (plus - minus) / (2.0 * h));
    }
  }
  return finish(3, "gradient correctness", worst < 1e-4,
                std::to_string(checked) + " parameters over 3 configurations, worst relative error " +
                    fmt("%.3g", worst),
                start, 30.0);
}

CheckResult check_cancellation() {
  const auto start = Clock::now();
  RngStream rng(0xc0de);
  // Two clients with identical updates written with opposite factor signs.
  lowrank::AdapterSet a, b;
  for (const char* id : {"fc2", "fc3"}) {
    LoraAdapter x = random_adapter(id, 16, 64, 64, rng);
    x.alpha = 16;
    LoraAdapter y = x;
    y.up = -x.up;
    y.down = -x.down;
    a[id] = x;
    b[id] = y;
  }
  const std::vector<lowrank::AdapterSet> members = {a, b};
  const std::vector<int> counts = {100, 100};
  const auto fedavg = federation::fedavg_aggregate(members, counts);
  const std::vector<double> weights = {0.5, 0.5};
  lowrank::AdapterSet stacked;
  for (const char* id : {"fc2", "fc3"}) {
    const std::vector<LoraAdapter> layer = {a.at(id), b.at(id)};
    stacked[id] = lowrank::stack_adapters(layer, weights);
  }
  const auto rows = metrics::energy_report(members, fedavg, stacked);
  double worst_cancel = 0.0;
  double worst_retained = 1e300;
  for (const auto& row : rows) {
    worst_cancel = std::max(worst_cancel, row.cancellation_ratio);
    const auto blocks = metrics::stacked_block_energies(stacked.at(row.layer), {16, 16});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const double target = weights[i] * weights[i] * row.member_energy[i];
      worst_retained = std::min(worst_retained, blocks[i] / target);
    }
  }
  return finish(4, "cancellation analogue", worst_cancel <= 0.01 && worst_retained >= 0.99,
                "FedAvg cancellation ratio " + fmt("%.3g", worst_cancel) +
                    ", smallest retained block energy " + fmt("%.6f", worst_retained),
                start, 5.0);
}

CheckResult check_clustering() {
  const auto start = Clock::now();
  const int dim = diffusion::Denoiser::kTokenDim;
  std::string detail;
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(derive_key(0xc1u, {seed}));
    const Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(dim, 3));
    const Matrix prototypes = qr.householderQ() * Matrix::Identity(dim, 3);
    std::vector<federation::DomainEmbedding> embeddings;
    std::map<int, std::string> truth;
    for (int id = 0; id < 9; ++id) {
      const int style = id % 3;
      diffusion::StyleToken token;
      token.values = prototypes.col(style) + 0.15 * rng.normal_matrix(dim, 1).col(0);
      token.provenance = diffusion::TokenProvenance::kLearned;
      embeddings.push_back(federation::encode_domain(token, seed, id));
      truth[id] = diffusion::style_names()[static_cast<std::size_t>(style)];
    }
    const auto assignment = federation::cluster_clients(embeddings, 0.5);
    const double purity = metrics::cluster_purity(assignment, truth);
    ok = ok && assignment.cluster_count() == 3 && purity == 1.0;
    detail += (seed ? ", " : "") + std::string("seed ") + std::to_string(seed) + ": " +
              std::to_string(assignment.cluster_count()) + " clusters purity " +
              fmt("%.3f", purity);
  }
  return finish(5, "clustering recovery", ok, detail, start, 5.0);
}

CheckResult check_handoff() {
  const auto start = Clock::now();
  using diffusion::Denoiser;
  RngStream rng(0x4a4d);
  protocol::World world;
  world.base = Denoiser::create(rng);
  world.schedule = diffusion::DiffusionSchedule::linear();
  const int T = world.schedule.steps;
  auto adapters = world.base.make_adapters(8, rng);
  for (auto& [id, a] : adapters) a.up = rng.normal_matrix(a.up.rows(), a.up.cols()) * 0.2;
  federation::ClientProfile client;
  client.client_id = 0;
  client.rank = 8;
  client.adapters = adapters;
  client.token = diffusion::StyleToken::neutral(Denoiser::kTokenDim);
  world.clients.push_back(client);
  world.ies.global = adapters;

  diffusion::StyleToken learned;
  learned.values = rng.normal_matrix(Denoiser::kTokenDim, 1).col(0);
  learned.provenance = diffusion::TokenProvenance::kLearned;

  const int n = 256;
  const double scale = 0.9;
  bool ok = protocol::server_steps(0.2, T) == 10 && protocol::server_steps(0.3, T) == 15;
  std::string detail = "server steps " + std::to_string(protocol::server_steps(0.2, T)) + "/" +
                       std::to_string(protocol::server_steps(0.3, T));
  for (double rho : {0.0, 0.2, 0.3}) {
    const std::uint64_t stream_id = derive_key(0x5eed, {static_cast<std::uint64_t>(rho * 10)});
    const RngStream stream(stream_id);
    const int s = protocol::server_steps(rho, T);

    // Split and resume with a learned token on one denoiser.
    const auto whole =
        diffusion::ddpm_sample(world.base, &adapters, scale, learned, n, world.schedule, stream);
    Matrix x = diffusion::initial_latent(n, stream);
    x = diffusion::ddpm_denoise(world.base, &adapters, scale, learned, x, T, T - s,
                                world.schedule, stream);
    x = diffusion::ddpm_denoise(world.base, &adapters, scale, learned, x, T - s, 0,
                                world.schedule, stream);
    const bool direct = (x.array() == whole.points.array()).all();

    // Same through the IES and a client, with matching adapters, scales and tokens.
    protocol::HybridConfig h;
    h.rho = rho;
    h.mix_loras = scale;
    h.local_scale = scale;
    h.sample_count = n;
    h.stream_id = stream_id;
    const auto hybrid = protocol::hybrid_infer(world, h);
    const auto neutral = diffusion::ddpm_sample(world.base, &adapters, scale, client.token, n,
                                                world.schedule, stream);
    const bool routed = hybrid.server_steps == s && hybrid.server_steps + hybrid.client_steps == T &&
                        (hybrid.samples.at(0).points.array() == neutral.points.array()).all();
    ok = ok && direct && routed;
    detail += ", rho " + fmt("%.1f", rho) + (direct && routed ? " identical" : " differs");
  }
  return finish(6, "handoff identity", ok, detail, start, 10.0);
}

CheckResult check_frechet() {
  const auto start = Clock::now();
  auto fit = [](Eigen::Vector2d mean, Eigen::Matrix2d cov) {
    metrics::GaussianFit f;
    f.mean = mean;
    f.covariance = cov;
    f.raw_covariance = cov;
    return f;
  };
  const Eigen::Matrix2d I = Eigen::Matrix2d::Identity();
  const double same = metrics::frechet_2d(fit({0.3, -1.2}, I * 2.0), fit({0.3, -1.2}, I * 2.0));
  const double shift = metrics::frechet_2d(fit({0, 0}, I), fit({1, 0}, I));
  const double scaled = metrics::frechet_2d(fit({0, 0}, 4.0 * I), fit({0, 0}, I));
  const bool ok = std::abs(same) <= 1e-9 && std::abs(shift - 1.0) <= 1e-9 &&
                  std::abs(scaled - 2.0) <= 1e-9;
  return finish(9, "metric correctness", ok,
                "identical " + fmt("%.3g", same) + ", unit shift " + fmt("%.12f", shift) +
                    ", 4I vs I " + fmt("%.12f", scaled),
                start, 1.0);
}

CheckResult check_accounting() {
  const auto start = Clock::now();
  using diffusion::Denoiser;
  RngStream rng(0xacc7);
  const Denoiser net = Denoiser::create(rng);
  const Denoiser::Architecture arch;
  const std::size_t full_oracle = denoiser_bytes_oracle(
      Denoiser::kDataDim, Denoiser::kTimeDim + Denoiser::kTokenDim, arch.hidden,
      arch.hidden_layers, arch.adaptable);
  const std::size_t full = protocol::encode_denoiser(net).size();
  bool ok = full == full_oracle;
  std::string detail = "full denoiser " + std::to_string(full) + " bytes (oracle " +
                       std::to_string(full_oracle) + ")";
  std::vector<std::pair<int, int>> dims;
  for (const auto& id : arch.adaptable) {
    const auto& w = net.layer(id).weight;
    dims.emplace_back(static_cast<int>(w.cols()), static_cast<int>(w.rows()));
  }
  for (int rank : {4, 8, 16, 64}) {
    protocol::AdapterUpload up;
    up.client_id = 3;
    up.sample_count = 100;
    up.adapters = net.make_adapters(rank, rng);
    up.embedding = federation::encode_domain(diffusion::StyleToken::neutral(Denoiser::kTokenDim),
                                             7, 3);
    const std::size_t bytes = protocol::message_size(up);
    const std::size_t expected = upload_bytes_oracle(rank, dims, arch.adaptable);
    ok = ok && bytes == expected && bytes < full;
    if (rank == 16) {
      const double share = static_cast<double>(bytes) / static_cast<double>(full);
      ok = ok && share < 0.45;
      detail += ", rank-16 upload " + std::to_string(bytes) + " bytes (oracle " +
                std::to_string(expected) + ", " + fmt("%.1f", 100.0 * share) + "% of full)";
    }
  }
  return finish(11, "communication accounting", ok, detail, start, 1.0);
}

ScenarioChecks check_scenarios(const Options& options) {
  ScenarioChecks out;
  fs::create_directories(options.work_dir);

  // Personalization across seeds.
  const auto start7 = Clock::now();
  bool ok7 = true;
  std::string detail7;
  std::vector<fs::path> run_dirs;
  for (std::uint64_t seed : options.seeds) {
    scenario::ScenarioConfig config;
    config.seed = seed;
    config.output_dir = (options.work_dir / ("seed_" + std::to_string(seed))).string();
    const auto result = scenario::run_scenario(config);
    run_dirs.emplace_back(config.output_dir);
    double mean = 0.0;
    double worst = 0.0;
    int count = 0;
    for (const auto& row : result.rows) {
      if (row.phase != "hybrid" || std::abs(row.rho - 0.2) > 1e-12 ||
          std::abs(row.mix_loras - 1.0) > 1e-12 || std::abs(row.local_scale - 0.95) > 1e-12)
        continue;
      mean += row.ratio;
      worst = std::max(worst, row.ratio);
      ++count;
    }
    if (count == 0) {
      ok7 = false;
      detail7 += (detail7.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) +
                 ": cell missing";
      continue;
    }
    mean /= count;
    ok7 = ok7 && count == 3 && mean <= 0.8 && worst <= 1.0;
    detail7 += (detail7.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) +
               ": mean " + fmt("%.3f", mean) + " worst " + fmt("%.3f", worst);
  }
  out.personalization = finish(7, "end-to-end personalization", ok7, detail7, start7, 600.0);

  // Isolation audit over the persisted logs.
  const auto start8 = Clock::now();
  std::size_t records = 0;
  std::size_t to_tes = 0;
  std::size_t to_ies = 0;
  std::size_t violations = 0;
  const std::set<std::string> known = {"AdapterUpload",  "ClusterModelDown", "GlobalLoraToIES",
                                       "InferRequest",   "LatentHandoff",    "RoundControl"};
  const std::set<std::string> client_adapters = {"AdapterUpload", "ClusterModelDown"};
  const diffusion::Denoiser::Architecture arch;
  const std::size_t upload_size = upload_bytes_oracle(
      16, std::vector<std::pair<int, int>>(arch.adaptable.size(), {arch.hidden, arch.hidden}),
      arch.adaptable);
  bool schema = std::variant_size_v<protocol::Message> == known.size();
  for (const auto& dir : run_dirs) {
    std::istringstream log(fetch(dir / "message_log.txt"));
    std::string line;
    while (std::getline(log, line)) {
      if (line.empty()) continue;
      const auto rec = protocol::parse_json_line(line);
      ++records;
      schema = schema && known.contains(rec.variant);
      // Control frames are header only.
      if (rec.variant == "RoundControl" && rec.bytes != protocol::kHeaderBytes) ++violations;
      if (rec.receiver.role == protocol::Role::kTes) {
        ++to_tes;
        // Uploads are exactly adapter plus embedding sized, leaving no room for samples.
        const bool upload = rec.variant == "AdapterUpload" &&
                            rec.sender.role == protocol::Role::kClient && rec.bytes == upload_size;
        if (!upload) ++violations;
      }
      if (rec.receiver.role == protocol::Role::kIes) {
        ++to_ies;
        if (client_adapters.contains(rec.variant)) ++violations;
      }
    }
  }
  out.isolation = finish(8, "isolation audit", schema && records > 0 && violations == 0,
                         std::to_string(records) + " logged messages, " + std::to_string(to_tes) +
                             " to TES, " + std::to_string(to_ies) + " to IES, " +
                             std::to_string(violations) + " violations" +
                             (schema ? "" : ", unknown message kinds"),
                         start8, 1.0);

  // Determinism: two fresh invocations, backbone pretraining included.
  const auto start10 = Clock::now();
  std::string outputs[2][2];
  for (int k = 0; k < 2; ++k) {
    scenario::clear_backbone_cache();
    scenario::ScenarioConfig config;
    config.seed = options.seeds.empty() ? 0 : options.seeds.front();
    config.output_dir = (options.work_dir / ("repeat_" + std::to_string(k))).string();
    scenario::run_scenario(config);
    outputs[k][0] = fetch(fs::path(config.output_dir) / "report.json");
    outputs[k][1] = fetch(fs::path(config.output_dir) / "metrics.csv");
  }
  const bool same_report = !outputs[0][0].empty() && outputs[0][0] == outputs[1][0];
  const bool same_metrics = !outputs[0][1].empty() && outputs[0][1] == outputs[1][1];
  out.determinism =
      finish(10, "determinism", same_report && same_metrics,
             std::string("report.json ") + (same_report ? "identical" : "differs") +
                 ", metrics.csv " + (same_metrics ? "identical" : "differs") + " (" +
                 std::to_string(outputs[0][0].size() + outputs[0][1].size()) + " bytes)",
             start10, 2.0 * out.personalization.seconds);
  return out;
}

std::vector<CheckResult> run(const Options& options,
                             const std::function<void(const CheckResult&)>& on_result) {
  auto wanted = [&](int id) {
    return options.only.empty() ||
           std::find(options.only.begin(), options.only.end(), id) != options.only.end();
  };
  std::vector<CheckResult> results;
  auto emit = [&](CheckResult r) {
    if (on_result) on_result(r);
    results.push_back(std::move(r));
  };
  auto guarded = [&](int id, const std::string& name, auto&& fn) {
    if (!wanted(id)) return;
    const auto start = Clock::now();
    try {
      emit(fn());
    } catch (const std::exception& e) {
      emit(finish(id, name, false, std::string("error: ") + e.what(), start, 0.0));
    }
  };
  guarded(1, "stacking exactness", check_stacking);
  guarded(2, "median-aligned padding", check_alignment);
  guarded(3, "gradient correctness", check_gradients);
  guarded(4, "cancellation analogue", check_cancellation);
  guarded(5, "clustering recovery", check_clustering);
  guarded(6, "handoff identity", check_handoff);
  if (wanted(7) || wanted(8) || wanted(10)) {
    const auto start = Clock::now();
    std::vector<CheckResult> scenario_results;
    try {
      const auto s = check_scenarios(options);
      scenario_results = {s.personalization, s.isolation, s.determinism};
    } catch (const std::exception& e) {
      for (auto [id, name] : {std::pair{7, "end-to-end personalization"},
                              std::pair{8, "isolation audit"}, std::pair{10, "determinism"}})
        scenario_results.push_back(
            finish(id, name, false, std::string("error: ") + e.what(), start, 0.0));
    }
    for (auto& r : scenario_results)
      if (r.id != 10 && wanted(r.id)) emit(r);
    guarded(9, "metric correctness", check_frechet);
    for (auto& r : scenario_results)
      if (r.id == 10 && wanted(10)) emit(r);
  } else {
    guarded(9, "metric correctness", check_frechet);
  }
  guarded(11, "communication accounting", check_accounting);
  return results;
}

}  // namespace edgefl::verify
