#include "edgefl/federation.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "edgefl/errors.h"

namespace edgefl::federation {

namespace {

using lowrank::LoraAdapter;
using lowrank::Matrix;

Vector normalized_or(const Vector& v, const Vector& fallback) {
  const double n = v.norm();
  return n > 1e-12 ? Vector(v / n) : fallback;
}

// Folds alpha / rank into the up factor, leaving alpha == rank.
LoraAdapter canonical(LoraAdapter a) {
  const double f = a.alpha / a.rank();
  if (f != 1.0) {
    a.up *= f;
    a.alpha = a.rank();
  }
  return a;
}

void check_same_layers(std::span<const AdapterSet> sets, const char* what) {
  if (sets.empty()) throw ArgumentError(std::string(what) + ": no adapter sets");
  for (const AdapterSet& s : sets) {
    if (s.size() != sets.front().size())
      throw DimensionError(std::string(what) + ": adapter sets cover different layers");
    for (const auto& [id, a] : sets.front())
      if (!s.contains(id))
        throw DimensionError(std::string(what) + ": adapter set lacks layer " + id);
  }
}

std::vector<double> uniform_weights(std::size_t n) { return std::vector<double>(n, 1.0 / n); }

// Median-rank alignment followed by averaging, one layer at a time.
AdapterSet aligned_average(std::span<const AdapterSet> sets, const std::vector<double>& weights,
                           const char* what) {
  check_same_layers(sets, what);
  if (weights.size() != sets.size())
    throw ArgumentError(std::string(what) + ": weight count differs from member count");
  AdapterSet out;
  for (const auto& [id, unused] : sets.front()) {
    std::vector<int> ranks;
    for (const AdapterSet& s : sets) ranks.push_back(s.at(id).rank());
    const int target = lowrank::median_rank(ranks);
    std::vector<LoraAdapter> aligned;
    for (const AdapterSet& s : sets) aligned.push_back(lowrank::align_rank(s.at(id), target));
    out.emplace(id, lowrank::average_adapters(aligned, weights));
  }
  return out;
}

std::vector<AdapterSet> adapter_sets_of(std::span<const ClientProfile> profiles) {
  std::vector<AdapterSet> sets;
  for (const ClientProfile& p : profiles) sets.push_back(p.adapters);
  return sets;
}

}  // namespace

double cosine(const Vector& a, const Vector& b) {
  const double denom = a.norm() * b.norm();
  if (denom == 0.0) return 0.0;
  return std::clamp(a.dot(b) / denom, -1.0, 1.0);
}

DomainEmbedding encode_domain(const StyleToken& token, std::uint64_t salt, int client_id) {
  if (!token.values.allFinite()) throw NumericError("encode_domain: token has non-finite entries");
  const auto key = derive_key(salt, {static_cast<std::uint64_t>(Purpose::kProjection)});
  RngStream projection_rng(key);
  const Matrix projection = projection_rng.normal_matrix(kEmbeddingDim, token.values.size());
  DomainEmbedding e;
  e.client_id = client_id;
  Vector v = projection * token.values;
  if (v.norm() <= 1e-12) {
    RngStream perturb(derive_key(key, {1}));
    v = projection * (token.values + 1e-6 * perturb.normal_matrix(token.values.size(), 1));
    e.fallback = true;
  }
  e.values = v / v.norm();
  return e;
}

ClusterAssignment cluster_clients(std::span<const DomainEmbedding> embeddings, double tau_c) {
  if (embeddings.empty()) throw ArgumentError("cluster_clients: no embeddings");
  if (!(tau_c > 0.0 && tau_c < 1.0)) throw ArgumentError("cluster_clients: tau_c must be in (0, 1)");

  // Ascending client-id order.
  std::vector<std::size_t> order(embeddings.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return embeddings[a].client_id < embeddings[b].client_id;
  });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (embeddings[order[i]].client_id == embeddings[order[i - 1]].client_id)
      throw ArgumentError("cluster_clients: duplicate client id " +
                          std::to_string(embeddings[order[i]].client_id));

  const std::size_t n = order.size();
  Matrix sim(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      sim(i, j) = cosine(embeddings[order[i]].values, embeddings[order[j]].values);

  // Clusters hold positions in `order`; they stay sorted by smallest member.
  std::vector<std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < n; ++i) clusters.push_back({i});
  auto linkage = [&](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    double total = 0.0;
    for (std::size_t i : a)
      for (std::size_t j : b) total += sim(i, j);
    return total / static_cast<double>(a.size() * b.size());
  };

  while (clusters.size() > 1) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_a = 0, best_b = 0;
    for (std::size_t a = 0; a < clusters.size(); ++a)
      for (std::size_t b = a + 1; b < clusters.size(); ++b) {
        const double s = linkage(clusters[a], clusters[b]);
        if (s > best) {
          best = s;
          best_a = a;
          best_b = b;
        }
      }
    if (best < tau_c) break;
    auto& target = clusters[best_a];
    target.insert(target.end(), clusters[best_b].begin(), clusters[best_b].end());
    std::sort(target.begin(), target.end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(best_b));
  }

  ClusterAssignment out;
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    std::vector<int> ids;
    Vector mean = Vector::Zero(embeddings[order[clusters[c].front()]].values.size());
    for (std::size_t pos : clusters[c]) {
      const DomainEmbedding& e = embeddings[order[pos]];
      ids.push_back(e.client_id);
      out.cluster_of[e.client_id] = static_cast<int>(c);
      mean += e.values;
    }
    out.members.push_back(std::move(ids));
    out.centroids.push_back(normalized_or(mean, embeddings[order[clusters[c].front()]].values));
  }
  return out;
}

bool is_allowed_rank(int rank) {
  return std::find(std::begin(kAllowedRanks), std::end(kAllowedRanks), rank) !=
         std::end(kAllowedRanks);
}

void ClientProfile::validate() const {
  if (!is_allowed_rank(rank))
    throw ArgumentError("client " + std::to_string(client_id) + ": rank " + std::to_string(rank) +
                        " not in {4, 8, 16, 64, 128}");
  for (const auto& [id, a] : adapters) {
    a.validate();
    if (a.rank() != rank)
      throw PreconditionError("client " + std::to_string(client_id) + ": layer " + id +
                              " has rank " + std::to_string(a.rank()) + ", declared " +
                              std::to_string(rank));
  }
}

AdapterSet intra_cluster_aggregate(std::span<const AdapterSet> members,
                                   const std::optional<std::vector<double>>& weights) {
  if (members.empty()) throw ArgumentError("intra_cluster_aggregate: empty cluster");
  return aligned_average(members, weights ? *weights : uniform_weights(members.size()),
                         "intra_cluster_aggregate");
}

AdapterSet intra_cluster_aggregate(std::span<const ClientProfile> members,
                                   const std::optional<std::vector<double>>& weights) {
  const auto sets = adapter_sets_of(members);
  return intra_cluster_aggregate(std::span<const AdapterSet>(sets), weights);
}

double ded(const Vector& cluster_centroid, const Vector& reference) {
  if (cluster_centroid.size() != reference.size())
    throw DimensionError("ded: embedding dimensions differ");
  return 1.0 - cosine(cluster_centroid, reference);
}

AggregationCoefficients compute_coefficients(std::span<const ClusterModel> clusters,
                                             double tau_ded, double lambda_snt) {
  if (clusters.empty()) throw ArgumentError("compute_coefficients: no clusters");
  if (!(lambda_snt >= 0.0)) throw ArgumentError("compute_coefficients: lambda_snt must be >= 0");

  Vector mean = Vector::Zero(clusters.front().centroid.size());
  for (const ClusterModel& c : clusters) mean += c.centroid;
  const bool has_reference = mean.norm() > 1e-12;
  const Vector reference = has_reference ? Vector(mean / mean.norm()) : mean;

  AggregationCoefficients out;
  std::vector<lowrank::EnergyProfile> profiles;
  for (const ClusterModel& c : clusters) {
    ClusterCoefficient cc;
    cc.cluster_id = c.cluster_id;
    // Without a consensus direction every cluster counts as unrelated.
    cc.ded = has_reference ? ded(c.centroid, reference) : 1.0;
    cc.filtered = cc.ded > tau_ded;
    out.clusters.push_back(cc);
    profiles.push_back(lowrank::snt_profile(c.adapters));
    out.degenerate_snt = out.degenerate_snt || profiles.back().degenerate;
  }

  std::vector<std::size_t> survivors;
  for (std::size_t i = 0; i < out.clusters.size(); ++i)
    if (!out.clusters[i].filtered) survivors.push_back(i);
  if (survivors.empty()) {
    out.all_filtered_fallback = true;
    for (auto& c : out.clusters) c.filtered = false;
    survivors.resize(out.clusters.size());
    std::iota(survivors.begin(), survivors.end(), 0);
  }

  lowrank::EnergyProfile mean_profile;
  mean_profile.normalized.assign(profiles.front().normalized.size(), 0.0);
  for (std::size_t i : survivors)
    for (std::size_t l = 0; l < mean_profile.normalized.size(); ++l)
      mean_profile.normalized[l] += profiles[i].normalized[l] / survivors.size();
  for (std::size_t i = 0; i < out.clusters.size(); ++i)
    out.clusters[i].snt_dist = lowrank::snt_distance(profiles[i], mean_profile);

  if (out.all_filtered_fallback) {
    for (auto& c : out.clusters) c.weight = 1.0 / out.clusters.size();
    return out;
  }
  double max_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i : survivors)
    max_score = std::max(max_score, -lambda_snt * out.clusters[i].snt_dist);
  double total = 0.0;
  for (std::size_t i : survivors) {
    out.clusters[i].weight = std::exp(-lambda_snt * out.clusters[i].snt_dist - max_score);
    total += out.clusters[i].weight;
  }
  for (std::size_t i : survivors) out.clusters[i].weight /= total;
  return out;
}

GlobalAggregate inter_cluster_aggregate(std::span<const ClusterModel> clusters,
                                        const AggregationCoefficients& coefficients) {
  if (clusters.empty()) throw ArgumentError("inter_cluster_aggregate: no clusters");
  std::vector<const ClusterModel*> used;
  std::vector<double> weights;
  for (const ClusterModel& c : clusters) {
    auto it = std::find_if(coefficients.clusters.begin(), coefficients.clusters.end(),
                           [&](const ClusterCoefficient& cc) { return cc.cluster_id == c.cluster_id; });
    if (it == coefficients.clusters.end())
      throw ArgumentError("inter_cluster_aggregate: no coefficient for cluster " +
                          std::to_string(c.cluster_id));
    if (it->filtered || it->weight == 0.0) continue;
    used.push_back(&c);
    weights.push_back(it->weight);
  }
  if (used.empty()) throw PreconditionError("inter_cluster_aggregate: every cluster is filtered");

  std::vector<AdapterSet> sets;
  for (const ClusterModel* c : used) sets.push_back(c->adapters);
  check_same_layers(sets, "inter_cluster_aggregate");

  GlobalAggregate out;
  for (const auto& [id, unused] : sets.front()) {
    std::vector<LoraAdapter> layer;
    int total_rank = 0;
    for (const AdapterSet& s : sets) {
      layer.push_back(s.at(id));
      total_rank += layer.back().rank();
    }
    out.stacked_rank[id] = total_rank;
    const int bound = layer.front().rank_bound();
    if (total_rank <= bound) {
      out.adapters.emplace(id, lowrank::stack_adapters(layer, weights));
      continue;
    }
    // Rank overflow: keep the best rank-`bound` approximation of the exact
    // weighted sum.
    out.rank_overflow = true;
    Matrix sum = Matrix::Zero(layer.front().d_out(), layer.front().d_in());
    for (std::size_t i = 0; i < layer.size(); ++i) sum += weights[i] * layer[i].delta();
    const lowrank::SvdResult dec = lowrank::svd(sum);
    LoraAdapter truncated;
    truncated.layer_id = id;
    truncated.alpha = bound;
    truncated.up = dec.left.leftCols(bound) * dec.singular_values.head(bound).asDiagonal();
    truncated.down = dec.right.leftCols(bound).transpose();
    out.adapters.emplace(id, std::move(truncated));
  }
  return out;
}

AdapterSet fedavg_aggregate(std::span<const AdapterSet> adapters,
                            std::span<const int> sample_counts) {
  if (adapters.size() != sample_counts.size())
    throw ArgumentError("fedavg_aggregate: one sample count per client required");
  double total = 0.0;
  for (int c : sample_counts) {
    if (c < 0) throw ArgumentError("fedavg_aggregate: negative sample count");
    total += c;
  }
  std::vector<double> weights = uniform_weights(adapters.size());
  if (total > 0.0)
    for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = sample_counts[i] / total;
  return aligned_average(adapters, weights, "fedavg_aggregate");
}

AdapterSet fedavg_aggregate(std::span<const ClientProfile> profiles) {
  const auto sets = adapter_sets_of(profiles);
  std::vector<int> counts;
  for (const ClientProfile& p : profiles) counts.push_back(p.sample_count);
  return fedavg_aggregate(std::span<const AdapterSet>(sets), counts);
}

WeiszfeldResult weiszfeld(const Eigen::MatrixXd& points, const GeoMedOptions& options) {
  if (points.cols() < 1) throw ArgumentError("weiszfeld: no points");
  auto objective = [&](const Vector& x) {
    return (points.colwise() - x).colwise().norm().sum();
  };
  WeiszfeldResult out;
  Vector x = points.rowwise().mean();
  Vector best = x;
  double best_obj = objective(x);
  out.converged = false;
  for (int it = 1; it <= options.max_iter; ++it) {
    Vector numerator = Vector::Zero(points.rows());
    double denominator = 0.0;
    for (Eigen::Index i = 0; i < points.cols(); ++i) {
      const double w = 1.0 / std::max((points.col(i) - x).norm(), options.epsilon);
      numerator += w * points.col(i);
      denominator += w;
    }
    const Vector next = numerator / denominator;
    const double movement = (next - x).norm();
    x = next;
    out.iterations = it;
    const double obj = objective(x);
    if (obj <= best_obj) {
      best_obj = obj;
      best = x;
    }
    if (movement < options.tol) {
      out.converged = true;
      break;
    }
  }
  out.point = out.converged ? x : best;
  return out;
}

GeoMedResult geomed_aggregate(std::span<const AdapterSet> adapters, const GeoMedOptions& options) {
  check_same_layers(adapters, "geomed_aggregate");
  GeoMedResult out;
  for (const auto& [id, unused] : adapters.front()) {
    std::vector<int> ranks;
    for (const AdapterSet& s : adapters) ranks.push_back(s.at(id).rank());
    const int target = lowrank::median_rank(ranks);
    std::vector<LoraAdapter> aligned;
    for (const AdapterSet& s : adapters)
      aligned.push_back(canonical(lowrank::align_rank(s.at(id), target)));
    const LoraAdapter& first = aligned.front();
    const Eigen::Index up_size = first.up.size();
    const Eigen::Index down_size = first.down.size();
    Eigen::MatrixXd points(up_size + down_size, static_cast<Eigen::Index>(aligned.size()));
    for (std::size_t i = 0; i < aligned.size(); ++i) {
      points.col(i).head(up_size) = aligned[i].up.reshaped();
      points.col(i).tail(down_size) = aligned[i].down.reshaped();
    }
    const WeiszfeldResult median = weiszfeld(points, options);
    LoraAdapter result;
    result.layer_id = id;
    result.alpha = target;
    result.up = median.point.head(up_size).reshaped(first.up.rows(), first.up.cols());
    result.down = median.point.tail(down_size).reshaped(first.down.rows(), first.down.cols());
    out.adapters.emplace(id, std::move(result));
    out.iterations = std::max(out.iterations, median.iterations);
    out.converged = out.converged && median.converged;
  }
  return out;
}

GeoMedResult geomed_aggregate(std::span<const ClientProfile> profiles, const GeoMedOptions& options) {
  const auto sets = adapter_sets_of(profiles);
  return geomed_aggregate(std::span<const AdapterSet>(sets), options);
}

FinetuneResult local_finetune(const ClientProfile& profile, const diffusion::Denoiser& denoiser,
                              const FinetuneOptions& options,
                              const diffusion::DiffusionSchedule& schedule, RngStream& rng,
                              std::uint64_t embedding_salt) {
  const int n = static_cast<int>(profile.data.size());
  if (n < 1) throw ArgumentError("local_finetune: client " + std::to_string(profile.client_id) +
                                 " has no data");
  if (options.batch_size < 1) throw ArgumentError("local_finetune: batch size must be positive");
  FinetuneResult out{profile, {}};
  try {
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
      const std::vector<int> order = diffusion::shuffled_indices(n, rng);
      for (int begin = 0; begin < n; begin += options.batch_size) {
        const int count = std::min(options.batch_size, n - begin);
        diffusion::SampleBatch mini;
        mini.points.resize(count, 2);
        for (int i = 0; i < count; ++i) mini.points.row(i) = profile.data.points.row(order[begin + i]);
        auto step = diffusion::training_step(denoiser, out.profile.adapters, options.adapter_scale,
                                             out.profile.token, mini, diffusion::Trainable::kBoth,
                                             options.learning_rate, schedule, rng,
                                             options.max_grad_norm);
        out.losses.push_back(step.loss);
        out.profile.adapters = std::move(step.adapters);
        out.profile.token = std::move(step.token);
      }
    }
  } catch (const NumericError& e) {
    throw NumericError("client " + std::to_string(profile.client_id) + ": " + e.what());
  }
  out.profile.embedding = encode_domain(out.profile.token, embedding_salt, profile.client_id);
  return out;
}

}  // namespace edgefl::federation
